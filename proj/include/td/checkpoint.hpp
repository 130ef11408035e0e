#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "td/adam.hpp"
#include "td/errors.hpp"
#include "td/tensor.hpp"

// Binary container of named f32 tensors:
//   "TDCK" | version u32 | count u32 |
//   count x (name_len u16 | name utf-8 | rank u8 | dims u32 x rank | f32 payload)
// All integers and floats little-endian.
namespace td::checkpoint {

inline constexpr char kMagic[4] = {'T', 'D', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

template <typename UInt>
void put(std::ostream& os, UInt v) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) os.put(char((v >> (8 * i)) & 0xFF));
}

template <typename UInt>
UInt get(std::istream& is, const char* what) {
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw DataError(std::string("truncated checkpoint while reading ") + what);
    v |= UInt(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

inline void write(std::ostream& os, std::span<const NamedTensor> tensors) {
  os.write(kMagic, 4);
  detail::put<std::uint32_t>(os, kVersion);
  detail::put<std::uint32_t>(os, std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw ShapeError("tensor name too long: " + name.substr(0, 40) + "...");
    if (t.rank() > 0xFF) throw ShapeError("tensor rank too large: " + name);
    detail::put<std::uint16_t>(os, std::uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint32_t>(os, std::uint32_t(d));
    for (float v : t.data()) detail::put<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw DataError("failed writing checkpoint");
}

inline std::vector<NamedTensor> read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw DataError("not a TDCK checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(is, "version");
  if (version != kVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(is, "tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint16_t>(is, "name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("truncated checkpoint while reading a tensor name");
    const auto rank = detail::get<std::uint8_t>(is, "rank");
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(detail::get<std::uint32_t>(is, "dims"));
    Tensor t(shape);
    for (auto& v : t.data()) v = std::bit_cast<float>(detail::get<std::uint32_t>(is, "payload"));
    out.push_back({std::move(name), std::move(t)});
  }
  return out;
}

inline void save(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  write(os, tensors);
}

inline std::vector<NamedTensor> load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  return read(is);
}

inline std::vector<NamedTensor> from_params(std::span<const Parameter<float>> params) {
  std::vector<NamedTensor> out;
  for (const auto& p : params) out.push_back({p.name, p.value});
  return out;
}

/// Copies checkpoint values into `params` by name. Every parameter must be present with a matching shape.
inline void restore(std::span<const Parameter<float>> params, std::span<const NamedTensor> stored,
                    const std::string& what) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : stored) by_name[nt.name] = &nt.tensor;
  std::vector<std::string> missing;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      missing.push_back(p.name);
      continue;
    }
    if (it->second->shape() != p.value.shape()) {
      throw ShapeError(what + ": tensor '" + p.name + "' is " + shape_str(it->second->shape()) +
                       " in the checkpoint but the configuration expects " + shape_str(p.value.shape()));
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 6; ++i) list += (i ? ", " : "") + missing[i];
    if (missing.size() > 6) list += ", ...";
    throw ShapeError(what + ": checkpoint lacks " + std::to_string(missing.size()) + " tensor(s): " + list);
  }
  for (const auto& p : params) {
    Tensor dst = p.value;
    auto src = by_name.at(p.name)->data();
    std::copy(src.begin(), src.end(), dst.data().begin());
  }
}

inline bool contains_prefix(std::span<const NamedTensor> stored, const std::string& prefix) {
  for (const auto& nt : stored)
    if (nt.name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace td::checkpoint
