#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "td/errors.hpp"
#include "td/nets.hpp"
#include "td/tensor.hpp"

namespace td {

enum class TaskKind { Regression, Classification };

/// Mini-batch ready for a forward pass.
template <typename T>
struct Batch {
  NetInput<T> x;
  BasicTensor<T> y;                 // B x 1 regression targets (regression only)
  std::vector<std::size_t> labels;  // classification only
  std::size_t size() const {
    if (const auto* d = std::get_if<BasicTensor<T>>(&x)) return d->rows();
    return std::get<SparseFeatures>(x).size();
  }
};

/// Examples held either as a dense matrix or as sparse rating features.
struct Dataset {
  TaskKind kind = TaskKind::Regression;
  std::size_t input_width = 0;
  std::vector<float> dense;  // row-major, size() x input_width; empty when sparse
  SparseFeatures sparse;
  std::vector<float> targets;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::vector<std::int64_t> group;  // subpopulation / bucket id per example

  bool is_sparse() const { return dense.empty() && sparse.size() > 0; }
  std::size_t size() const { return kind == TaskKind::Regression ? targets.size() : labels.size(); }
  bool empty() const { return size() == 0; }

  template <typename T = float>
  Batch<T> batch(std::span<const std::size_t> idx) const {
    if (idx.empty()) throw DataError("empty batch requested");
    Batch<T> b;
    const std::size_t n = idx.size();
    if (is_sparse()) {
      SparseFeatures f;
      for (auto i : idx) {
        f.user.push_back(sparse.user.at(i));
        f.movie.push_back(sparse.movie.at(i));
        f.title.push_back(sparse.title.at(i));
        f.genre.push_back(sparse.genre.at(i));
      }
      b.x = std::move(f);
    } else {
      BasicTensor<T> x({n, input_width});
      auto out = x.data();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < input_width; ++c) out[r * input_width + c] = T(dense.at(idx[r] * input_width + c));
      b.x = std::move(x);
    }
    if (kind == TaskKind::Regression) {
      BasicTensor<T> y({n, 1});
      for (std::size_t r = 0; r < n; ++r) y[r] = T(targets.at(idx[r]));
      b.y = std::move(y);
    } else {
      for (auto i : idx) b.labels.push_back(labels.at(i));
    }
    return b;
  }

  /// Copy of the selected examples, in the given order.
  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.kind = kind;
    out.input_width = input_width;
    out.classes = classes;
    for (auto i : idx) {
      if (is_sparse()) {
        out.sparse.user.push_back(sparse.user.at(i));
        out.sparse.movie.push_back(sparse.movie.at(i));
        out.sparse.title.push_back(sparse.title.at(i));
        out.sparse.genre.push_back(sparse.genre.at(i));
      } else {
        out.dense.insert(out.dense.end(), dense.begin() + std::ptrdiff_t(i * input_width),
                         dense.begin() + std::ptrdiff_t((i + 1) * input_width));
      }
      if (kind == TaskKind::Regression) {
        out.targets.push_back(targets.at(i));
      } else {
        out.labels.push_back(labels.at(i));
      }
      if (!group.empty()) out.group.push_back(group.at(i));
    }
    return out;
  }
};

}  // namespace td
