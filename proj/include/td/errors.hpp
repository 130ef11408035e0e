#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace td {

// Each error family maps onto one CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what, 3) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error("numerical failure: " + what, 4) {}
};

/// Shape mismatches and violated call contracts.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape/contract violation: " + what, 5) {}
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace td
