#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "td/errors.hpp"

namespace td {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array with an optional gradient buffer.
///
/// A tensor is a shared handle: copies alias the same storage, which is how
/// parameters and graph intermediates are referenced from tape closures.
/// Use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<Storage>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    impl_->value.assign(shape_numel(shape), T(0));
    impl_->shape = std::move(shape);
    set_requires_grad(requires_grad);
  }

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : BasicTensor(std::move(shape), requires_grad) {
    if (values.size() != impl_->value.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(impl_->shape));
    }
    impl_->value = std::move(values);
  }

  static BasicTensor scalar(T v, bool requires_grad = false) { return BasicTensor({1}, {v}, requires_grad); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->value.size(); }
  // 2-D helpers; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : impl_->shape.front(); }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<T> data() { return impl_->value; }
  std::span<const T> data() const { return impl_->value; }
  // Handles share storage, so gradient buffers stay writable through const handles (backward closures).
  std::span<T> grad() const { return impl_->grad; }
  T& operator[](std::size_t i) { return impl_->value[i]; }
  T operator[](std::size_t i) const { return impl_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return impl_->value[r * cols() + c]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on) {
      impl_->grad.assign(impl_->value.size(), T(0));
    } else {
      impl_->grad.clear();
    }
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

  BasicTensor clone() const {
    BasicTensor out(impl_->shape, impl_->value);
    return out;
  }

  bool same_storage(const BasicTensor& other) const { return impl_ == other.impl_; }

  bool all_finite() const {
    for (T v : impl_->value) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> impl_;
};

/// Ordered record of differentiable operations.
///
/// Ops append a backward closure when any input requires a gradient.
/// backward() replays the closures in exact reverse order of recording, so
/// gradient accumulation order is fixed for a given forward sequence.
template <typename T>
class BasicTape {
 public:
  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  /// A tape that records nothing; results never require gradients.
  static BasicTape inference() {
    BasicTape t;
    t.enabled_ = false;
    return t;
  }
  BasicTape(BasicTape&&) = default;

  bool enabled() const noexcept { return enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void record(std::function<void()> backward_fn) {
    if (enabled_) nodes_.push_back(std::move(backward_fn));
  }

  void backward(BasicTensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ShapeError("backward() on a loss that does not require grad");
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool enabled_ = true;
};

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> v(t.data().begin(), t.data().end());
  return BasicTensor<To>(t.shape(), std::move(v), t.requires_grad());
}

}  // namespace td
