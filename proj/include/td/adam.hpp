#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "td/errors.hpp"
#include "td/tensor.hpp"

namespace td {

/// A named trainable tensor. Frozen parameters are never touched by the optimizer.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  bool frozen = false;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are created lazily (zero-filled) per
/// parameter name the first time that parameter is stepped.
template <typename T>
class BasicAdam {
 public:
  explicit BasicAdam(AdamOptions opts = {}) : opts_(opts) {}

  const AdamOptions& options() const { return opts_; }
  std::uint64_t steps() const { return t_; }

  void step(std::span<const Parameter<T>> params) {
    for (const auto& p : params) {
      if (p.frozen || !p.value.requires_grad()) continue;
      for (T g : p.value.grad()) {
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, double(t_));
    for (const auto& p : params) {
      if (p.frozen || !p.value.requires_grad()) continue;
      auto& mom = moments_[p.name];
      BasicTensor<T> value = p.value;
      auto w = value.data();
      auto g = std::as_const(value).grad();
      if (mom.m.empty()) {
        mom.m.assign(w.size(), T(0));
        mom.v.assign(w.size(), T(0));
      }
      if (mom.m.size() != w.size()) throw ShapeError("optimizer state for '" + p.name + "' has wrong size");
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T gi = g[i];
        mom.m[i] = T(opts_.beta1) * mom.m[i] + T(1.0 - opts_.beta1) * gi;
        mom.v[i] = T(opts_.beta2) * mom.v[i] + T(1.0 - opts_.beta2) * gi * gi;
        const T mhat = mom.m[i] / T(bc1);
        const T vhat = mom.v[i] / T(bc2);
        w[i] -= T(opts_.lr) * mhat / (std::sqrt(vhat) + T(opts_.eps));
      }
    }
  }

  /// First/second moments for a parameter; empty if it was never stepped.
  std::pair<std::span<const T>, std::span<const T>> moments(const std::string& name) const {
    auto it = moments_.find(name);
    if (it == moments_.end()) return {};
    return {it->second.m, it->second.v};
  }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  AdamOptions opts_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

using Adam = BasicAdam<float>;

template <typename T>
void zero_grads(std::span<const Parameter<T>> params) {
  for (auto p : params) p.value.zero_grad();
}

}  // namespace td
