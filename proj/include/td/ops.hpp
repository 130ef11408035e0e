#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "td/errors.hpp"
#include "td/tensor.hpp"

// Differentiable operations. Every op takes the tape first; the result
// requires a gradient iff the tape is enabled and some input requires one.
namespace td::ops {

namespace detail {

template <typename T, typename... Ts>
bool tracked(const BasicTape<T>& tape, const Ts&... inputs) {
  return tape.enabled() && (inputs.requires_grad() || ...);
}

template <typename T>
void require_rank2(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

template <typename T>
BasicTensor<T> matmul(BasicTape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  BasicTensor<T> out({n, m});
  {
    auto A = a.data();
    auto B = b.data();
    auto C = out.data();
    for (std::size_t i = 0; i < n; ++i) {
      T* crow = &C[i * m];
      for (std::size_t p = 0; p < k; ++p) {
        const T av = A[i * k + p];
        if (av == T(0)) continue;
        const T* brow = &B[p * m];
        for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
      }
    }
  }
  if (detail::tracked(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a, b, out, n, k, m]() mutable {
      auto G = std::as_const(out).grad();
      if (a.requires_grad()) {
        // dA = dC * B^T
        auto B = std::as_const(b).data();
        auto dA = a.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            T acc = T(0);
            for (std::size_t j = 0; j < m; ++j) acc += G[i * m + j] * B[p * m + j];
            dA[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        // dB = A^T * dC
        auto A = std::as_const(a).data();
        auto dB = b.grad();
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            if (av == T(0)) continue;
            for (std::size_t j = 0; j < m; ++j) dB[p * m + j] += av * G[i * m + j];
          }
        }
      }
    });
  }
  return out;
}

/// x[B x O] + bias[O], bias broadcast over rows.
template <typename T>
BasicTensor<T> add_bias(BasicTape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  detail::require_rank2(x, "add_bias");
  const std::size_t n = x.dim(0), m = x.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != m) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(x.shape()));
  }
  BasicTensor<T> out({n, m});
  auto X = x.data();
  auto Bv = bias.data();
  auto O = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) O[i * m + j] = X[i * m + j] + Bv[j];
  if (detail::tracked(tape, x, bias)) {
    out.set_requires_grad(true);
    tape.record([x, bias, out, n, m]() mutable {
      auto G = std::as_const(out).grad();
      if (x.requires_grad()) {
        auto dX = x.grad();
        for (std::size_t i = 0; i < n * m; ++i) dX[i] += G[i];
      }
      if (bias.requires_grad()) {
        auto dB = bias.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) dB[j] += G[i * m + j];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> linear(BasicTape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  return add_bias(tape, matmul(tape, x, w), b);
}

template <typename T>
BasicTensor<T> add(BasicTape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  BasicTensor<T> out(a.shape());
  auto A = a.data();
  auto B = b.data();
  auto O = out.data();
  for (std::size_t i = 0; i < O.size(); ++i) O[i] = A[i] + B[i];
  if (detail::tracked(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      auto G = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto d = a.grad();
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
      }
      if (b.requires_grad()) {
        auto d = b.grad();
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(BasicTape<T>& tape, const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  auto A = a.data();
  auto O = out.data();
  for (std::size_t i = 0; i < O.size(); ++i) O[i] = A[i] * s;
  if (detail::tracked(tape, a)) {
    out.set_requires_grad(true);
    tape.record([a, out, s]() mutable {
      auto G = std::as_const(out).grad();
      auto d = a.grad();
      for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * s;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(BasicTape<T>& tape, const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  auto X = x.data();
  auto O = out.data();
  for (std::size_t i = 0; i < O.size(); ++i) O[i] = X[i] > T(0) ? X[i] : T(0);
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    tape.record([x, out]() mutable {
      auto G = std::as_const(out).grad();
      auto X = std::as_const(x).data();
      auto d = x.grad();
      for (std::size_t i = 0; i < G.size(); ++i)
        if (X[i] > T(0)) d[i] += G[i];
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes each row over the last axis, then applies scale/shift.
template <typename T>
BasicTensor<T> layer_norm(BasicTape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(kLayerNormEps)) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: scale/shift " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not fit " + shape_str(x.shape()));
  }
  BasicTensor<T> out({n, d});
  std::vector<T> xhat(n * d), inv_std(n);
  auto X = x.data();
  auto Gm = gamma.data();
  auto Bt = beta.data();
  auto O = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = &X[i * d];
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= T(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(d);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * inv_std[i];
      xhat[i * d + j] = h;
      O[i * d + j] = Gm[j] * h + Bt[j];
    }
  }
  if (detail::tracked(tape, x, gamma, beta)) {
    out.set_requires_grad(true);
    tape.record([x, gamma, beta, out, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
      auto G = std::as_const(out).grad();
      auto Gm = std::as_const(gamma).data();
      if (gamma.requires_grad()) {
        auto dg = gamma.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) dg[j] += G[i * d + j] * xhat[i * d + j];
      }
      if (beta.requires_grad()) {
        auto db = beta.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) db[j] += G[i * d + j];
      }
      if (x.requires_grad()) {
        auto dx = x.grad();
        std::vector<T> dxhat(d);
        for (std::size_t i = 0; i < n; ++i) {
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = G[i * d + j] * Gm[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[i * d + j];
          }
          mean_dxhat /= T(d);
          mean_dxhat_xhat /= T(d);
          for (std::size_t j = 0; j < d; ++j) {
            dx[i * d + j] += inv_std[i] * (dxhat[j] - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

/// Inverted dropout. Identity (same handle) when not training or rate == 0.
template <typename T>
BasicTensor<T> dropout(BasicTape<T>& tape, const BasicTensor<T>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const T keep = T(1.0 - rate);
  std::bernoulli_distribution keep_dist(1.0 - rate);
  std::vector<T> mask(x.numel());
  for (auto& v : mask) v = keep_dist(rng) ? T(1) / keep : T(0);
  BasicTensor<T> out(x.shape());
  auto X = x.data();
  auto O = out.data();
  for (std::size_t i = 0; i < O.size(); ++i) O[i] = X[i] * mask[i];
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    tape.record([x, out, mask = std::move(mask)]() mutable {
      auto G = std::as_const(out).grad();
      auto d = x.grad();
      for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * mask[i];
    });
  }
  return out;
}

/// Concatenation along the last axis: {a; b}.
template <typename T>
BasicTensor<T> concat(BasicTape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank2(a, "concat");
  detail::require_rank2(b, "concat");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("concat: row counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), da = a.dim(1), db = b.dim(1), w = da + db;
  BasicTensor<T> out({n, w});
  auto A = a.data();
  auto B = b.data();
  auto O = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&A[i * da], da, &O[i * w]);
    std::copy_n(&B[i * db], db, &O[i * w + da]);
  }
  if (detail::tracked(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a, b, out, n, da, db, w]() mutable {
      auto G = std::as_const(out).grad();
      if (a.requires_grad()) {
        auto d = a.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < da; ++j) d[i * da + j] += G[i * w + j];
      }
      if (b.requires_grad()) {
        auto d = b.grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < db; ++j) d[i * db + j] += G[i * w + da + j];
      }
    });
  }
  return out;
}

/// Columns [begin, end) of a matrix.
template <typename T>
BasicTensor<T> slice_cols(BasicTape<T>& tape, const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank2(x, "slice_cols");
  const std::size_t n = x.dim(0), w = x.dim(1);
  if (begin >= end || end > w) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " +
                     shape_str(x.shape()));
  }
  const std::size_t ow = end - begin;
  BasicTensor<T> out({n, ow});
  auto X = x.data();
  auto O = out.data();
  for (std::size_t i = 0; i < n; ++i) std::copy_n(&X[i * w + begin], ow, &O[i * ow]);
  if (detail::tracked(tape, x)) {
    out.set_requires_grad(true);
    tape.record([x, out, n, w, ow, begin]() mutable {
      auto G = std::as_const(out).grad();
      auto d = x.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ow; ++j) d[i * w + begin + j] += G[i * ow + j];
    });
  }
  return out;
}

/// Mean over all elements of (a - b)^2.
template <typename T>
BasicTensor<T> mse(BasicTape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mse");
  auto A = a.data();
  auto B = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double diff = double(A[i]) - double(B[i]);
    acc += diff * diff;
  }
  const std::size_t count = A.size();
  BasicTensor<T> out = BasicTensor<T>::scalar(T(acc / double(count)));
  if (detail::tracked(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a, b, out, count]() mutable {
      const T g = std::as_const(out).grad()[0] * T(2) / T(count);
      auto A = std::as_const(a).data();
      auto B = std::as_const(b).data();
      if (a.requires_grad()) {
        auto d = a.grad();
        for (std::size_t i = 0; i < count; ++i) d[i] += g * (A[i] - B[i]);
      }
      if (b.requires_grad()) {
        auto d = b.grad();
        for (std::size_t i = 0; i < count; ++i) d[i] -= g * (A[i] - B[i]);
      }
    });
  }
  return out;
}

/// Mean of the selected rows of `table` for each bag; an empty bag yields zeros.
template <typename T>
BasicTensor<T> embedding_bag(BasicTape<T>& tape, const BasicTensor<T>& table,
                             std::span<const std::vector<std::size_t>> bags) {
  detail::require_rank2(table, "embedding_bag");
  const std::size_t vocab = table.dim(0), d = table.dim(1), n = bags.size();
  if (n == 0) throw ShapeError("embedding_bag: empty batch");
  for (const auto& bag : bags) {
    for (auto id : bag) {
      if (id >= vocab) {
        throw ShapeError("embedding_bag: id " + std::to_string(id) + " out of range for table " +
                         shape_str(table.shape()));
      }
    }
  }
  BasicTensor<T> out({n, d});
  auto W = table.data();
  auto O = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (bags[i].empty()) continue;
    const T inv = T(1) / T(bags[i].size());
    for (auto id : bags[i])
      for (std::size_t j = 0; j < d; ++j) O[i * d + j] += W[id * d + j] * inv;
  }
  if (detail::tracked(tape, table)) {
    out.set_requires_grad(true);
    std::vector<std::vector<std::size_t>> kept(bags.begin(), bags.end());
    tape.record([table, out, d, kept = std::move(kept)]() mutable {
      auto G = std::as_const(out).grad();
      auto dW = table.grad();
      for (std::size_t i = 0; i < kept.size(); ++i) {
        if (kept[i].empty()) continue;
        const T inv = T(1) / T(kept[i].size());
        for (auto id : kept[i])
          for (std::size_t j = 0; j < d; ++j) dW[id * d + j] += G[i * d + j] * inv;
      }
    });
  }
  return out;
}

/// Mean softmax cross-entropy of logits[B x C] against integer labels.
template <typename T>
BasicTensor<T> softmax_cross_entropy(BasicTape<T>& tape, const BasicTensor<T>& logits,
                                     std::span<const std::size_t> labels) {
  detail::require_rank2(logits, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match batch");
  std::vector<T> probs(n * c);
  auto L = logits.data();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ShapeError("softmax_cross_entropy: label out of range");
    const T* row = &L[i * c];
    const T mx = *std::max_element(row, row + c);
    T z = T(0);
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - mx) / z;
    loss -= double(row[labels[i]] - mx - std::log(z));
  }
  BasicTensor<T> out = BasicTensor<T>::scalar(T(loss / double(n)));
  if (detail::tracked(tape, logits)) {
    out.set_requires_grad(true);
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    tape.record([logits, out, n, c, probs = std::move(probs), lab = std::move(lab)]() mutable {
      const T g = std::as_const(out).grad()[0] / T(n);
      auto d = logits.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g * (probs[i * c + j] - (j == lab[i] ? T(1) : T(0)));
    });
  }
  return out;
}

/// Value copy cut off from the graph.
template <typename T>
BasicTensor<T> detach(const BasicTensor<T>& x) {
  return x.clone();
}

}  // namespace td::ops
