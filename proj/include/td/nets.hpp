#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "td/adam.hpp"
#include "td/errors.hpp"
#include "td/ops.hpp"
#include "td/tensor.hpp"

namespace td {

/// Fully connected layer y = xW + b. W is in x out, He-uniform initialized.
template <typename T>
struct Dense {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  Dense() = default;
  Dense(std::size_t in, std::size_t out, Rng& rng) : weight({in, out}, true), bias({out}, true) {
    const double limit = std::sqrt(6.0 / double(in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& w : weight.data()) w = T(dist(rng));
  }

  std::size_t in_width() const { return weight.dim(0); }
  std::size_t out_width() const { return weight.dim(1); }

  BasicTensor<T> operator()(BasicTape<T>& tape, const BasicTensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != in_width()) {
      throw ShapeError("dense layer expects width " + std::to_string(in_width()) + ", got " + shape_str(x.shape()));
    }
    return ops::linear(tape, x, weight, bias);
  }

  void append_params(std::vector<Parameter<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".W", weight});
    out.push_back({prefix + ".b", bias});
  }
};

/// Copies values between two parameter lists that describe the same layout.
template <typename Dst, typename Src>
void copy_param_values(std::span<const Parameter<Dst>> dst, std::span<const Parameter<Src>> src) {
  if (dst.size() != src.size()) {
    throw ShapeError("parameter count mismatch: " + std::to_string(dst.size()) + " vs " + std::to_string(src.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].value.shape() != src[i].value.shape()) {
      throw ShapeError("parameter '" + dst[i].name + "' has shape " + shape_str(dst[i].value.shape()) +
                       " but source '" + src[i].name + "' has " + shape_str(src[i].value.shape()));
    }
    BasicTensor<Dst> d = dst[i].value;
    auto out = d.data();
    auto in = src[i].value.data();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = Dst(in[j]);
  }
}

/// FNV-1a over the raw bytes of every parameter, in list order.
template <typename T>
std::uint64_t param_checksum(std::span<const Parameter<T>> params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    for (T v : p.value.data()) {
      unsigned char bytes[sizeof(T)];
      std::memcpy(bytes, &v, sizeof(T));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

template <typename T>
std::uint64_t param_checksum(const std::vector<Parameter<T>>& params) {
  return param_checksum(std::span<const Parameter<T>>(params));
}

/// Sparse rating-example features: single ids plus token/genre bags.
struct SparseFeatures {
  std::vector<std::size_t> user;
  std::vector<std::size_t> movie;
  std::vector<std::vector<std::size_t>> title;
  std::vector<std::vector<std::size_t>> genre;

  std::size_t size() const { return user.size(); }
};

struct FeatureEncoderConfig {
  std::size_t users = 0, movies = 0, title_vocab = 0, genres = 0;
  std::size_t user_dim = 100, movie_dim = 100, title_dim = 50, genre_dim = 50;

  std::size_t width() const { return user_dim + movie_dim + title_dim + genre_dim; }
};

/// Learned embedding front-end: [user | movie | mean(title tokens) | mean(genres)].
template <typename T>
class FeatureEncoder {
 public:
  FeatureEncoder(const FeatureEncoderConfig& cfg, Rng& rng)
      : cfg_(cfg),
        user_({cfg.users, cfg.user_dim}, true),
        movie_({cfg.movies, cfg.movie_dim}, true),
        title_({cfg.title_vocab, cfg.title_dim}, true),
        genre_({cfg.genres, cfg.genre_dim}, true) {
    std::uniform_real_distribution<double> dist(-0.05, 0.05);
    for (auto* t : {&user_, &movie_, &title_, &genre_})
      for (auto& v : t->data()) v = T(dist(rng));
  }

  const FeatureEncoderConfig& config() const { return cfg_; }
  std::size_t width() const { return cfg_.width(); }

  BasicTensor<T> operator()(BasicTape<T>& tape, const SparseFeatures& f) const {
    const std::size_t n = f.size();
    if (f.movie.size() != n || f.title.size() != n || f.genre.size() != n) {
      throw ShapeError("sparse feature columns have different lengths");
    }
    std::vector<std::vector<std::size_t>> users(n), movies(n);
    for (std::size_t i = 0; i < n; ++i) {
      users[i] = {f.user[i]};
      movies[i] = {f.movie[i]};
    }
    auto u = ops::embedding_bag<T>(tape, user_, users);
    auto m = ops::embedding_bag<T>(tape, movie_, movies);
    auto t = ops::embedding_bag<T>(tape, title_, f.title);
    auto g = ops::embedding_bag<T>(tape, genre_, f.genre);
    return ops::concat(tape, ops::concat(tape, u, m), ops::concat(tape, t, g));
  }

  void append_params(std::vector<Parameter<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".user_emb", user_});
    out.push_back({prefix + ".movie_emb", movie_});
    out.push_back({prefix + ".title_emb", title_});
    out.push_back({prefix + ".genre_emb", genre_});
  }

 private:
  FeatureEncoderConfig cfg_;
  BasicTensor<T> user_, movie_, title_, genre_;
};

/// Layer indices (1-based) delimiting lower states s and higher states e.
/// s = layers 1..lower, e = layers lower+1..higher, y = layers higher+1..total.
struct LayerPartition {
  std::size_t lower = 1;
  std::size_t higher = 2;
  std::size_t total = 3;

  void validate() const {
    if (!(1 <= lower && lower < higher && higher < total + 1 && higher <= total)) {
      throw ConfigError("layer partition requires 1 <= l < h <= n, got l=" + std::to_string(lower) +
                        " h=" + std::to_string(higher) + " n=" + std::to_string(total));
    }
    if (higher == total) throw ConfigError("layer partition leaves no head layer (h == n)");
  }
};

struct NetConfig {
  std::size_t input_width = 0;  // ignored when `features` is set
  std::vector<std::size_t> hidden;  // relu block widths, layers 1..n-1
  std::size_t output_width = 1;
  LayerPartition partition;
  double dropout = 0.0;
  std::optional<FeatureEncoderConfig> features;

  static NetConfig mlp(std::size_t input, std::vector<std::size_t> hidden, std::size_t output = 1) {
    NetConfig c;
    c.input_width = input;
    c.hidden = std::move(hidden);
    c.output_width = output;
    c.partition = {1, 2, c.hidden.size() + 1};
    return c;
  }
};

template <typename T>
using NetInput = std::variant<BasicTensor<T>, SparseFeatures>;

template <typename T>
struct Taps {
  BasicTensor<T> y;
  BasicTensor<T> s;
  BasicTensor<T> e;
};

/// Feed-forward net with an explicit lower/higher/head partition.
///
/// Hidden layers are dense -> relu -> dropout blocks; the final layer is a
/// linear head. Taps are the actual activations produced during forward.
template <typename T>
class BasicPartitionedNet {
 public:
  BasicPartitionedNet(NetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.partition.total = cfg_.hidden.size() + 1;
    cfg_.partition.validate();
    if (cfg_.features) {
      features_.emplace(*cfg_.features, rng);
      cfg_.input_width = features_->width();
    }
    if (cfg_.input_width == 0) throw ConfigError("net input width must be positive");
    std::size_t width = cfg_.input_width;
    for (auto h : cfg_.hidden) {
      layers_.emplace_back(width, h, rng);
      width = h;
    }
    layers_.emplace_back(width, cfg_.output_width, rng);
  }

  BasicPartitionedNet(BasicPartitionedNet&&) noexcept = default;
  BasicPartitionedNet& operator=(BasicPartitionedNet&&) noexcept = default;
  BasicPartitionedNet(const BasicPartitionedNet&) = delete;
  BasicPartitionedNet& operator=(const BasicPartitionedNet&) = delete;

  const NetConfig& config() const { return cfg_; }
  const LayerPartition& partition() const { return cfg_.partition; }
  std::size_t input_width() const { return cfg_.input_width; }
  std::size_t s_width() const { return layers_[cfg_.partition.lower - 1].out_width(); }
  std::size_t e_width() const { return layers_[cfg_.partition.higher - 1].out_width(); }
  std::size_t state_width() const { return s_width() + e_width(); }
  std::size_t output_width() const { return cfg_.output_width; }
  bool frozen() const { return frozen_; }
  const std::vector<Dense<T>>& layers() const { return layers_; }

  void freeze() {
    frozen_ = true;
    for (auto& p : params("")) p.value.set_requires_grad(false);
  }

  /// Maps the raw input to the first layer's input (embedding lookup for sparse inputs).
  BasicTensor<T> embed(BasicTape<T>& tape, const NetInput<T>& input) const {
    if (const auto* dense = std::get_if<BasicTensor<T>>(&input)) return *dense;
    if (!features_) throw ShapeError("sparse input given to a net without a feature encoder");
    return (*features_)(tape, std::get<SparseFeatures>(input));
  }

  Taps<T> forward_with_taps(BasicTape<T>& tape, const NetInput<T>& input, bool training, Rng& rng) const {
    auto x = embed(tape, input);
    if (x.rank() != 2 || x.dim(1) != cfg_.input_width) {
      throw ShapeError("net expects input width " + std::to_string(cfg_.input_width) + ", got " +
                       shape_str(x.shape()));
    }
    auto s = run_range(tape, x, 0, cfg_.partition.lower, training, rng);
    auto e = run_range(tape, s, cfg_.partition.lower, cfg_.partition.higher, training, rng);
    auto y = run_range(tape, e, cfg_.partition.higher, cfg_.partition.total, training, rng);
    return {y, s, e};
  }

  BasicTensor<T> forward(BasicTape<T>& tape, const NetInput<T>& input, bool training, Rng& rng) const {
    return forward_with_taps(tape, input, training, rng).y;
  }

  /// Layers l+1..h applied to lower states.
  BasicTensor<T> run_middle(BasicTape<T>& tape, const BasicTensor<T>& s_in, bool training, Rng& rng) const {
    check_width(s_in, s_width(), "run_middle");
    return run_range(tape, s_in, cfg_.partition.lower, cfg_.partition.higher, training, rng);
  }

  /// Layers h+1..n applied to higher states.
  BasicTensor<T> run_head(BasicTape<T>& tape, const BasicTensor<T>& e_in, bool training, Rng& rng) const {
    check_width(e_in, e_width(), "run_head");
    return run_range(tape, e_in, cfg_.partition.higher, cfg_.partition.total, training, rng);
  }

  /// All parameters, tagged frozen when the net is frozen. Names are prefix + local name.
  std::vector<Parameter<T>> params(const std::string& prefix) const {
    std::vector<Parameter<T>> out;
    const std::string p = prefix.empty() ? "" : prefix + ".";
    if (features_) features_->append_params(out, p + "features");
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].append_params(out, p + "layer" + std::to_string(i + 1));
    for (auto& q : out) q.frozen = frozen_;
    return out;
  }

 private:
  static void check_width(const BasicTensor<T>& x, std::size_t width, const char* op) {
    if (x.rank() != 2 || x.dim(1) != width) {
      throw ShapeError(std::string(op) + " expects width " + std::to_string(width) + ", got " + shape_str(x.shape()));
    }
  }

  // Applies layers with 0-based indices [first, last).
  BasicTensor<T> run_range(BasicTape<T>& tape, BasicTensor<T> x, std::size_t first, std::size_t last, bool training,
                           Rng& rng) const {
    for (std::size_t i = first; i < last; ++i) {
      x = layers_[i](tape, x);
      if (i + 1 < layers_.size()) {
        x = ops::relu(tape, x);
        x = ops::dropout(tape, x, cfg_.dropout, training, rng);
      }
    }
    return x;
  }

  NetConfig cfg_;
  std::optional<FeatureEncoder<T>> features_;
  std::vector<Dense<T>> layers_;
  bool frozen_ = false;
};

using PartitionedNet = BasicPartitionedNet<float>;

}  // namespace td
