#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "td/adam.hpp"
#include "td/errors.hpp"
#include "td/nets.hpp"
#include "td/ops.hpp"
#include "td/tensor.hpp"

namespace td {

/// Lower and higher hidden states {s; e} of one model on one batch.
template <typename T>
struct HiddenStates {
  BasicTensor<T> s;
  BasicTensor<T> e;

  std::size_t rows() const { return s.rows(); }
  std::size_t width() const { return s.cols() + e.cols(); }
};

/// {s; e}: concatenation along the feature axis, s first.
template <typename T>
BasicTensor<T> join(BasicTape<T>& tape, const HiddenStates<T>& st) {
  return ops::concat(tape, st.s, st.e);
}

/// dense -> relu -> layer_norm -> dropout -> dense
template <typename T>
class DenseReluDense {
 public:
  DenseReluDense(std::size_t in, std::size_t hidden, std::size_t out, double dropout, Rng& rng)
      : first_(in, hidden, rng), second_(hidden, out, rng), gamma_({hidden}, true), beta_({hidden}, true),
        dropout_(dropout) {
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("channel dropout must be in [0,1)");
    for (auto& g : gamma_.data()) g = T(1);
  }

  std::size_t in_width() const { return first_.in_width(); }
  std::size_t hidden_width() const { return first_.out_width(); }
  std::size_t out_width() const { return second_.out_width(); }

  BasicTensor<T> operator()(BasicTape<T>& tape, const BasicTensor<T>& x, bool training, Rng& rng) const {
    auto h = ops::relu(tape, first_(tape, x));
    h = ops::layer_norm(tape, h, gamma_, beta_);
    h = ops::dropout(tape, h, dropout_, training, rng);
    return second_(tape, h);
  }

  void append_params(std::vector<Parameter<T>>& out, const std::string& prefix) const {
    first_.append_params(out, prefix + ".dense1");
    out.push_back({prefix + ".ln.gamma", gamma_});
    out.push_back({prefix + ".ln.beta", beta_});
    second_.append_params(out, prefix + ".dense2");
  }

  Dense<T>& first() { return first_; }
  Dense<T>& second() { return second_; }

 private:
  Dense<T> first_, second_;
  BasicTensor<T> gamma_, beta_;
  double dropout_;
};

struct ChannelConfig {
  std::size_t hidden = 256;
  std::size_t message_dim = 128;
  double dropout = 0.1;
};

/// Encoder E: {s; e} -> message space.
template <typename T>
class Encoder {
 public:
  Encoder(std::size_t s_width, std::size_t e_width, const ChannelConfig& cfg, Rng& rng)
      : s_width_(s_width), e_width_(e_width), net_(s_width + e_width, cfg.hidden, cfg.message_dim, cfg.dropout, rng) {}

  std::size_t message_dim() const { return net_.out_width(); }
  std::size_t state_width() const { return s_width_ + e_width_; }

  BasicTensor<T> operator()(BasicTape<T>& tape, const HiddenStates<T>& st, bool training, Rng& rng) const {
    if (st.s.rank() != 2 || st.e.rank() != 2 || st.s.cols() != s_width_ || st.e.cols() != e_width_) {
      throw ShapeError("encoder expects s width " + std::to_string(s_width_) + " and e width " +
                       std::to_string(e_width_) + ", got " + shape_str(st.s.shape()) + " and " +
                       shape_str(st.e.shape()));
    }
    return net_(tape, join(tape, st), training, rng);
  }

  void append_params(std::vector<Parameter<T>>& out, const std::string& prefix) const {
    net_.append_params(out, prefix);
  }
  DenseReluDense<T>& body() { return net_; }

 private:
  std::size_t s_width_, e_width_;
  DenseReluDense<T> net_;
};

/// Decoder D: message (or any fixed-width input) -> {s'; e'} split at the owner's s width.
template <typename T>
class Decoder {
 public:
  Decoder(std::size_t in_width, std::size_t s_width, std::size_t e_width, const ChannelConfig& cfg, Rng& rng)
      : s_width_(s_width), e_width_(e_width), net_(in_width, cfg.hidden, s_width + e_width, cfg.dropout, rng) {}

  std::size_t in_width() const { return net_.in_width(); }
  std::size_t s_width() const { return s_width_; }
  std::size_t e_width() const { return e_width_; }

  HiddenStates<T> operator()(BasicTape<T>& tape, const BasicTensor<T>& m, bool training, Rng& rng) const {
    if (m.rank() != 2 || m.cols() != in_width()) {
      throw ShapeError("decoder expects input width " + std::to_string(in_width()) + ", got " + shape_str(m.shape()));
    }
    return split(tape, net_(tape, m, training, rng));
  }

  HiddenStates<T> split(BasicTape<T>& tape, const BasicTensor<T>& joined) const {
    return {ops::slice_cols(tape, joined, 0, s_width_), ops::slice_cols(tape, joined, s_width_, s_width_ + e_width_)};
  }

  void append_params(std::vector<Parameter<T>>& out, const std::string& prefix) const {
    net_.append_params(out, prefix);
  }
  DenseReluDense<T>& body() { return net_; }

 private:
  std::size_t s_width_, e_width_;
  DenseReluDense<T> net_;
};

/// One model's encoder/decoder pair.
template <typename T>
struct CommChannel {
  Encoder<T> encoder;
  Decoder<T> decoder;
};

/// The four communication modules of a teacher/student pair.
///
/// In FitNet mode the student decoder reads raw teacher states
/// (width s_h + e_h) instead of messages.
template <typename T>
class BasicChannels {
 public:
  BasicChannels(std::size_t s_g, std::size_t e_g, std::size_t s_h, std::size_t e_h, const ChannelConfig& cfg,
                Rng& rng, bool fitnet_decoder = false)
      : cfg_(cfg),
        student_{Encoder<T>(s_g, e_g, cfg, rng), Decoder<T>(fitnet_decoder ? s_h + e_h : cfg.message_dim, s_g, e_g, cfg, rng)},
        teacher_{Encoder<T>(s_h, e_h, cfg, rng), Decoder<T>(cfg.message_dim, s_h, e_h, cfg, rng)},
        fitnet_(fitnet_decoder) {
    if (student_.encoder.message_dim() != teacher_.encoder.message_dim()) {
      throw ShapeError("teacher and student message spaces differ");
    }
  }

  template <typename Net>
  static BasicChannels for_models(const Net& student, const Net& teacher, const ChannelConfig& cfg, Rng& rng,
                                  bool fitnet_decoder = false) {
    return BasicChannels(student.s_width(), student.e_width(), teacher.s_width(), teacher.e_width(), cfg, rng,
                         fitnet_decoder);
  }

  BasicChannels(BasicChannels&&) noexcept = default;
  BasicChannels(const BasicChannels&) = delete;
  BasicChannels& operator=(const BasicChannels&) = delete;

  const ChannelConfig& config() const { return cfg_; }
  bool fitnet_decoder() const { return fitnet_; }
  std::size_t message_dim() const { return cfg_.message_dim; }

  const Encoder<T>& E_g() const { return student_.encoder; }
  const Decoder<T>& D_g() const { return student_.decoder; }
  const Encoder<T>& E_h() const { return teacher_.encoder; }
  const Decoder<T>& D_h() const { return teacher_.decoder; }
  Encoder<T>& E_g() { return student_.encoder; }
  Decoder<T>& D_g() { return student_.decoder; }
  Encoder<T>& E_h() { return teacher_.encoder; }
  Decoder<T>& D_h() { return teacher_.decoder; }

  /// Parameters named "E_g.*", "D_g.*", "E_h.*", "D_h.*". Always trainable.
  std::vector<Parameter<T>> params() const {
    std::vector<Parameter<T>> out;
    student_.encoder.append_params(out, "E_g");
    student_.decoder.append_params(out, "D_g");
    teacher_.encoder.append_params(out, "E_h");
    teacher_.decoder.append_params(out, "D_h");
    return out;
  }

 private:
  ChannelConfig cfg_;
  CommChannel<T> student_;
  CommChannel<T> teacher_;
  bool fitnet_;
};

using Channels = BasicChannels<float>;

/// s' + N(0, sigma^2 I). The noise itself carries no gradient.
template <typename T>
BasicTensor<T> add_noise(BasicTape<T>& tape, const BasicTensor<T>& s_prime, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative, got " + std::to_string(sigma));
  if (sigma == 0.0) return s_prime;
  BasicTensor<T> noise(s_prime.shape());
  std::normal_distribution<double> dist(0.0, sigma);
  for (auto& v : noise.data()) v = T(dist(rng));
  return ops::add(tape, s_prime, noise);
}

}  // namespace td
