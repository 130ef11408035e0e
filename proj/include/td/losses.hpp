#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "td/comm.hpp"
#include "td/errors.hpp"
#include "td/ops.hpp"
#include "td/tensor.hpp"

namespace td {

/// Loss weights. `interact`, `mc`, `sc` weight the talking-model terms;
/// the remaining fields belong to the one-way baselines.
struct LossWeights {
  double interact = 1.0;  // w1
  double sc = 1.0;        // w2, state consistency
  double mc = 1.0;        // w3, message consistency
  double logit = 1.0;
  double feature = 1.0;
  double fitnet = 1.0;
  double hybrid_logit = 1.0;
  double hybrid_feature = 1.0;

  void validate() const {
    const std::pair<const char*, double> all[] = {
        {"interact", interact}, {"sc", sc}, {"mc", mc}, {"logit", logit}, {"feature", feature},
        {"fitnet", fitnet}, {"hybrid_logit", hybrid_logit}, {"hybrid_feature", hybrid_feature}};
    for (auto [name, w] : all) {
      if (!(w >= 0.0)) throw ConfigError(std::string("loss weight '") + name + "' must be non-negative");
    }
  }
};

/// A message tagged with the communication iteration that produced it.
template <typename T>
struct Message {
  BasicTensor<T> value;
  std::size_t iteration = 0;
};

/// Raw per-term values and the weighted contributions that make up the total.
struct LossReport {
  double gt = 0.0;
  std::vector<double> interact;  // one raw value per iteration
  double mc = 0.0;
  double sc = 0.0;
  double distill = 0.0;  // raw baseline term(s), summed

  double weighted_interact = 0.0;
  double weighted_mc = 0.0;
  double weighted_sc = 0.0;
  double weighted_distill = 0.0;
  double total = 0.0;

  double weighted_sum() const { return gt + weighted_interact + weighted_mc + weighted_sc + weighted_distill; }
};

namespace losses {

template <typename T>
BasicTensor<T> l_logit(BasicTape<T>& tape, const BasicTensor<T>& y_g, const BasicTensor<T>& y_h) {
  return ops::mse(tape, y_g, y_h);
}

template <typename T>
BasicTensor<T> l_feature(BasicTape<T>& tape, const BasicTensor<T>& m_g, const BasicTensor<T>& m_h) {
  if (m_g.cols() != m_h.cols()) {
    throw ShapeError("feature loss: message widths differ " + shape_str(m_g.shape()) + " vs " + shape_str(m_h.shape()));
  }
  return ops::mse(tape, m_g, m_h);
}

/// d({s_g; e_g}, D_g({s_h; e_h})): the student decoder reads raw teacher states.
template <typename T>
BasicTensor<T> l_fitnet(BasicTape<T>& tape, const HiddenStates<T>& states_g, const HiddenStates<T>& states_h,
                        const Decoder<T>& d_g, bool training, Rng& rng) {
  auto decoded = d_g(tape, join(tape, states_h), training, rng);
  return ops::mse(tape, join(tape, states_g), join(tape, decoded));
}

/// d({s_g; e_g}, {s_g'; e_g'}) against the student's current-iteration states.
template <typename T>
BasicTensor<T> l_interact(BasicTape<T>& tape, const HiddenStates<T>& current, const HiddenStates<T>& decoded_return) {
  return ops::mse(tape, join(tape, current), join(tape, decoded_return));
}

namespace detail {
template <typename T>
void require_first_iteration(const Message<T>& m, const char* which) {
  if (m.iteration != 0) {
    throw ShapeError(std::string("consistency losses take iteration-0 messages only; ") + which + " is from iteration " +
                     std::to_string(m.iteration));
  }
}
}  // namespace detail

template <typename T>
BasicTensor<T> l_mc(BasicTape<T>& tape, const Message<T>& m_g0, const Message<T>& m_h0) {
  detail::require_first_iteration(m_g0, "m_g");
  detail::require_first_iteration(m_h0, "m_h");
  return ops::mse(tape, m_g0.value, m_h0.value);
}

template <typename T>
struct StateConsistency {
  BasicTensor<T> student_term;  // d({s_g; e_g}, D_g(m_h0))
  BasicTensor<T> teacher_term;  // d({s_h; e_h}, D_h(m_g0))
  BasicTensor<T> total;
};

template <typename T>
StateConsistency<T> l_sc(BasicTape<T>& tape, const HiddenStates<T>& states_g, const HiddenStates<T>& states_h,
                         const Message<T>& m_g0, const Message<T>& m_h0, const Decoder<T>& d_g, const Decoder<T>& d_h,
                         bool training, Rng& rng) {
  detail::require_first_iteration(m_g0, "m_g");
  detail::require_first_iteration(m_h0, "m_h");
  auto student = ops::mse(tape, join(tape, states_g), join(tape, d_g(tape, m_h0.value, training, rng)));
  auto teacher = ops::mse(tape, join(tape, states_h), join(tape, d_h(tape, m_g0.value, training, rng)));
  return {student, teacher, ops::add(tape, student, teacher)};
}

/// Accumulates weighted terms into a running total; zero-weight terms are not added at all.
template <typename T>
class Accumulator {
 public:
  explicit Accumulator(BasicTape<T>& tape, const BasicTensor<T>& gt) : tape_(tape), total_(gt) {
    report_.gt = gt.item();
  }

  void add_interact(const BasicTensor<T>& term, double w) {
    report_.interact.push_back(term.item());
    report_.weighted_interact += add(term, w);
  }
  void add_mc(const BasicTensor<T>& term, double w) {
    report_.mc = term.item();
    report_.weighted_mc += add(term, w);
  }
  void add_sc(const BasicTensor<T>& term, double w) {
    report_.sc = term.item();
    report_.weighted_sc += add(term, w);
  }
  void add_distill(const BasicTensor<T>& term, double w) {
    report_.distill += term.item();
    report_.weighted_distill += add(term, w);
  }

  BasicTensor<T> total() const { return total_; }
  LossReport report() const {
    LossReport r = report_;
    r.total = total_.item();
    return r;
  }

 private:
  double add(const BasicTensor<T>& term, double w) {
    if (w < 0.0) throw ConfigError("negative loss weight");
    if (w == 0.0) return 0.0;
    auto scaled = w == 1.0 ? term : ops::scale(tape_, term, T(w));
    total_ = ops::add(tape_, total_, scaled);
    return double(scaled.item());
  }

  BasicTape<T>& tape_;
  BasicTensor<T> total_;
  LossReport report_;
};

/// gt + w1 * sum_i interact_i + w_mc * mc + w_sc * sc.
template <typename T>
std::pair<BasicTensor<T>, LossReport> combined_loss(BasicTape<T>& tape, const BasicTensor<T>& gt,
                                                     const std::vector<BasicTensor<T>>& interact,
                                                     const BasicTensor<T>& mc, const BasicTensor<T>& sc,
                                                     const LossWeights& w) {
  w.validate();
  Accumulator<T> acc(tape, gt);
  acc.add_sc(sc, w.sc);
  acc.add_mc(mc, w.mc);
  for (const auto& term : interact) acc.add_interact(term, w.interact);
  return {acc.total(), acc.report()};
}

}  // namespace losses
}  // namespace td
