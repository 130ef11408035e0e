#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "td/adam.hpp"
#include "td/comm.hpp"
#include "td/dataset.hpp"
#include "td/errors.hpp"
#include "td/losses.hpp"
#include "td/metrics.hpp"
#include "td/nets.hpp"
#include "td/ops.hpp"

namespace td {

enum class Method { Scratch, LD, FD, FitNet, Hybrid, TD };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Scratch: return "scratch";
    case Method::LD: return "LD";
    case Method::FD: return "FD";
    case Method::FitNet: return "FitNet";
    case Method::Hybrid: return "Hybrid";
    case Method::TD: return "TD";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::Scratch, Method::LD, Method::FD, Method::FitNet, Method::Hybrid, Method::TD}) {
    std::string name = method_name(m);
    std::string a = s, b = name;
    for (auto& c : a) c = char(std::tolower(static_cast<unsigned char>(c)));
    for (auto& c : b) c = char(std::tolower(static_cast<unsigned char>(c)));
    if (a == b) return m;
  }
  throw ConfigError("unknown method '" + s + "' (expected scratch, LD, FD, FitNet, Hybrid or TD)");
}

/// Student alone, then channels alone, then joint training.
struct RampUp {
  std::size_t student_steps = 1000;
  std::size_t channel_only_steps = 500;
};

struct TrainConfig {
  Method method = Method::TD;
  std::size_t k = 1;
  bool interaction = true;  // false: the "no interaction" arm (consistency losses only)
  LossWeights weights;
  std::optional<double> noise_sigma;
  std::optional<RampUp> ramp_up;
  std::size_t train_steps = 2000;
  std::size_t batch_size = 128;
  std::uint64_t seed = 1;
  std::size_t eval_every = 200;
  AdamOptions adam;

  void validate() const {
    weights.validate();
    if (noise_sigma && !(*noise_sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
    if (method == Method::TD && k > 3) throw ConfigError("communication iterations k must be at most 3");
    if (ramp_up && ramp_up->student_steps + ramp_up->channel_only_steps > train_steps) {
      throw ConfigError("ramp-up steps exceed train_steps");
    }
  }
};

/// Independent random streams, so that e.g. channel dropout never perturbs
/// the student's dropout masks or the batch order.
struct RngStreams {
  Rng student;
  Rng channel;
  Rng noise;
  Rng batches;

  explicit RngStreams(std::uint64_t seed)
      : student(derive(seed, 1)), channel(derive(seed, 2)), noise(derive(seed, 3)), batches(derive(seed, 4)) {}

  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream)};
    return Rng(seq);
  }
};

/// Per-iteration record of one communication round.
template <typename T>
struct IterationTrace {
  BasicTensor<T> m_g;          // student message sent this round
  BasicTensor<T> s_h_decoded;  // s_h'
  BasicTensor<T> e_h_decoded;  // e_h'
  BasicTensor<T> e_h_interpreted;
  BasicTensor<T> m_h;          // teacher reply
  BasicTensor<T> s_g_decoded;  // s_g'
  BasicTensor<T> e_g_decoded;  // e_g'
  BasicTensor<T> e_g_interpreted;
};

template <typename T>
struct StepTrace {
  std::vector<IterationTrace<T>> iterations;
  std::size_t teacher_interpret_calls = 0;
  std::size_t inputs_consumed = 0;
};

template <typename T>
struct StepOutput {
  BasicTensor<T> total;
  LossReport report;
  StepTrace<T> trace;
};

template <typename T>
BasicTensor<T> ground_truth_loss(BasicTape<T>& tape, const BasicTensor<T>& pred, const Batch<T>& batch) {
  if (!batch.labels.empty()) return ops::softmax_cross_entropy(tape, pred, std::span<const std::size_t>(batch.labels));
  return ops::mse(tape, pred, batch.y);
}

namespace detail {

template <typename T>
void require_frozen_teacher(const BasicPartitionedNet<T>& teacher) {
  if (!teacher.frozen()) throw ShapeError("teacher must be frozen before distillation");
}

template <typename T>
Taps<T> teacher_taps(BasicTape<T>& tape, const BasicPartitionedNet<T>& teacher, const NetInput<T>& x, Rng& rng) {
  auto t = teacher.forward_with_taps(tape, x, /*training=*/false, rng);
  return {ops::detach(t.y), ops::detach(t.s), ops::detach(t.e)};
}

}  // namespace detail

/// Forward pass of one talking-model step. Builds the full loss on `tape`
/// without touching any parameter.
template <typename T>
StepOutput<T> td_forward(BasicTape<T>& tape, const Batch<T>& batch, const BasicPartitionedNet<T>& teacher,
                         const BasicPartitionedNet<T>& student, const BasicChannels<T>& ch, const TrainConfig& cfg,
                         RngStreams& rng, bool training = true) {
  detail::require_frozen_teacher(teacher);
  const auto& w = cfg.weights;
  w.validate();
  StepOutput<T> out;
  out.trace.inputs_consumed = 1;

  auto sg = student.forward_with_taps(tape, batch.x, training, rng.student);
  HiddenStates<T> states_g{sg.s, sg.e};
  Message<T> m_g{ch.E_g()(tape, states_g, training, rng.channel), 0};

  auto th = detail::teacher_taps(tape, teacher, batch.x, rng.channel);
  HiddenStates<T> states_h{th.s, th.e};
  Message<T> m_h{ch.E_h()(tape, states_h, training, rng.channel), 0};

  losses::Accumulator<T> acc(tape, ground_truth_loss(tape, sg.y, batch));
  auto sc = losses::l_sc(tape, states_g, states_h, m_g, m_h, ch.D_g(), ch.D_h(), training, rng.channel);
  acc.add_sc(sc.total, w.sc);
  acc.add_mc(losses::l_mc(tape, m_g, m_h), w.mc);

  if (cfg.interaction) {
    HiddenStates<T> current = states_g;
    for (std::size_t i = 0; i <= cfg.k; ++i) {
      IterationTrace<T> it;
      it.m_g = m_g.value;
      auto decoded_h = ch.D_h()(tape, m_g.value, training, rng.channel);
      BasicTensor<T> to_interpret = decoded_h.s;
      if (cfg.noise_sigma && training) to_interpret = add_noise(tape, decoded_h.s, *cfg.noise_sigma, rng.noise);
      auto e_h_tilde = teacher.run_middle(tape, to_interpret, /*training=*/false, rng.channel);
      ++out.trace.teacher_interpret_calls;
      Message<T> reply{ch.E_h()(tape, HiddenStates<T>{decoded_h.s, e_h_tilde}, training, rng.channel), i + 1};
      auto decoded_g = ch.D_g()(tape, reply.value, training, rng.channel);
      acc.add_interact(losses::l_interact(tape, current, decoded_g), w.interact);
      auto e_g_tilde = student.run_middle(tape, decoded_g.s, training, rng.channel);
      current = HiddenStates<T>{decoded_g.s, e_g_tilde};
      m_g = Message<T>{ch.E_g()(tape, current, training, rng.channel), i + 1};

      it.s_h_decoded = decoded_h.s;
      it.e_h_decoded = decoded_h.e;
      it.e_h_interpreted = e_h_tilde;
      it.m_h = reply.value;
      it.s_g_decoded = decoded_g.s;
      it.e_g_decoded = decoded_g.e;
      it.e_g_interpreted = e_g_tilde;
      out.trace.iterations.push_back(std::move(it));
    }
  }
  out.total = acc.total();
  out.report = acc.report();
  return out;
}

/// Ground-truth loss only; the student trains alone.
template <typename T>
StepOutput<T> scratch_forward(BasicTape<T>& tape, const Batch<T>& batch, const BasicPartitionedNet<T>& student,
                              RngStreams& rng, bool training = true) {
  StepOutput<T> out;
  out.trace.inputs_consumed = 1;
  auto y = student.forward(tape, batch.x, training, rng.student);
  losses::Accumulator<T> acc(tape, ground_truth_loss(tape, y, batch));
  out.total = acc.total();
  out.report = acc.report();
  return out;
}

/// Forward pass of a one-way baseline (or plain training for Method::Scratch).
template <typename T>
StepOutput<T> baseline_forward(BasicTape<T>& tape, const Batch<T>& batch, const BasicPartitionedNet<T>& teacher,
                               const BasicPartitionedNet<T>& student, const BasicChannels<T>& ch,
                               const TrainConfig& cfg, RngStreams& rng, bool training = true) {
  if (cfg.method == Method::TD) throw ShapeError("TD steps cannot run through the baseline path");
  const auto& w = cfg.weights;
  w.validate();
  if (cfg.method == Method::Scratch) return scratch_forward(tape, batch, student, rng, training);
  detail::require_frozen_teacher(teacher);
  StepOutput<T> out;
  out.trace.inputs_consumed = 1;

  auto sg = student.forward_with_taps(tape, batch.x, training, rng.student);
  losses::Accumulator<T> acc(tape, ground_truth_loss(tape, sg.y, batch));
  auto th = detail::teacher_taps(tape, teacher, batch.x, rng.channel);
  HiddenStates<T> states_g{sg.s, sg.e};
  HiddenStates<T> states_h{th.s, th.e};
  auto feature = [&] {
    return losses::l_feature(tape, ch.E_g()(tape, states_g, training, rng.channel),
                             ch.E_h()(tape, states_h, training, rng.channel));
  };
  switch (cfg.method) {
    case Method::LD:
      acc.add_distill(losses::l_logit(tape, sg.y, th.y), w.logit);
      break;
    case Method::FD:
      acc.add_distill(feature(), w.feature);
      break;
    case Method::FitNet:
      if (!ch.fitnet_decoder()) throw ShapeError("FitNet needs a student decoder that reads raw teacher states");
      acc.add_distill(losses::l_fitnet(tape, states_g, states_h, ch.D_g(), training, rng.channel), w.fitnet);
      break;
    case Method::Hybrid:
      acc.add_distill(losses::l_logit(tape, sg.y, th.y), w.hybrid_logit);
      if (w.hybrid_feature > 0.0) acc.add_distill(feature(), w.hybrid_feature);
      break;
    default:
      break;
  }
  out.total = acc.total();
  out.report = acc.report();
  return out;
}

template <typename T>
StepOutput<T> method_forward(BasicTape<T>& tape, const Batch<T>& batch, const BasicPartitionedNet<T>& teacher,
                             const BasicPartitionedNet<T>& student, const BasicChannels<T>& ch, const TrainConfig& cfg,
                             RngStreams& rng) {
  if (cfg.method == Method::TD) return td_forward(tape, batch, teacher, student, ch, cfg, rng);
  return baseline_forward(tape, batch, teacher, student, ch, cfg, rng);
}

/// Backward + one optimizer step over `trainable`. Throws on a non-finite loss.
template <typename T>
void apply_step(BasicTape<T>& tape, StepOutput<T>& out, std::span<const Parameter<T>> trainable, BasicAdam<T>& opt) {
  if (!std::isfinite(out.report.total)) {
    std::string dump = "non-finite loss: gt=" + std::to_string(out.report.gt) + " mc=" + std::to_string(out.report.mc) +
                       " sc=" + std::to_string(out.report.sc) + " distill=" + std::to_string(out.report.distill);
    for (std::size_t i = 0; i < out.report.interact.size(); ++i) {
      dump += " interact[" + std::to_string(i) + "]=" + std::to_string(out.report.interact[i]);
    }
    throw NumericalError(dump);
  }
  zero_grads(trainable);
  if (out.total.requires_grad()) tape.backward(out.total);
  tape.clear();
  opt.step(trainable);
}

/// One full talking-model update: forward, backward, optimizer step on the
/// student body and all four channel modules.
template <typename T>
StepOutput<T> td_step(const Batch<T>& batch, const BasicPartitionedNet<T>& teacher,
                      const BasicPartitionedNet<T>& student, const BasicChannels<T>& ch, const TrainConfig& cfg,
                      RngStreams& rng, BasicAdam<T>& opt) {
  BasicTape<T> tape;
  auto out = td_forward(tape, batch, teacher, student, ch, cfg, rng);
  auto params = student.params("student");
  for (auto& p : ch.params()) params.push_back(p);
  apply_step<T>(tape, out, params, opt);
  return out;
}

template <typename T>
StepOutput<T> baseline_step(const Batch<T>& batch, const BasicPartitionedNet<T>& teacher,
                            const BasicPartitionedNet<T>& student, const BasicChannels<T>& ch, const TrainConfig& cfg,
                            RngStreams& rng, BasicAdam<T>& opt) {
  BasicTape<T> tape;
  auto out = baseline_forward(tape, batch, teacher, student, ch, cfg, rng);
  auto params = student.params("student");
  for (auto& p : ch.params()) params.push_back(p);
  apply_step<T>(tape, out, params, opt);
  return out;
}

/// Eval-mode predictions for a whole dataset, chunked.
inline std::vector<float> predict(const PartitionedNet& net, const Dataset& data, std::size_t chunk = 1024) {
  std::vector<float> out;
  Rng unused(0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) idx.push_back(i);
    auto batch = data.batch<float>(idx);
    auto tape = Tape::inference();
    auto y = net.forward(tape, batch.x, false, unused);
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  return out;
}

/// RMSE for regression data, accuracy for classification data.
inline double evaluate(const PartitionedNet& net, const Dataset& data) {
  if (data.empty()) throw DataError("evaluation split is empty");
  auto preds = predict(net, data);
  if (data.kind == TaskKind::Regression) return rmse(preds, data.targets);
  return accuracy(preds, data.classes, data.labels);
}

inline const char* metric_name(const Dataset& data) {
  return data.kind == TaskKind::Regression ? "rmse" : "accuracy";
}

struct MetricRow {
  std::size_t step = 0;
  double wall_ms = 0.0;
  std::string split;  // "train", "eval" or "schedule"
  std::string method;
  std::size_t k = 0;
  LossReport loss;
  std::string metric_name;
  double metric_value = 0.0;
};

struct TrainResult {
  std::vector<MetricRow> history;
  double final_metric = 0.0;
  double best_metric = 0.0;
  std::size_t best_step = 0;
  std::vector<Tensor> best_student;  // parameter values at best_step, in params() order
  double mean_step_ms = 0.0;
};

enum class Phase { StudentOnly = 1, ChannelsOnly = 2, Joint = 3 };

/// Mini-batch training of `student` (and channels) against a frozen teacher.
///
/// Batches are drawn from per-epoch shuffles of the training split. The eval
/// split is scored every cfg.eval_every steps and after the last step.
/// `teacher` and `ch` may be null for Method::Scratch.
inline TrainResult train(const PartitionedNet* teacher, const PartitionedNet& student, const Channels* ch,
                         const Dataset& train_set, const Dataset& eval_set, const TrainConfig& cfg,
                         const std::function<void(const MetricRow&)>& sink = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("downstream training split is empty");
  if (eval_set.empty()) throw DataError("downstream evaluation split is empty");
  if (cfg.method != Method::Scratch) {
    if (!teacher || !ch) throw ShapeError(std::string(method_name(cfg.method)) + " needs a teacher and channels");
    detail::require_frozen_teacher(*teacher);
  }

  RngStreams rng(cfg.seed);
  Adam opt(cfg.adam);
  const auto student_params = student.params("student");
  const auto channel_params = ch ? ch->params() : std::vector<Parameter<float>>{};
  std::vector<Parameter<float>> joint = student_params;
  joint.insert(joint.end(), channel_params.begin(), channel_params.end());
  const bool lower_is_better = train_set.kind == TaskKind::Regression;

  TrainResult result;
  auto emit = [&](const MetricRow& row) {
    result.history.push_back(row);
    if (sink) sink(row);
  };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::vector<std::size_t> idx;
  auto next_batch = [&] {
    idx.clear();
    for (std::size_t b = 0; b < std::min(cfg.batch_size, train_set.size()); ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng.batches);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    return train_set.batch<float>(idx);
  };

  auto phase_at = [&](std::size_t step) {
    if (!cfg.ramp_up) return Phase::Joint;
    if (step < cfg.ramp_up->student_steps) return Phase::StudentOnly;
    if (step < cfg.ramp_up->student_steps + cfg.ramp_up->channel_only_steps) return Phase::ChannelsOnly;
    return Phase::Joint;
  };

  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };
  double step_ms_total = 0.0;
  bool have_best = false;
  std::optional<Phase> last_phase;

  auto run_eval = [&](std::size_t step) {
    const double value = evaluate(student, eval_set);
    MetricRow row{step, elapsed_ms(), "eval", method_name(cfg.method), cfg.k, {}, metric_name(eval_set), value};
    emit(row);
    if (!have_best || (lower_is_better ? value < result.best_metric : value > result.best_metric)) {
      have_best = true;
      result.best_metric = value;
      result.best_step = step;
      result.best_student.clear();
      for (const auto& p : student_params) result.best_student.push_back(p.value.clone());
    }
    return value;
  };

  for (std::size_t step = 0; step < cfg.train_steps; ++step) {
    const Phase phase = phase_at(step);
    if (cfg.ramp_up && phase != last_phase) {
      emit({step, elapsed_ms(), "schedule", method_name(cfg.method), cfg.k, {}, "phase", double(int(phase))});
    }
    last_phase = phase;

    auto batch = next_batch();
    const auto t0 = std::chrono::steady_clock::now();
    Tape tape;
    auto out = (cfg.method == Method::Scratch || phase == Phase::StudentOnly)
                   ? scratch_forward(tape, batch, student, rng)
                   : method_forward(tape, batch, *teacher, student, *ch, cfg, rng);
    std::span<const Parameter<float>> trainable = joint;
    if (phase == Phase::StudentOnly) trainable = student_params;
    if (phase == Phase::ChannelsOnly) trainable = channel_params;
    apply_step<float>(tape, out, trainable, opt);
    step_ms_total += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    emit({step + 1, elapsed_ms(), "train", method_name(cfg.method), cfg.k, out.report, "", 0.0});
    if ((step + 1) % cfg.eval_every == 0 && step + 1 != cfg.train_steps) run_eval(step + 1);
  }
  result.final_metric = run_eval(cfg.train_steps);
  result.mean_step_ms = cfg.train_steps ? step_ms_total / double(cfg.train_steps) : 0.0;
  return result;
}

}  // namespace td
