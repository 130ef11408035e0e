#include <gtest/gtest.h>

#include <cmath>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/tiny.hpp"
#include "td/engine.hpp"

using namespace td;
using testkit::Mat;

namespace {

TrainConfig td_config(std::size_t k, bool interaction = true) {
  TrainConfig cfg;
  cfg.method = Method::TD;
  cfg.k = k;
  cfg.interaction = interaction;
  cfg.weights.interact = 0.7;
  cfg.weights.sc = 0.4;
  cfg.weights.mc = 1.3;
  return cfg;
}

double oracle_total(const testkit::TinyWorld<float>& w, const Batch<float>& b, const TrainConfig& cfg) {
  testkit::StraightLineTD sl;
  sl.w = testkit::weights_of(w);
  sl.s_g = w.student.s_width();
  sl.s_h = w.teacher.s_width();
  sl.w_interact = cfg.weights.interact;
  sl.w_sc = cfg.weights.sc;
  sl.w_mc = cfg.weights.mc;
  sl.k = cfg.k;
  sl.interaction = cfg.interaction;
  return sl.total(testkit::to_mat(std::get<Tensor>(b.x)), testkit::to_mat(b.y));
}

Batch<double> to_double(const Batch<float>& b) {
  Batch<double> d;
  d.x = tensor_cast<double>(std::get<Tensor>(b.x));
  d.y = tensor_cast<double>(b.y);
  return d;
}

std::vector<double> train_losses(const TrainResult& r) {
  std::vector<double> out;
  for (const auto& row : r.history)
    if (row.split == "train") out.push_back(row.loss.total);
  return out;
}

}  // namespace

TEST(TdForward, MatchesStraightLineOracle) {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    for (std::size_t k = 0; k <= 3; ++k) {
      for (bool interaction : {true, false}) {
        auto w = testkit::make_world<float>(seed);
        auto wd = testkit::to_double(w, seed);
        auto batch = testkit::random_batch<float>(2, 4, seed + 100);
        const auto cfg = td_config(k, interaction);
        const double oracle = oracle_total(w, batch, cfg);
        RngStreams rng(seed);
        BasicTape<double> tape;
        auto out = td_forward<double>(tape, to_double(batch), wd.teacher, wd.student, wd.channels, cfg, rng);
        EXPECT_NEAR(out.total.item(), oracle, 1e-6 * std::max(1.0, std::abs(oracle)))
            << "seed " << seed << " k " << k << " interaction " << interaction;
        // The production (float) path agrees to float precision.
        Tape tf;
        RngStreams rf(seed);
        auto of = td_forward(tf, batch, w.teacher, w.student, w.channels, cfg, rf);
        EXPECT_NEAR(of.total.item(), oracle, 1e-4 * std::max(1.0, std::abs(oracle)));
      }
    }
  }
}

TEST(TdForward, IterationBookkeeping) {
  auto w = testkit::make_world<float>(3);
  auto batch = testkit::random_batch<float>(2, 4, 4);
  for (std::size_t k = 0; k <= 3; ++k) {
    Tape tape;
    RngStreams rng(1);
    auto out = td_forward(tape, batch, w.teacher, w.student, w.channels, td_config(k), rng);
    EXPECT_EQ(out.trace.iterations.size(), k + 1);
    EXPECT_EQ(out.trace.teacher_interpret_calls, k + 1);
    EXPECT_EQ(out.trace.inputs_consumed, 1u);
    EXPECT_EQ(out.report.interact.size(), k + 1);
  }
  Tape tape;
  RngStreams rng(1);
  auto off = td_forward(tape, batch, w.teacher, w.student, w.channels, td_config(0, false), rng);
  EXPECT_TRUE(off.report.interact.empty());
  EXPECT_EQ(off.trace.teacher_interpret_calls, 0u);
  EXPECT_GT(off.report.mc, 0.0);
  EXPECT_GT(off.report.sc, 0.0);
}

TEST(TdForward, ReportSumsToTotal) {
  auto w = testkit::make_world<float>(5);
  auto batch = testkit::random_batch<float>(8, 4, 6);
  Tape tape;
  RngStreams rng(1);
  auto out = td_forward(tape, batch, w.teacher, w.student, w.channels, td_config(2), rng);
  EXPECT_NEAR(out.report.weighted_sum(), out.report.total, 1e-5 * std::abs(out.report.total));
}

TEST(TdForward, RequiresFrozenTeacher) {
  Rng rng(1);
  PartitionedNet t(NetConfig::mlp(4, {8, 6}), rng), s(NetConfig::mlp(4, {5, 3}), rng);
  auto ch = Channels::for_models(s, t, ChannelConfig{8, 4, 0.0}, rng);
  Tape tape;
  RngStreams streams(1);
  EXPECT_THROW(td_forward(tape, testkit::random_batch<float>(2, 4, 1), t, s, ch, td_config(0), streams), ShapeError);
}

// With w_sc = w_mc = 0, D_h learns only through the interaction path: its
// gradient equals finite differences of the interaction-only oracle.
TEST(TdForward, DecoderGradientWithoutConsistencyTermsComesFromInteraction) {
  auto w = testkit::make_world<float>(8);
  auto wd = testkit::to_double(w, 8);
  auto batch = testkit::random_batch<float>(2, 4, 9);
  auto cfg = td_config(1);
  cfg.weights.sc = cfg.weights.mc = 0.0;
  BasicTape<double> tape;
  RngStreams rng(1);
  auto out = td_forward<double>(tape, to_double(batch), wd.teacher, wd.student, wd.channels, cfg, rng);
  tape.backward(out.total);

  testkit::StraightLineTD oracle;
  oracle.w = testkit::weights_of(w);
  oracle.s_g = w.student.s_width();
  oracle.s_h = w.teacher.s_width();
  oracle.w_interact = cfg.weights.interact;
  oracle.w_sc = oracle.w_mc = 0.0;
  oracle.k = 1;
  const Mat X = testkit::to_mat(std::get<Tensor>(batch.x)), Y = testkit::to_mat(batch.y);
  std::vector<double> analytic, numeric;
  for (const auto& p : wd.channels.params()) {
    if (p.name.rfind("D_h.", 0) != 0) continue;
    auto& m = oracle.w.at(p.name);
    for (std::size_t i = 0; i < m.v.size(); ++i) {
      const double v0 = m.v[i], h = 1e-6;
      m.v[i] = v0 + h;
      const double up = oracle.total(X, Y);
      m.v[i] = v0 - h;
      const double down = oracle.total(X, Y);
      m.v[i] = v0;
      numeric.push_back((up - down) / (2 * h));
      analytic.push_back(p.value.grad()[i]);
    }
  }
  EXPECT_LT(testkit::relative_error(analytic, numeric), 1e-5);
}

TEST(BaselineForward, RoutesAndRejectsTd) {
  auto w = testkit::make_world<float>(2);
  auto batch = testkit::random_batch<float>(4, 4, 3);
  TrainConfig cfg;
  cfg.method = Method::TD;
  Tape tape;
  RngStreams rng(1);
  EXPECT_THROW(baseline_forward(tape, batch, w.teacher, w.student, w.channels, cfg, rng), ShapeError);
  for (Method m : {Method::LD, Method::FD, Method::Hybrid}) {
    cfg.method = m;
    Tape t;
    auto out = baseline_forward(t, batch, w.teacher, w.student, w.channels, cfg, rng);
    EXPECT_GT(out.report.distill, 0.0) << method_name(m);
    EXPECT_NEAR(out.report.weighted_sum(), out.report.total, 1e-5 * out.report.total);
  }
  cfg.method = Method::FitNet;
  EXPECT_THROW(baseline_forward(tape, batch, w.teacher, w.student, w.channels, cfg, rng), ShapeError);
}

TEST(BaselineForward, FitNetLossMatchesComposition) {
  testkit::TinyShape shape;
  shape.fitnet = true;
  auto w = testkit::make_world<float>(4, shape);
  auto batch = testkit::random_batch<float>(3, 4, 5);
  TrainConfig cfg;
  cfg.method = Method::FitNet;
  cfg.weights.fitnet = 0.6;
  Tape tape;
  RngStreams rng(1);
  auto out = baseline_forward(tape, batch, w.teacher, w.student, w.channels, cfg, rng);

  namespace sl = testkit::sl;
  const auto wt = testkit::weights_of(w);
  const Mat X = testkit::to_mat(std::get<Tensor>(batch.x)), Y = testkit::to_mat(batch.y);
  const Mat sg = sl::layer(wt, "student", 1, X, true), eg = sl::layer(wt, "student", 2, sg, true);
  const Mat yg = sl::layer(wt, "student", 3, eg, false);
  const Mat sh = sl::layer(wt, "teacher", 1, X, true), eh = sl::layer(wt, "teacher", 2, sh, true);
  const double oracle = sl::mse(yg, Y) + 0.6 * sl::mse(sl::hcat(sg, eg), sl::drd(wt, "D_g", sl::hcat(sh, eh)));
  EXPECT_NEAR(out.total.item(), oracle, 1e-5 * std::max(1.0, oracle));
}

TEST(ApplyStep, NonFiniteLossAbortsWithTermDump) {
  auto w = testkit::make_world<float>(2);
  auto batch = testkit::random_batch<float>(2, 4, 3);
  batch.y[0] = std::numeric_limits<float>::infinity();
  Tape tape;
  RngStreams rng(1);
  Adam opt;
  auto out = td_forward(tape, batch, w.teacher, w.student, w.channels, td_config(0), rng);
  try {
    apply_step<float>(tape, out, w.student.params("student"), opt);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("interact[0]="), std::string::npos);
    EXPECT_EQ(opt.steps(), 0u);
  }
}

// ---------------------------------------------------------------------------
// Training-loop properties on a small synthetic task.

class TrainLoop : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { tasks_ = new data::SyntheticTasks(testkit::small_synthetic()); }
  static void TearDownTestSuite() { delete tasks_; }

  static TrainConfig base(Method m, std::size_t steps = 60) {
    TrainConfig cfg;
    cfg.method = m;
    cfg.train_steps = steps;
    cfg.batch_size = 32;
    cfg.eval_every = 20;
    cfg.seed = 3;
    return cfg;
  }

  static TrainResult run(const TrainConfig& cfg, std::uint64_t init = 11, bool fitnet = false,
                         std::uint64_t* teacher_sum = nullptr, double hidden_dropout = 0.1) {
    testkit::TinyShape shape;
    shape.fitnet = fitnet;
    shape.hidden_dropout = hidden_dropout;
    shape.channel.dropout = 0.1;
    auto w = testkit::make_world<float>(init, shape);
    const auto before = param_checksum(w.teacher.params("t"));
    auto r = train(&w.teacher, w.student, &w.channels, tasks_->downstream_train, tasks_->downstream_eval, cfg);
    const auto after = param_checksum(w.teacher.params("t"));
    EXPECT_EQ(before, after) << method_name(cfg.method) << ": teacher body changed";
    for (const auto& p : w.teacher.params("t")) {
      for (float g : p.value.grad()) EXPECT_EQ(g, 0.f) << p.name;
    }
    if (teacher_sum) *teacher_sum = after;
    return r;
  }

  static data::SyntheticTasks* tasks_;
};

data::SyntheticTasks* TrainLoop::tasks_ = nullptr;

TEST_F(TrainLoop, ZeroWeightTdReproducesScratchBitForBit) {
  auto scratch = run(base(Method::Scratch));
  auto cfg = base(Method::TD);
  cfg.k = 2;
  cfg.weights.interact = cfg.weights.sc = cfg.weights.mc = 0.0;
  auto td = run(cfg);
  EXPECT_EQ(train_losses(scratch), train_losses(td));
  EXPECT_EQ(scratch.final_metric, td.final_metric);
}

TEST_F(TrainLoop, ZeroWeightLdReproducesScratch) {
  auto scratch = run(base(Method::Scratch));
  auto cfg = base(Method::LD);
  cfg.weights.logit = 0.0;
  auto ld = run(cfg);
  EXPECT_EQ(train_losses(scratch), train_losses(ld));
}

TEST_F(TrainLoop, HybridWithoutFeatureTermIsLd) {
  auto cfg = base(Method::LD);
  cfg.weights.logit = 0.8;
  auto ld = run(cfg);
  auto hyb = base(Method::Hybrid);
  hyb.weights.hybrid_logit = 0.8;
  hyb.weights.hybrid_feature = 0.0;
  auto h = run(hyb);
  EXPECT_EQ(train_losses(ld), train_losses(h));
  EXPECT_EQ(ld.final_metric, h.final_metric);
}

TEST_F(TrainLoop, TeacherBodyIsUntouchedByEveryMethod) {
  std::uint64_t reference = 0;
  run(base(Method::Scratch), 11, false, &reference);
  for (Method m : {Method::LD, Method::FD, Method::FitNet, Method::Hybrid, Method::TD}) {
    std::uint64_t sum = 0;
    run(base(m, 20), 11, m == Method::FitNet, &sum);
    EXPECT_EQ(sum, reference) << method_name(m);
  }
}

TEST_F(TrainLoop, SeededRunsAreDeterministic) {
  auto cfg = base(Method::TD);
  cfg.k = 1;
  cfg.noise_sigma = 0.01;
  auto a = run(cfg), b = run(cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss.total, b.history[i].loss.total);
    EXPECT_EQ(a.history[i].metric_value, b.history[i].metric_value);
  }
}

TEST_F(TrainLoop, RampUpScheduleIsLogged) {
  auto cfg = base(Method::TD, 40);
  cfg.ramp_up = RampUp{20, 10};
  auto r = run(cfg);
  std::vector<std::pair<std::size_t, double>> phases;
  for (const auto& row : r.history)
    if (row.split == "schedule") phases.emplace_back(row.step, row.metric_value);
  ASSERT_EQ(phases.size(), 3u);
  EXPECT_EQ(phases[0], (std::pair<std::size_t, double>{0, 1.0}));
  EXPECT_EQ(phases[1], (std::pair<std::size_t, double>{20, 2.0}));
  EXPECT_EQ(phases[2], (std::pair<std::size_t, double>{30, 3.0}));
  cfg.ramp_up = RampUp{30, 20};
  EXPECT_THROW(run(cfg), ConfigError);
}

TEST_F(TrainLoop, ScratchBeatsTheConstantPredictor) {
  const auto tasks = testkit::small_synthetic(7, 2000);
  auto cfg = base(Method::Scratch, 1500);
  testkit::TinyShape shape;
  auto w = testkit::make_world<float>(11, shape);
  auto r = train(nullptr, w.student, nullptr, tasks.downstream_train, tasks.downstream_eval, cfg);
  double mean = 0.0;
  for (float y : tasks.downstream_train.targets) mean += y;
  mean /= double(tasks.downstream_train.targets.size());
  double sq = 0.0;
  for (float y : tasks.downstream_eval.targets) sq += (y - mean) * (y - mean);
  const double constant_rmse = std::sqrt(sq / double(tasks.downstream_eval.targets.size()));
  EXPECT_LT(r.final_metric, constant_rmse);
}

TEST_F(TrainLoop, EmptySplitsAreDataErrors) {
  auto w = testkit::make_world<float>(1);
  Dataset empty;
  EXPECT_THROW(train(&w.teacher, w.student, &w.channels, empty, tasks_->downstream_eval, base(Method::TD)), DataError);
}
