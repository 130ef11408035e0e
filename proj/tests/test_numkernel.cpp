#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "support/op_checks.hpp"
#include "td/adam.hpp"
#include "td/ops.hpp"

using namespace td;

TEST(GradCheck, EveryOpMatchesCentralDifferences) {
  std::mt19937_64 rng(20240601);
  for (const auto& c : testkit::op_cases()) {
    for (int instance = 0; instance < 20; ++instance) {
      const auto rep = c.run(rng);
      EXPECT_LT(rep.rel_error, 1e-4) << c.name << " instance " << instance << " input " << rep.worst_input;
    }
  }
}

// The float kernels accumulate in float, so they get a looser bound than the
// double instantiation above.
TEST(GradCheck, FloatKernelsStayClose) {
  std::mt19937_64 rng(77);
  for (const auto& c : testkit::op_cases()) {
    for (int instance = 0; instance < 20; ++instance) {
      EXPECT_LT(c.run_f32(rng).rel_error, 1e-3) << c.name << " instance " << instance;
    }
  }
}

TEST(Tensor, RejectsZeroDims) { EXPECT_THROW(Tensor({3, 0}), ShapeError); }

TEST(Tensor, CloneIsIndependent) {
  Tensor a({2}, {1.f, 2.f});
  auto b = a.clone();
  b[0] = 5.f;
  EXPECT_EQ(a[0], 1.f);
  EXPECT_FALSE(a.same_storage(b));
}

TEST(Tape, InferenceTapeRecordsNothing) {
  auto tape = Tape::inference();
  Tensor w({2, 2}, {1, 2, 3, 4}, true);
  Tensor x({1, 2}, {1, 1});
  auto y = ops::matmul(tape, x, w);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Tape, GradientsAccumulateAcrossUses) {
  Tape tape;
  Tensor x({1, 1}, {3.f}, true);
  auto y = ops::add(tape, ops::scale(tape, x, 2.f), ops::scale(tape, x, 5.f));
  tape.backward(y);
  EXPECT_FLOAT_EQ(x.grad()[0], 7.f);
}

TEST(Ops, MseValues) {
  Tape tape;
  EXPECT_FLOAT_EQ(ops::mse(tape, Tensor({1, 1}, std::vector<float>{1.f}), Tensor({1, 1}, std::vector<float>{3.f})).item(), 4.f);
  EXPECT_FLOAT_EQ(ops::mse(tape, Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 2}, {1, 2, 3, 4})).item(), 0.f);
  EXPECT_THROW(ops::mse(tape, Tensor({1, 2}), Tensor({2, 1})), ShapeError);
}

TEST(Ops, DropoutIsIdentityInEvalAndAtRateZero) {
  Tape tape;
  Rng rng(1);
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  EXPECT_TRUE(ops::dropout(tape, x, 0.5, false, rng).same_storage(x));
  EXPECT_TRUE(ops::dropout(tape, x, 0.0, true, rng).same_storage(x));
  EXPECT_THROW(ops::dropout(tape, x, 1.0, true, rng), ConfigError);
}

TEST(Ops, DropoutKeepsExpectation) {
  Tape tape;
  Rng rng(3);
  Tensor x({1000, 100});
  for (auto& v : x.data()) v = 1.f;
  auto y = ops::dropout(tape, x, 0.25, true, rng);
  double mean = 0.0;
  for (float v : y.data()) mean += v;
  mean /= double(y.numel());
  EXPECT_NEAR(mean, 1.0, 0.01);
}

TEST(Ops, LayerNormNormalizesRows) {
  Tape tape;
  Tensor x({1, 4}, {1, 2, 3, 4});
  Tensor g({4}, {1, 1, 1, 1}), b({4});
  auto y = ops::layer_norm(tape, x, g, b);
  double mean = 0, sq = 0;
  for (float v : y.data()) mean += v;
  for (float v : y.data()) sq += v * v;
  EXPECT_NEAR(mean, 0.0, 1e-6);
  EXPECT_NEAR(sq / 4.0, 1.0, 1e-4);
}

TEST(Ops, EmbeddingBagMeanAndEmptyBag) {
  Tape tape;
  Tensor table({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<std::vector<std::size_t>> bags = {{0, 2}, {}};
  auto y = ops::embedding_bag(tape, table, std::span<const std::vector<std::size_t>>(bags));
  EXPECT_FLOAT_EQ(y.at(0, 0), 3.f);
  EXPECT_FLOAT_EQ(y.at(0, 1), 4.f);
  EXPECT_FLOAT_EQ(y.at(1, 0), 0.f);
  std::vector<std::vector<std::size_t>> bad = {{3}};
  EXPECT_THROW(ops::embedding_bag(tape, table, std::span<const std::vector<std::size_t>>(bad)), ShapeError);
}

TEST(Ops, SliceAndConcatRoundTrip) {
  Tape tape;
  Tensor x({2, 5}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto a = ops::slice_cols(tape, x, 0, 2);
  auto b = ops::slice_cols(tape, x, 2, 5);
  auto y = ops::concat(tape, a, b);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_THROW(ops::slice_cols(tape, x, 3, 3), ShapeError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps) = lr * sign(g).
  Tensor w({2}, {1.f, -1.f}, true);
  w.grad()[0] = 0.5f;
  w.grad()[1] = -2.f;
  std::vector<Parameter<float>> params = {{"w", w}};
  Adam opt;
  opt.step(params);
  EXPECT_NEAR(w[0], 1.f - 1e-3f, 1e-7);
  EXPECT_NEAR(w[1], -1.f + 1e-3f, 1e-7);
  EXPECT_EQ(opt.steps(), 1u);
  auto [m, v] = opt.moments("w");
  EXPECT_NEAR(m[0], 0.05f, 1e-7);
  EXPECT_NEAR(v[1], 0.004f, 1e-7);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  Tensor w({1}, {0.f}, true);
  std::vector<Parameter<float>> params = {{"w", w}};
  Adam opt;
  w.grad()[0] = 1.f;
  opt.step(params);
  w.grad()[0] = 3.f;
  opt.step(params);
  const double m = 0.9 * 0.1 + 0.1 * 3.0;
  const double v = 0.999 * 0.001 + 0.001 * 9.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  const double expected = -1e-3 - 1e-3 * mhat / (std::sqrt(vhat) + 1e-8);
  EXPECT_NEAR(w[0], expected, 1e-6);
}

TEST(Adam, SkipsFrozenAndRejectsNaN) {
  Tensor a({1}, {1.f}, true), b({1}, {1.f}, true);
  a.grad()[0] = 1.f;
  b.grad()[0] = 1.f;
  std::vector<Parameter<float>> params = {{"a", a, true}, {"b", b}};
  Adam opt;
  opt.step(params);
  EXPECT_EQ(a[0], 1.f);
  EXPECT_NE(b[0], 1.f);
  b.grad()[0] = std::nanf("");
  try {
    opt.step(params);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
    EXPECT_EQ(e.exit_code(), 4);
  }
}
