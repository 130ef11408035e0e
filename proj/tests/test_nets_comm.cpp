#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "td/comm.hpp"
#include "td/nets.hpp"

using namespace td;

namespace {

Tensor random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> nd(0.f, 1.f);
  Tensor x({n, d});
  for (auto& v : x.data()) v = nd(rng);
  return x;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace

TEST(PartitionedNet, TapsAreTheLayerActivations) {
  Rng rng(1);
  PartitionedNet net(NetConfig::mlp(6, {8, 5}), rng);
  EXPECT_EQ(net.s_width(), 8u);
  EXPECT_EQ(net.e_width(), 5u);
  auto tape = Tape::inference();
  auto x = random_input(4, 6, 2);
  auto taps = net.forward_with_taps(tape, x, false, rng);
  EXPECT_EQ(taps.s.shape(), (Shape{4, 8}));
  EXPECT_EQ(taps.e.shape(), (Shape{4, 5}));
  EXPECT_EQ(taps.y.shape(), (Shape{4, 1}));
  EXPECT_TRUE(same_values(net.run_middle(tape, taps.s, false, rng), taps.e));
  EXPECT_TRUE(same_values(net.run_head(tape, taps.e, false, rng), taps.y));
  // Lower states are post-relu.
  for (float v : taps.s.data()) EXPECT_GE(v, 0.f);
}

TEST(PartitionedNet, DeeperNetsKeepTheHeadAfterLayerH) {
  Rng rng(1);
  PartitionedNet net(NetConfig::mlp(3, {7, 6, 4}), rng);
  EXPECT_EQ(net.partition().total, 4u);
  EXPECT_EQ(net.e_width(), 6u);
  auto tape = Tape::inference();
  auto taps = net.forward_with_taps(tape, random_input(2, 3, 5), false, rng);
  EXPECT_TRUE(same_values(net.run_head(tape, taps.e, false, rng), taps.y));
}

TEST(PartitionedNet, InvalidPartitionAndWidthsAreRejected) {
  Rng rng(1);
  EXPECT_THROW(PartitionedNet(NetConfig::mlp(3, {4}), rng), ConfigError);
  PartitionedNet net(NetConfig::mlp(3, {4, 2}), rng);
  auto tape = Tape::inference();
  EXPECT_THROW(net.forward(tape, random_input(2, 5, 1), false, rng), ShapeError);
  EXPECT_THROW(net.run_middle(tape, random_input(2, 3, 1), false, rng), ShapeError);
}

TEST(PartitionedNet, FreezeStopsGradientsAndNamesParameters) {
  Rng rng(1);
  PartitionedNet net(NetConfig::mlp(3, {4, 2}), rng);
  auto params = net.params("teacher");
  ASSERT_EQ(params.size(), 6u);
  EXPECT_EQ(params[0].name, "teacher.layer1.W");
  EXPECT_EQ(params[5].name, "teacher.layer3.b");
  net.freeze();
  for (const auto& p : net.params("teacher")) {
    EXPECT_TRUE(p.frozen);
    EXPECT_FALSE(p.value.requires_grad());
  }
  Tape tape;
  auto y = net.forward(tape, random_input(2, 3, 1), true, rng);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(tape.size(), 0u);
}

TEST(PartitionedNet, SameSeedSameWeights) {
  Rng a(9), b(9);
  PartitionedNet n1(NetConfig::mlp(3, {4, 2}), a), n2(NetConfig::mlp(3, {4, 2}), b);
  EXPECT_EQ(param_checksum(n1.params("x")), param_checksum(n2.params("x")));
}

TEST(FeatureEncoder, SparseInputsConcatenateFourEmbeddings) {
  Rng rng(3);
  NetConfig cfg;
  cfg.hidden = {16, 8};
  cfg.features = FeatureEncoderConfig{10, 20, 30, 19};
  EXPECT_EQ(cfg.features->width(), 300u);
  PartitionedNet net(cfg, rng);
  SparseFeatures f;
  f.user = {1, 9};
  f.movie = {0, 19};
  f.title = {{1, 2, 3}, {}};
  f.genre = {{0}, {4, 5}};
  auto tape = Tape::inference();
  auto x = net.embed(tape, f);
  EXPECT_EQ(x.shape(), (Shape{2, 300}));
  EXPECT_EQ(net.forward(tape, f, false, rng).shape(), (Shape{2, 1}));
  // Empty title bag contributes zeros.
  for (std::size_t j = 200; j < 250; ++j) EXPECT_EQ(x.at(1, j), 0.f);
}

TEST(Channels, MovieLensWidths) {
  Rng rng(4);
  Channels ch(128, 64, 512, 256, ChannelConfig{}, rng);
  auto tape = Tape::inference();
  HiddenStates<float> g{random_input(3, 128, 1), random_input(3, 64, 2)};
  auto m = ch.E_g()(tape, g, false, rng);
  EXPECT_EQ(m.shape(), (Shape{3, 128}));
  auto back = ch.D_h()(tape, m, false, rng);
  EXPECT_EQ(back.s.shape(), (Shape{3, 512}));
  EXPECT_EQ(back.e.shape(), (Shape{3, 256}));
  HiddenStates<float> h{random_input(3, 512, 3), random_input(3, 256, 4)};
  EXPECT_EQ(ch.E_h()(tape, h, false, rng).shape(), (Shape{3, 128}));
  auto round = ch.D_g()(tape, ch.E_g()(tape, g, false, rng), false, rng);
  EXPECT_EQ(round.s.shape(), g.s.shape());
  EXPECT_EQ(round.e.shape(), g.e.shape());
  EXPECT_THROW(ch.E_g()(tape, h, false, rng), ShapeError);
}

TEST(Channels, DecoderSplitsAtOwnerStateWidth) {
  Rng rng(4);
  Channels ch(4, 2, 512, 256, ChannelConfig{8, 4, 0.0}, rng);
  auto& body = ch.D_h().body();
  for (auto& w : body.second().weight.data()) w = 0.f;
  auto bias = body.second().bias.data();
  for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = float(i + 1);
  auto tape = Tape::inference();
  auto out = ch.D_h()(tape, random_input(2, 4, 1), false, rng);
  EXPECT_EQ(out.s.cols(), 512u);
  EXPECT_EQ(out.s.at(1, 0), 1.f);
  EXPECT_EQ(out.s.at(1, 511), 512.f);
  EXPECT_EQ(out.e.at(0, 0), 513.f);
  EXPECT_EQ(out.e.at(0, 255), 768.f);
}

TEST(Channels, ZeroWeightEncoderCollapsesToAConstant) {
  Rng rng(4);
  Channels ch(3, 2, 4, 3, ChannelConfig{6, 5, 0.0}, rng);
  auto& body = ch.E_g().body();
  for (auto& w : body.first().weight.data()) w = 0.f;
  for (auto& w : body.second().weight.data()) w = 0.f;
  auto tape = Tape::inference();
  HiddenStates<float> g{random_input(4, 3, 1), random_input(4, 2, 2)};
  auto m = ch.E_g()(tape, g, false, rng);
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m.at(i, j), m.at(0, j));
  for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m.at(0, j), body.second().bias[j]);
}

TEST(Channels, TrainableEvenWhenModelsAreFrozen) {
  Rng rng(4);
  PartitionedNet s(NetConfig::mlp(3, {4, 2}), rng), t(NetConfig::mlp(3, {6, 5}), rng);
  s.freeze();
  t.freeze();
  auto ch = Channels::for_models(s, t, ChannelConfig{8, 4, 0.1}, rng);
  const auto params = ch.params();
  ASSERT_EQ(params.size(), 24u);
  EXPECT_EQ(params.front().name, "E_g.dense1.W");
  EXPECT_EQ(params.back().name, "D_h.dense2.b");
  for (const auto& p : params) {
    EXPECT_FALSE(p.frozen);
    EXPECT_TRUE(p.value.requires_grad());
  }
}

TEST(Channels, EvalModeIsDeterministic) {
  Rng rng(4);
  Channels ch(3, 2, 4, 3, ChannelConfig{6, 5, 0.5}, rng);
  HiddenStates<float> g{random_input(4, 3, 1), random_input(4, 2, 2)};
  auto tape = Tape::inference();
  Rng r1(1), r2(2);
  EXPECT_TRUE(same_values(ch.E_g()(tape, g, false, r1), ch.E_g()(tape, g, false, r2)));
  EXPECT_FALSE(same_values(ch.E_g()(tape, g, true, r1), ch.E_g()(tape, g, true, r2)));
}

// d(sum of s_h' weighted)/d(E_g params) through E_g -> D_h, checked against
// central differences in double.
TEST(Channels, GradientReachesTheOtherModelsEncoder) {
  Rng rng(11);
  BasicChannels<double> ch(3, 2, 4, 3, ChannelConfig{6, 5, 0.0}, rng);
  HiddenStates<double> g{tensor_cast<double>(random_input(2, 3, 1)), tensor_cast<double>(random_input(2, 2, 2))};
  auto loss = [&](BasicTape<double>& tape) {
    auto m = ch.E_g()(tape, g, false, rng);
    auto back = ch.D_h()(tape, m, false, rng);
    return ops::mse(tape, back.s, BasicTensor<double>(back.s.shape()));
  };
  BasicTape<double> tape;
  auto l = loss(tape);
  tape.backward(l);
  auto W = ch.params()[0].value;  // E_g.dense1.W
  std::vector<double> analytic(W.grad().begin(), W.grad().end()), numeric(W.numel());
  double norm = 0.0;
  for (double v : analytic) norm += v * v;
  EXPECT_GT(norm, 0.0);
  const double h = 1e-6;
  for (std::size_t i = 0; i < W.numel(); ++i) {
    const double w0 = W[i];
    auto t = BasicTape<double>::inference();
    W[i] = w0 + h;
    const double up = loss(t).item();
    W[i] = w0 - h;
    const double down = loss(t).item();
    W[i] = w0;
    numeric[i] = (up - down) / (2 * h);
  }
  EXPECT_LT(testkit::relative_error(analytic, numeric), 1e-6);
}

TEST(Noise, SigmaZeroIsIdentityAndNegativeIsRejected) {
  Tape tape;
  Rng rng(1);
  auto x = random_input(2, 3, 1);
  EXPECT_TRUE(add_noise(tape, x, 0.0, rng).same_storage(x));
  EXPECT_THROW(add_noise(tape, x, -0.1, rng), ConfigError);
}

TEST(Noise, SeededAndCalibrated) {
  Tape tape;
  Tensor zero({1000, 1000});
  Rng a(5), b(5);
  auto n1 = add_noise(tape, zero, 0.01, a);
  auto n2 = add_noise(tape, zero, 0.01, b);
  EXPECT_TRUE(same_values(n1, n2));
  double sq = 0.0, mean = 0.0;
  for (float v : n1.data()) {
    mean += v;
    sq += double(v) * v;
  }
  mean /= 1e6;
  const double sd = std::sqrt(sq / 1e6 - mean * mean);
  EXPECT_NEAR(sd, 0.01, 0.01 * 0.01);
}
