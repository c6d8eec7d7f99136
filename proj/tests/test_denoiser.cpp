#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "fodiff/adam.hpp"
#include "fodiff/ccm.hpp"
#include "fodiff/denoiser.hpp"
#include "denoiser_gradcheck.hpp"

using namespace fodiff;

namespace {

using testing_grad::random_condition;
using testing_grad::tiny_config;

template <class T>
void randomize_gate(Denoiser<T>& net, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 0.3);
  for (auto& p : net.parameters())
    if (p.name.starts_with("sham.gate."))
      for (auto& v : p.value) v = static_cast<T>(normal(rng));
}

template <class T>
Denoiser<T> with_values(const DenoiserConfig& c, const std::vector<ad::Parameter<double>>& src) {
  Denoiser<T> net(c);
  for (std::size_t i = 0; i < src.size(); ++i)
    net.parameters()[i].value.assign(src[i].value.begin(), src[i].value.end());
  return net;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(TimeEmbed, DistinctAcrossSteps) {
  std::set<std::vector<double>> seen;
  for (int t = 1; t <= 250; ++t) {
    const auto e = time_embed(t, 16);
    ASSERT_EQ(e.size(), 16u);
    EXPECT_EQ(e[0], std::sin(static_cast<double>(t)));
    EXPECT_EQ(e[8], std::cos(static_cast<double>(t)));
    seen.insert(e);
  }
  EXPECT_EQ(seen.size(), 250u);
  EXPECT_THROW(time_embed(0, 16), Error);
  EXPECT_THROW(time_embed(1, 7), Error);
}

TEST(DenoiserConfig, Validation) {
  auto c = tiny_config();
  c.channel_widths = {4};
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.patch_edge = 5;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.groups = 3;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_NO_THROW(DenoiserConfig::desk().validate());
  EXPECT_NO_THROW(DenoiserConfig::full_scale().validate());
  EXPECT_EQ(DenoiserConfig::desk().in_channels(), 45 + 45 + 18);
}

TEST(Sham, ShfeWidthsFollowOrderBlocks) {
  Denoiser<double> net(tiny_config());
  EXPECT_EQ(net.shfe_widths(), (std::vector<int>{1, 5, 9, 13, 17}));
  for (int j = 0; j < 5; ++j)
    EXPECT_EQ(net.parameter("sham.shfe" + std::to_string(j) + ".w").shape[0], net.shfe_widths()[j]);
}

TEST(Sham, ZeroGateHalvesPregateExactly) {
  std::mt19937_64 rng(101);
  const auto c = tiny_config();
  Denoiser<double> net(c);
  const auto cond = random_condition(c, rng);
  const auto st = standard_normal_like({4, 4, 4}, 45, rng);
  ad::Tape<double> tape(false);
  const auto in = make_input<double>(st, cond, 17);
  const auto fw = net.forward(tape, in);
  const auto& pre = tape.value(fw.pregate);
  const auto& out = tape.value(fw.output);
  ASSERT_EQ(out.size(), pre.size());
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], 0.5 * pre[i]);
  for (double g : tape.value(fw.gate)) EXPECT_EQ(g, 0.5);
}

TEST(Sham, GateStaysInOpenUnitInterval) {
  std::mt19937_64 rng(102);
  const auto c = tiny_config();
  Denoiser<double> net(c);
  std::normal_distribution<double> fan_in(0.0, 1.0 / std::sqrt(45.0));
  for (auto& p : net.parameters())
    if (p.name.starts_with("sham.gate."))
      for (auto& v : p.value) v = fan_in(rng);
  const auto cond = random_condition(c, rng);
  for (int t : {1, 100, 250}) {
    ad::Tape<double> tape(false);
    const auto fw = net.forward(tape, make_input<double>(standard_normal_like({4, 4, 4}, 45, rng), cond, t));
    for (double g : tape.value(fw.gate)) {
      EXPECT_GT(g, 0.0);
      EXPECT_LT(g, 1.0);
    }
  }
}

// Past |logit| ~ 37 a double sigmoid rounds to 0 or 1, so only the closed
// interval survives arbitrary weights.
TEST(Sham, GateStaysInClosedUnitIntervalForLargeWeights) {
  std::mt19937_64 rng(104);
  const auto c = tiny_config();
  Denoiser<double> net(c);
  std::normal_distribution<double> wild(0.0, 3.0);
  for (auto& p : net.parameters())
    if (p.name.starts_with("sham."))
      for (auto& v : p.value) v = wild(rng);
  const auto cond = random_condition(c, rng);
  for (int t : {1, 100, 250}) {
    ad::Tape<double> tape(false);
    const auto fw = net.forward(tape, make_input<double>(standard_normal_like({4, 4, 4}, 45, rng), cond, t));
    for (double g : tape.value(fw.gate)) {
      EXPECT_GE(g, 0.0);
      EXPECT_LE(g, 1.0);
      EXPECT_FALSE(std::isnan(g));
    }
  }
}

TEST(Sham, SpatiallyConstantInputOracle) {
  std::mt19937_64 rng(103);
  auto c = tiny_config();
  Denoiser<double> net(c);
  randomize_gate(net, rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> a(45);
  for (double& v : a) v = normal(rng);
  std::vector<double> pre(45 * 8);
  for (int ch = 0; ch < 45; ++ch)
    for (int p = 0; p < 8; ++p) pre[ch * 8 + p] = a[ch];
  ad::Tape<double> tape(false);
  const auto [out, gate] = net.sham(tape, tape.constant({45, 2, 2, 2}, pre));

  // with avg = max = a and shared stages: logits = W (2 shfe(a)) + b
  std::vector<double> feat;
  for (int j = 0; j < 5; ++j) {
    const auto& w = net.parameter("sham.shfe" + std::to_string(j) + ".w");
    const auto& b = net.parameter("sham.shfe" + std::to_string(j) + ".b");
    for (int r = 0; r < w.shape[0]; ++r) {
      double s = b.value[r];
      for (int k = 0; k < 45; ++k) s += w.value[r * 45 + k] * a[k];
      feat.push_back(2.0 * std::max(0.0, s));
    }
  }
  ASSERT_EQ(feat.size(), 45u);
  const auto& gw = net.parameter("sham.gate.w");
  const auto& gb = net.parameter("sham.gate.b");
  for (int ch = 0; ch < 45; ++ch) {
    double l = gb.value[ch];
    for (int k = 0; k < 45; ++k) l += gw.value[ch * 45 + k] * feat[k];
    EXPECT_NEAR(tape.value(gate)[ch], sigmoid(l), 1e-12);
    for (int p = 0; p < 8; ++p) EXPECT_NEAR(tape.value(out)[ch * 8 + p], a[ch] * sigmoid(l), 1e-12);
  }
}

TEST(Sham, RejectsWrongChannelCount) {
  Denoiser<double> net(tiny_config());
  ad::Tape<double> tape(false);
  EXPECT_THROW(net.sham(tape, tape.constant({44, 1, 1, 1}, std::vector<double>(44, 1.0))), Error);
}

TEST(Denoiser, OutputShapeAndDeterminism) {
  std::mt19937_64 rng(104);
  const auto c = tiny_config();
  Denoiser<double> a(c), b(c);
  ASSERT_EQ(a.parameters().size(), b.parameters().size());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value);
  const auto cond = random_condition(c, rng);
  const auto st = standard_normal_like({4, 4, 4}, 45, rng);
  const auto ya = a.predict(st, cond, 42);
  EXPECT_EQ(ya.channels(), 45);
  EXPECT_EQ(ya.dims(), (Dims{4, 4, 4}));
  EXPECT_EQ(ya, b.predict(st, cond, 42));
  EXPECT_NE(ya, a.predict(st, cond, 43));
  auto other = c;
  other.seed = 12;
  EXPECT_NE(Denoiser<double>(other).predict(st, cond, 42), ya);
}

TEST(Denoiser, InputShapeContract) {
  std::mt19937_64 rng(105);
  const auto c = tiny_config();
  Denoiser<double> net(c);
  auto cond = random_condition(c, rng);
  cond.lar_patch = ChannelVolume({4, 4, 4}, 44);
  try {
    (void)net.predict(standard_normal_like({4, 4, 4}, 45, rng), cond, 3);
    FAIL() << "expected a contract error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Contract);
  }
}

TEST(Denoiser, FusionPathIsLive) {
  // the anatomy masks only enter through the fusion branch
  std::mt19937_64 rng(106);
  const auto c = tiny_config();
  Denoiser<double> net(c);
  auto cond = random_condition(c, rng);
  const auto st = standard_normal_like({4, 4, 4}, 45, rng);
  const auto base = net.predict(st, cond, 9);
  auto flipped = cond;
  flipped.wm_mask_full = BinaryMask(cond.wm_mask_full.dims(), 1);
  EXPECT_NE(net.predict(st, flipped, 9), base);
  flipped = cond;
  for (double& v : flipped.pk_mask_patch.values()) v = 1.0 - v;
  EXPECT_NE(net.predict(st, flipped, 9), base);
}

TEST(Denoiser, FloatAgreesWithDouble) {
  std::mt19937_64 rng(107);
  const auto c = tiny_config();
  Denoiser<double> d(c);
  randomize_gate(d, rng);
  const auto f = with_values<float>(c, d.parameters());
  const auto cond = random_condition(c, rng);
  const auto st = standard_normal_like({4, 4, 4}, 45, rng);
  const auto yd = d.predict(st, cond, 77);
  const auto yf = f.predict(st, cond, 77);
  double worst = 0.0;
  for (std::size_t i = 0; i < yd.size(); ++i) worst = std::max(worst, std::abs(yd.values()[i] - yf.values()[i]));
  EXPECT_LT(worst, 1e-4);
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
  const auto g = testing_grad::check_denoiser_gradients(108);
  EXPECT_GE(g.checked, 200u);
  for (const char* group : {"enc0", "enc1", "dec0", "fuse", "attn", "head", "sham", "temb"})
    EXPECT_GT(g.per_group.count(group) ? g.per_group.at(group) : 0, 0) << group;
  EXPECT_LT(g.worst, 1e-4) << "worst parameter " << g.worst_name;
}

TEST(Adam, ScalarOracle) {
  std::vector<ad::Parameter<double>> ps{{"w", {1}, {1.0}}};
  AdamState<double> st;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w = 1.0, m = 0.0, v = 0.0;
  for (int k = 1; k <= 5; ++k) {
    const double g = 0.5 * k - 1.2;
    adam_step(ps, ad::GradientSet<double>{{g}}, st, lr);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    w -= lr * (m / (1 - std::pow(b1, k))) / (std::sqrt(v / (1 - std::pow(b2, k))) + eps);
    EXPECT_NEAR(ps[0].value[0], w, 1e-14);
  }
  EXPECT_EQ(st.step, 5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<ad::Parameter<double>> ps{{"w", {2}, {0.0, 0.0}}};
  AdamState<double> st;
  adam_step(ps, ad::GradientSet<double>{{3.0, -0.01}}, st, 0.01);
  EXPECT_NEAR(ps[0].value[0], -0.01, 1e-9);
  EXPECT_NEAR(ps[0].value[1], 0.01, 1e-6);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<ad::Parameter<double>> ps{{"w", {3}, {0.5, -2.0, 7.0}}};
  AdamState<double> st;
  for (int k = 0; k < 3; ++k) adam_step(ps, ad::GradientSet<double>{{0.0, 0.0, 0.0}}, st, 0.1);
  EXPECT_EQ(ps[0].value, (std::vector<double>{0.5, -2.0, 7.0}));
}

TEST(Adam, ShapeMismatchIsContractError) {
  std::vector<ad::Parameter<double>> ps{{"w", {2}, {0.0, 0.0}}};
  AdamState<double> st;
  EXPECT_THROW(adam_step(ps, ad::GradientSet<double>{{1.0}}, st, 0.1), Error);
  EXPECT_THROW(adam_step(ps, ad::GradientSet<double>{}, st, 0.1), Error);
}

TEST(Denoiser, TrainingStepReducesLossOnFixedBatch) {
  std::mt19937_64 rng(109);
  const auto c = tiny_config();
  Denoiser<double> net(c);
  const auto cond = random_condition(c, rng);
  const auto st = standard_normal_like({4, 4, 4}, 45, rng);
  const auto target = standard_normal_like({4, 4, 4}, 45, rng);
  const auto in = make_input<double>(st, cond, 50);
  AdamState<double> adam;
  auto loss_and_grad = [&](ad::GradientSet<double>* g) {
    ad::Tape<double> tape(g != nullptr);
    const auto fw = net.forward(tape, in);
    const auto& y = tape.value(fw.output);
    std::vector<double> seed(y.size());
    double l = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = y[i] - target.values()[i];
      l += d * d / y.size();
      seed[i] = 2 * d / y.size();
    }
    if (g) tape.backward(fw.output, seed, *g);
    return l;
  };
  const double before = loss_and_grad(nullptr);
  for (int k = 0; k < 30; ++k) {
    auto g = net.zero_gradients();
    loss_and_grad(&g);
    adam_step(net.parameters(), g, adam, 1e-2);
  }
  EXPECT_LT(loss_and_grad(nullptr), 0.9 * before);
}
