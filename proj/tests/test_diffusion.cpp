#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "fodiff/diffusion.hpp"

using namespace fodiff;

namespace {

ChannelVolume random_patch(Dims d, int channels, std::mt19937_64& rng, double scale = 1.0) {
  ChannelVolume v = standard_normal_like(d, channels, rng);
  for (double& x : v.values()) x *= scale;
  return v;
}

double rel_error(const ChannelVolume& a, const ChannelVolume& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a.values()[i] - b.values()[i]) * (a.values()[i] - b.values()[i]);
    den += b.values()[i] * b.values()[i];
  }
  return std::sqrt(num / den);
}

// Closed-form f(t)/f(0), evaluated independently of the schedule class.
double cosine_abar(int t, int steps) {
  auto f = [&](int k) {
    const double c = std::cos((static_cast<double>(k) / steps + 0.008) / 1.008 * std::numbers::pi / 2.0);
    return c * c;
  };
  return f(t) / f(0);
}

ConditionSet no_condition() { return {}; }

}  // namespace

TEST(CosineSchedule, Invariants) {
  const auto s = cosine_schedule(250);
  EXPECT_EQ(s.steps(), 250);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_GT(s.alpha_bar(1), 0.99);
  EXPECT_LT(s.alpha_bar(250), 0.01);
  double prod = 1.0;
  for (int t = 1; t <= 250; ++t) {
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LE(s.beta(t), 0.999);
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    prod *= 1.0 - s.beta(t);
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-12);
  }
}

TEST(CosineSchedule, MatchesClosedFormBeforeClipping) {
  const auto s = cosine_schedule(250);
  for (int t = 1; t < 250; ++t) EXPECT_NEAR(s.alpha_bar(t), cosine_abar(t, 250), 1e-12) << t;
  // the final beta is clipped, so the last closed-form value (0) is not reached
  EXPECT_EQ(s.beta(250), 0.999);
}

TEST(CosineSchedule, RejectsTooFewSteps) {
  EXPECT_THROW(cosine_schedule(1), Error);
  const auto s = cosine_schedule(10);
  EXPECT_THROW(s.beta(0), Error);
  EXPECT_THROW(s.beta(11), Error);
}

TEST(QSample, ZeroNoiseScalesSignal) {
  std::mt19937_64 rng(51);
  const auto sched = cosine_schedule(250);
  const auto s0 = random_patch({2, 3, 2}, 5, rng);
  const ChannelVolume zero(s0.dims(), 5);
  const auto st = q_sample(s0, 100, zero, sched);
  for (std::size_t i = 0; i < s0.size(); ++i)
    EXPECT_EQ(st.values()[i], std::sqrt(sched.alpha_bar(100)) * s0.values()[i]);
}

TEST(QSample, FirstStepIsNearIdentity) {
  std::mt19937_64 rng(52);
  const auto sched = cosine_schedule(250);
  const auto s0 = random_patch({2, 2, 2}, 45, rng);
  const auto eps = random_patch({2, 2, 2}, 45, rng);
  EXPECT_LT(rel_error(q_sample(s0, 1, eps, sched), s0), 0.1);
}

TEST(QSample, ShapeMismatchIsAnError) {
  const auto sched = cosine_schedule(10);
  EXPECT_THROW(q_sample(ChannelVolume({2, 2, 2}, 3), 1, ChannelVolume({2, 2, 2}, 4), sched), Error);
}

TEST(QSample, MonteCarloMoments) {
  std::mt19937_64 rng(53);
  const auto sched = cosine_schedule(250);
  const Dims d{2, 2, 1};
  const int t = 120;
  const auto s0 = random_patch(d, 2, rng, 2.0);
  const int n = 10000;
  std::vector<double> sum(s0.size(), 0.0), sq(s0.size(), 0.0);
  for (int k = 0; k < n; ++k) {
    const auto st = q_sample(s0, t, standard_normal_like(d, 2, rng), sched);
    for (std::size_t i = 0; i < st.size(); ++i) {
      sum[i] += st.values()[i];
      sq[i] += st.values()[i] * st.values()[i];
    }
  }
  const double ab = sched.alpha_bar(t);
  const double var_true = 1.0 - ab;
  for (std::size_t i = 0; i < s0.size(); ++i) {
    const double mean = sum[i] / n;
    const double var = sq[i] / n - mean * mean;
    EXPECT_NEAR(mean, std::sqrt(ab) * s0.values()[i], 5.0 * std::sqrt(var_true / n));
    EXPECT_NEAR(var, var_true, 5.0 * var_true * std::sqrt(2.0 / (n - 1)));
  }
}

TEST(QStep, SingleStepEqualsClosedFormAtOne) {
  std::mt19937_64 rng(54);
  const auto sched = cosine_schedule(250);
  const auto s0 = random_patch({2, 2, 2}, 3, rng);
  const auto eps = random_patch({2, 2, 2}, 3, rng);
  EXPECT_EQ(q_step(s0, 1, eps, sched), q_sample(s0, 1, eps, sched));
}

TEST(QStep, TinyBetaIsNearIdentity) {
  std::mt19937_64 rng(55);
  const NoiseSchedule sched(std::vector<double>{1e-14, 1e-14});
  const auto s0 = random_patch({2, 2, 2}, 3, rng);
  const auto eps = random_patch({2, 2, 2}, 3, rng);
  EXPECT_LT(rel_error(q_step(s0, 1, eps, sched), s0), 1e-6);
}

TEST(QStep, CompositionMatchesClosedFormMoments) {
  std::mt19937_64 rng(56);
  const auto sched = cosine_schedule(50);
  const Dims d{4, 4, 4};
  const int channels = 40;
  const double start = 0.7;
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (int rep = 0; rep < 4; ++rep) {
    ChannelVolume s(d, channels, start);
    for (int t = 1; t <= sched.steps(); ++t) s = q_step(s, t, standard_normal_like(d, channels, rng), sched);
    for (double v : s.values()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double ab = sched.alpha_bar(sched.steps());
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  const double nn = static_cast<double>(n);
  EXPECT_NEAR(mean, std::sqrt(ab) * start, 5.0 * std::sqrt((1 - ab) / nn));
  EXPECT_NEAR(var, 1.0 - ab, 5.0 * (1 - ab) * std::sqrt(2.0 / (nn - 1)));
}

TEST(PredictX0, InvertsForwardNoising) {
  std::mt19937_64 rng(57);
  const auto sched = cosine_schedule(250);
  const auto s0 = random_patch({2, 2, 2}, 45, rng);
  const auto eps = random_patch({2, 2, 2}, 45, rng);
  for (int t : {1, 10, 100, 200, 249, 250}) {
    const auto back = predict_x0(q_sample(s0, t, eps, sched), t, eps, sched);
    EXPECT_LE(rel_error(back, s0), 1e-5) << t;
  }
}

TEST(PredictX0, FormulaOracle) {
  std::mt19937_64 rng(58);
  const auto sched = cosine_schedule(250);
  const auto st = random_patch({3, 2, 2}, 4, rng);
  const auto eh = random_patch({3, 2, 2}, 4, rng);
  const int t = 77;
  const auto got = predict_x0(st, t, eh, sched);
  const double ab = sched.alpha_bar(t);
  for (std::size_t i = 0; i < st.size(); ++i)
    EXPECT_NEAR(got.values()[i], (st.values()[i] - std::sqrt(1 - ab) * eh.values()[i]) / std::sqrt(ab), 1e-12);
  const auto zero_eps = predict_x0(st, t, ChannelVolume(st.dims(), 4), sched);
  for (std::size_t i = 0; i < st.size(); ++i)
    EXPECT_NEAR(zero_eps.values()[i], st.values()[i] / std::sqrt(ab), 1e-12);
}

TEST(PosteriorMean, EquivalentToX0Form) {
  std::mt19937_64 rng(59);
  const auto sched = cosine_schedule(250);
  const auto st = random_patch({2, 2, 2}, 6, rng);
  const auto eh = random_patch({2, 2, 2}, 6, rng);
  for (int t : {2, 50, 150, 249}) {
    const auto mu = posterior_mean(st, t, eh, sched);
    const auto x0 = predict_x0(st, t, eh, sched);
    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1);
    const double beta = sched.beta(t), alpha = 1 - beta;
    const double c0 = std::sqrt(ab_prev) * beta / (1 - ab);
    const double ct = std::sqrt(alpha) * (1 - ab_prev) / (1 - ab);
    for (std::size_t i = 0; i < st.size(); ++i)
      EXPECT_NEAR(mu.values()[i], c0 * x0.values()[i] + ct * st.values()[i], 1e-10) << t;
  }
}

TEST(PSampleStep, FinalStepIsDeterministic) {
  std::mt19937_64 rng(60);
  const auto sched = cosine_schedule(250);
  const auto st = random_patch({2, 2, 2}, 3, rng);
  const auto eh = random_patch({2, 2, 2}, 3, rng);
  std::mt19937_64 r1(1), r2(999);
  const auto a = p_sample_step(st, 1, eh, r1, sched);
  EXPECT_EQ(a, p_sample_step(st, 1, eh, r2, sched));
  EXPECT_EQ(a, posterior_mean(st, 1, eh, sched));
  EXPECT_EQ(sched.posterior_variance(1), 0.0);
  EXPECT_THROW(p_sample_step(st, 0, eh, r1, sched), Error);
  EXPECT_THROW(p_sample_step(st, 251, eh, r1, sched), Error);
}

TEST(PSampleStep, NoiseHasPosteriorVariance) {
  const auto sched = cosine_schedule(250);
  const Dims d{8, 8, 8};
  const ChannelVolume st(d, 40, 0.3), eh(d, 40, -0.2);
  std::mt19937_64 rng(61);
  const int t = 90;
  const auto mu = posterior_mean(st, t, eh, sched);
  const auto s = p_sample_step(st, t, eh, rng, sched);
  double sum = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double r = s.values()[i] - mu.values()[i];
    sum += r;
    sq += r * r;
  }
  const double n = static_cast<double>(s.size());
  const double var = sched.posterior_variance(t);
  EXPECT_NEAR(sum / n, 0.0, 5.0 * std::sqrt(var / n));
  EXPECT_NEAR(sq / n, var, 5.0 * var * std::sqrt(2.0 / n));
}

TEST(SampleLoop, OraclePredictorRecoversSignal) {
  std::mt19937_64 rng(62);
  const auto sched = cosine_schedule(250);
  const Dims d{2, 2, 2};
  const auto s0 = random_patch(d, 45, rng);
  const auto eps = random_patch(d, 45, rng);
  // Returns the noise that explains the current state given the known s0.
  auto oracle = [&](const ChannelVolume& st, const ConditionSet&, int t) {
    const double ab = sched.alpha_bar(t);
    return detail::axpby(1.0 / std::sqrt(1 - ab), st, -std::sqrt(ab) / std::sqrt(1 - ab), s0);
  };
  std::mt19937_64 chain(63);
  const auto out = sample_loop_from(oracle, no_condition(), q_sample(s0, 250, eps, sched), chain, sched);
  EXPECT_LE(rel_error(out, s0), 1e-3);
  std::mt19937_64 chain2(64);
  EXPECT_LE(rel_error(sample_loop(oracle, no_condition(), d, 45, chain2, sched), s0), 1e-3);
}

TEST(SampleLoop, SameSeedSameOutput) {
  const auto sched = cosine_schedule(20);
  auto pred = [](const ChannelVolume& st, const ConditionSet&, int t) {
    ChannelVolume e = st;
    for (double& v : e.values()) v = 0.1 * v + 0.01 * t;
    return e;
  };
  std::mt19937_64 a(5), b(5), c(6);
  const auto x = sample_loop(pred, no_condition(), {2, 2, 2}, 3, a, sched);
  EXPECT_EQ(x, sample_loop(pred, no_condition(), {2, 2, 2}, 3, b, sched));
  EXPECT_NE(x, sample_loop(pred, no_condition(), {2, 2, 2}, 3, c, sched));
}

TEST(SampleLoop, ZeroPredictorFollowsMeanAlgebra) {
  // with eps_hat = 0 the chain is s_{t-1} = s_t / sqrt(alpha_t) + sigma_t z;
  // replaying the same draws reproduces it exactly
  const auto sched = cosine_schedule(12);
  auto zero = [](const ChannelVolume& st, const ConditionSet&, int) { return ChannelVolume(st.dims(), st.channels()); };
  std::mt19937_64 a(71);
  const auto got = sample_loop(zero, no_condition(), {2, 1, 1}, 2, a, sched);
  std::mt19937_64 b(71);
  auto s = standard_normal_like({2, 1, 1}, 2, b);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = sched.steps(); t >= 1; --t) {
    for (double& v : s.values()) v /= std::sqrt(sched.alpha(t));
    if (t > 1)
      for (double& v : s.values()) v += std::sqrt(sched.posterior_variance(t)) * normal(b);
  }
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(got.values()[i], s.values()[i], 1e-12);
}

TEST(SampleLoop, WrongShapeIsContractError) {
  const auto sched = cosine_schedule(5);
  auto bad = [](const ChannelVolume& st, const ConditionSet&, int) { return ChannelVolume(st.dims(), 1); };
  std::mt19937_64 rng(1);
  try {
    (void)sample_loop(bad, no_condition(), {2, 2, 2}, 3, rng, sched);
    FAIL() << "expected a contract error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Contract);
  }
}

TEST(TrainingLoss, ExactPredictionGivesZero) {
  std::mt19937_64 rng(72);
  const auto sched = cosine_schedule(250);
  const auto s0 = random_patch({2, 2, 2}, 45, rng);
  // s_t and s0 determine eps, so an oracle can recover it from its inputs
  int seen_t = 0;
  auto oracle = [&](const ChannelVolume& st, const ConditionSet&, int t) {
    seen_t = t;
    const double ab = sched.alpha_bar(t);
    return detail::axpby(1.0 / std::sqrt(1 - ab), st, -std::sqrt(ab) / std::sqrt(1 - ab), s0);
  };
  const auto ls = training_loss(oracle, s0, no_condition(), rng, sched);
  EXPECT_EQ(ls.t, seen_t);
  EXPECT_GE(ls.t, 1);
  EXPECT_LE(ls.t, 250);
  EXPECT_LT(ls.loss, 1e-18);
}

TEST(TrainingLoss, ZeroPredictionGivesUnitLoss) {
  std::mt19937_64 rng(73);
  const auto sched = cosine_schedule(250);
  const ChannelVolume s0({10, 10, 10}, 100);
  auto zero = [](const ChannelVolume& st, const ConditionSet&, int) { return ChannelVolume(st.dims(), st.channels()); };
  const auto ls = training_loss(zero, s0, no_condition(), rng, sched);
  const double n = 1e5;
  EXPECT_NEAR(ls.loss, 1.0, 5.0 * std::sqrt(2.0 / n));
}

TEST(TrainingLoss, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(74);
  const auto sched = cosine_schedule(30);
  const auto s0 = random_patch({2, 2, 1}, 3, rng);
  const auto offset = random_patch({2, 2, 1}, 3, rng);
  auto make_pred = [&](std::size_t bump, double h) {
    return [&, bump, h](const ChannelVolume& st, const ConditionSet&, int) {
      ChannelVolume out = detail::axpby(0.5, st, 1.0, offset);
      if (bump < out.size()) out.values()[bump] += h;
      return out;
    };
  };
  std::mt19937_64 base(75);
  const auto ls = training_loss(make_pred(static_cast<std::size_t>(-1), 0.0), s0, no_condition(), base, sched);
  const double h = 1e-6;
  for (std::size_t i = 0; i < s0.size(); ++i) {
    std::mt19937_64 rp(75), rm(75);
    const double lp = training_loss(make_pred(i, h), s0, no_condition(), rp, sched).loss;
    const double lm = training_loss(make_pred(i, -h), s0, no_condition(), rm, sched).loss;
    EXPECT_NEAR(ls.grad_eps_hat[i], (lp - lm) / (2 * h), 1e-7);
  }
}

TEST(TrainingLoss, ChannelPermutationInvariance) {
  std::mt19937_64 rng(76);
  const auto sched = cosine_schedule(30);
  const auto s0 = random_patch({2, 2, 2}, 4, rng);
  auto pred = [](const ChannelVolume& st, const ConditionSet&, int) { return detail::axpby(0.3, st, 0.0, st); };
  std::mt19937_64 a(77);
  const auto ls = training_loss(pred, s0, no_condition(), a, sched);
  // reverse channel order in both eps and eps_hat
  auto permute = [](const ChannelVolume& v) {
    ChannelVolume out(v.dims(), v.channels());
    for (int c = 0; c < v.channels(); ++c)
      for (int z = 0; z < v.dims().z; ++z)
        for (int y = 0; y < v.dims().y; ++y)
          for (int x = 0; x < v.dims().x; ++x) out.at(x, y, z, c) = v.at(x, y, z, v.channels() - 1 - c);
    return out;
  };
  const auto pe = permute(ls.eps), ph = permute(ls.eps_hat);
  double sum = 0.0;
  for (std::size_t i = 0; i < pe.size(); ++i) sum += (ph.values()[i] - pe.values()[i]) * (ph.values()[i] - pe.values()[i]);
  EXPECT_NEAR(sum / static_cast<double>(pe.size()), ls.loss, 1e-14);
}
