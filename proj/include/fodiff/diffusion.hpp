#pragma once

// DDPM machinery over ChannelVolume patches: cosine schedule, forward
// noising, fixed-variance posterior sampling and the noise-prediction loss.
// Step indices t run 1..T; alpha_bar(0) = 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "fodiff/error.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  /// Builds a schedule from raw betas (index 0 is step 1).
  explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.size() < 1) detail::fail(ErrorKind::InvalidArgument, "schedule needs at least one step");
    alpha_.resize(beta_.size());
    alpha_bar_.resize(beta_.size());
    double acc = 1.0;
    for (std::size_t i = 0; i < beta_.size(); ++i) {
      if (!(beta_[i] >= 0.0 && beta_[i] < 1.0)) detail::fail(ErrorKind::InvalidArgument, "beta must lie in [0, 1)");
      alpha_[i] = 1.0 - beta_[i];
      acc *= alpha_[i];
      alpha_bar_[i] = acc;
    }
  }

  int steps() const noexcept { return static_cast<int>(beta_.size()); }
  double beta(int t) const { return beta_[checked(t)]; }
  double alpha(int t) const { return alpha_[checked(t)]; }
  /// Cumulative product up to t; alpha_bar(0) = 1.
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[checked(t)]; }
  /// Fixed posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t).
  double posterior_variance(int t) const {
    const std::size_t i = checked(t);
    return beta_[i] * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar_[i]);
  }

  const std::vector<double>& betas() const noexcept { return beta_; }
  const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

 private:
  std::size_t checked(int t) const {
    if (t < 1 || t > steps()) detail::fail(ErrorKind::InvalidArgument, "diffusion step out of range");
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> beta_, alpha_, alpha_bar_;
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

/// Cosine schedule: abar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2),
/// beta_t = 1 - abar(t)/abar(t-1) clipped at 0.999.
inline NoiseSchedule cosine_schedule(int steps) {
  if (steps < 2) detail::fail(ErrorKind::InvalidArgument, "cosine schedule needs T >= 2");
  auto f = [steps](int t) {
    const double c = std::cos((static_cast<double>(t) / steps + kCosineOffset) / (1.0 + kCosineOffset) *
                              std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0);
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    const double ab = f(t) / f0;
    const double ab_prev = f(t - 1) / f0;
    betas[static_cast<std::size_t>(t - 1)] = std::min(1.0 - ab / ab_prev, kMaxBeta);
  }
  return NoiseSchedule(std::move(betas));
}

namespace detail {
inline void require_same_shape(const ChannelVolume& a, const ChannelVolume& b, const char* what) {
  if (!(a.dims() == b.dims()) || a.channels() != b.channels())
    fail(ErrorKind::InvalidArgument, std::string(what) + ": patch shapes differ");
}

/// out = ca * a + cb * b, elementwise.
inline ChannelVolume axpby(double ca, const ChannelVolume& a, double cb, const ChannelVolume& b) {
  ChannelVolume out(a.dims(), a.channels());
  auto o = out.values();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ca * av[i] + cb * bv[i];
  return out;
}
}  // namespace detail

template <class Rng>
ChannelVolume standard_normal_like(Dims dims, int channels, Rng& rng) {
  ChannelVolume out(dims, channels);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : out.values()) v = normal(rng);
  return out;
}

/// Closed-form forward noising sqrt(abar_t) s0 + sqrt(1 - abar_t) eps.
inline ChannelVolume q_sample(const ChannelVolume& s0, int t, const ChannelVolume& eps, const NoiseSchedule& sched) {
  detail::require_same_shape(s0, eps, "q_sample");
  const double ab = sched.alpha_bar(t);
  if (t < 1) detail::fail(ErrorKind::InvalidArgument, "q_sample step must be >= 1");
  return detail::axpby(std::sqrt(ab), s0, std::sqrt(1.0 - ab), eps);
}

/// One Markov step sqrt(1 - beta_t) s_{t-1} + sqrt(beta_t) eps.
inline ChannelVolume q_step(const ChannelVolume& s_prev, int t, const ChannelVolume& eps,
                            const NoiseSchedule& sched) {
  detail::require_same_shape(s_prev, eps, "q_step");
  const double b = sched.beta(t);
  return detail::axpby(std::sqrt(1.0 - b), s_prev, std::sqrt(b), eps);
}

inline ChannelVolume predict_x0(const ChannelVolume& st, int t, const ChannelVolume& eps_hat,
                                const NoiseSchedule& sched) {
  detail::require_same_shape(st, eps_hat, "predict_x0");
  const double ab = sched.alpha_bar(t);
  if (t < 1) detail::fail(ErrorKind::InvalidArgument, "predict_x0 step must be >= 1");
  const double inv = 1.0 / std::sqrt(ab);
  return detail::axpby(inv, st, -std::sqrt(1.0 - ab) * inv, eps_hat);
}

/// (1/sqrt(alpha_t)) (s_t - beta_t / sqrt(1 - abar_t) eps_hat)
inline ChannelVolume posterior_mean(const ChannelVolume& st, int t, const ChannelVolume& eps_hat,
                                    const NoiseSchedule& sched) {
  detail::require_same_shape(st, eps_hat, "posterior_mean");
  const double inv = 1.0 / std::sqrt(sched.alpha(t));
  return detail::axpby(inv, st, -inv * sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t)), eps_hat);
}

/// Reverse step: posterior mean plus sigma_t z, with z = 0 at t = 1.
template <class Rng>
ChannelVolume p_sample_step(const ChannelVolume& st, int t, const ChannelVolume& eps_hat, Rng& rng,
                            const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps()) detail::fail(ErrorKind::InvalidArgument, "p_sample_step: t out of range");
  ChannelVolume mean = posterior_mean(st, t, eps_hat, sched);
  if (t == 1) return mean;
  const double sigma = std::sqrt(sched.posterior_variance(t));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : mean.values()) v += sigma * normal(rng);
  return mean;
}

/// Reverse step through a clamped S_0 estimate: x0 = clamp(predict_x0, +-clip),
/// mean = c0 x0 + ct s_t (the posterior of q(s_{t-1} | s_t, x0)). Without the
/// clamp this equals p_sample_step; with it, a near-zero abar_T cannot blow an
/// eps error up by 1/sqrt(abar_T). clip <= 0 disables the clamp.
template <class Rng>
ChannelVolume p_sample_step_clipped(const ChannelVolume& st, int t, const ChannelVolume& eps_hat, Rng& rng,
                                    const NoiseSchedule& sched, double clip) {
  if (!(clip > 0.0)) return p_sample_step(st, t, eps_hat, rng, sched);
  if (t < 1 || t > sched.steps()) detail::fail(ErrorKind::InvalidArgument, "p_sample_step: t out of range");
  ChannelVolume x0 = predict_x0(st, t, eps_hat, sched);
  for (double& v : x0.values()) v = std::clamp(v, -clip, clip);
  const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t - 1), beta = sched.beta(t);
  const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
  ChannelVolume mean = detail::axpby(c0, x0, ct, st);
  if (t == 1) return mean;
  const double sigma = std::sqrt(sched.posterior_variance(t));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : mean.values()) v += sigma * normal(rng);
  return mean;
}

/// Condition inputs that accompany a noisy patch.
struct ConditionSet {
  ChannelVolume lar_patch;
  ChannelVolume pos_patch;
  ChannelVolume pk_mask_patch;  // one-channel 0/1 window of the WM mask
  BinaryMask wm_mask_full;      // M0 over the whole (cropped) volume
};

/// Noise predictor: (s_t, condition, t) -> eps_hat with the shape of s_t.
using NoisePredictor = std::function<ChannelVolume(const ChannelVolume&, const ConditionSet&, int)>;

/// Reverse chain starting from a given S_T.
template <class Predictor, class Rng>
ChannelVolume sample_loop_from(Predictor&& predictor, const ConditionSet& cond, ChannelVolume s, Rng& rng,
                               const NoiseSchedule& sched, double x0_clip = 0.0) {
  for (int t = sched.steps(); t >= 1; --t) {
    ChannelVolume eps_hat = predictor(s, cond, t);
    if (!(eps_hat.dims() == s.dims()) || eps_hat.channels() != s.channels())
      detail::fail(ErrorKind::Contract, "noise predictor returned a patch of the wrong shape");
    s = p_sample_step_clipped(s, t, eps_hat, rng, sched, x0_clip);
  }
  return s;
}

/// Full reverse chain from S_T ~ N(0, I) down to S_0. `channels` and `dims`
/// give the sample shape; the predictor output must match it.
template <class Predictor, class Rng>
ChannelVolume sample_loop(Predictor&& predictor, const ConditionSet& cond, Dims dims, int channels, Rng& rng,
                          const NoiseSchedule& sched, double x0_clip = 0.0) {
  ChannelVolume s = standard_normal_like(dims, channels, rng);
  return sample_loop_from(predictor, cond, std::move(s), rng, sched, x0_clip);
}

struct LossSample {
  double loss = 0.0;
  int t = 0;
  ChannelVolume eps;
  ChannelVolume eps_hat;
  /// d loss / d eps_hat, for backpropagation into the predictor.
  std::vector<double> grad_eps_hat;
};

/// Draws t ~ U{1..T} and eps ~ N(0, I), noises s0 and scores the prediction
/// with the mean squared error over every voxel and channel.
template <class Predictor, class Rng>
LossSample training_loss(Predictor&& predictor, const ChannelVolume& s0, const ConditionSet& cond, Rng& rng,
                         const NoiseSchedule& sched) {
  std::uniform_int_distribution<int> pick_t(1, sched.steps());
  LossSample out;
  out.t = pick_t(rng);
  out.eps = standard_normal_like(s0.dims(), s0.channels(), rng);
  const ChannelVolume st = q_sample(s0, out.t, out.eps, sched);
  out.eps_hat = predictor(st, cond, out.t);
  detail::require_same_shape(out.eps_hat, out.eps, "training_loss");
  const auto e = out.eps.values();
  const auto p = out.eps_hat.values();
  const double n = static_cast<double>(e.size());
  out.grad_eps_hat.resize(e.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double d = p[i] - e[i];
    sum += d * d;
    out.grad_eps_hat[i] = 2.0 * d / n;
  }
  out.loss = sum / n;
  return out;
}

}  // namespace fodiff
