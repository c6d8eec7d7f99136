#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fodiff/autodiff.hpp"
#include "fodiff/error.hpp"

namespace fodiff {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  long step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

/// One bias-corrected Adam update of every parameter, in place.
template <class T>
void adam_step(std::vector<ad::Parameter<T>>& params, const ad::GradientSet<T>& grads, AdamState<T>& state,
               double lr, const AdamOptions& opt = {}) {
  if (grads.size() != params.size()) detail::fail(ErrorKind::Contract, "adam_step: gradient set size mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), T(0));
      state.v[i].assign(params[i].size(), T(0));
    }
  }
  if (state.m.size() != params.size()) detail::fail(ErrorKind::Contract, "adam_step: state size mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].value;
    const auto& g = grads[i];
    if (g.size() != w.size() || state.m[i].size() != w.size())
      detail::fail(ErrorKind::Contract, "adam_step: shape mismatch for " + params[i].name);
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
      const double vk = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      w[k] = static_cast<T>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + opt.eps));
    }
  }
}

}  // namespace fodiff
