#pragma once

// Latitude-longitude quadrature of the SH Gram matrix, shared by the unit
// tests and the acceptance runner.

#include <cmath>
#include <numbers>
#include <vector>

#include "fodiff/sh.hpp"

namespace testing_quad {

enum class PolarWeights {
  MidpointSin,  // dtheta * sin(theta_i)
  Fejer,        // Fejer first rule on the same midpoint nodes
};

/// Polar weights for nodes theta_i = (i + 1/2) pi / n.
inline std::vector<double> polar_weights(int n, PolarWeights kind) {
  std::vector<double> w(static_cast<std::size_t>(n));
  const double pi = std::numbers::pi;
  for (int i = 0; i < n; ++i) {
    const double theta = (i + 0.5) * pi / n;
    if (kind == PolarWeights::MidpointSin) {
      w[i] = (pi / n) * std::sin(theta);
    } else {
      double s = 0.0;
      for (int k = 1; k <= n / 2; ++k) s += std::cos(2.0 * k * theta) / (4.0 * k * k - 1.0);
      w[i] = (2.0 / n) * (1.0 - 2.0 * s);
    }
  }
  return w;
}

/// Gram matrix sum_n w_n Y_i(v_n) Y_j(v_n), row-major K x K.
inline std::vector<double> gram_latlong(int n_theta, int n_phi, int h_max, PolarWeights kind) {
  const int k = fodiff::coeff_count(h_max);
  const auto wt = polar_weights(n_theta, kind);
  const double dphi = 2.0 * std::numbers::pi / n_phi;
  std::vector<double> gram(static_cast<std::size_t>(k) * k, 0.0);
  std::vector<double> row(static_cast<std::size_t>(k));
  for (int i = 0; i < n_theta; ++i) {
    const double theta = (i + 0.5) * std::numbers::pi / n_theta;
    for (int j = 0; j < n_phi; ++j) {
      const double phi = (j + 0.5) * dphi;
      const fodiff::Vec3 v{std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
      fodiff::eval_basis_row(v, h_max, row);
      const double w = wt[i] * dphi;
      for (int a = 0; a < k; ++a)
        for (int b = a; b < k; ++b) gram[a * k + b] += w * row[a] * row[b];
    }
  }
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < a; ++b) gram[a * k + b] = gram[b * k + a];
  return gram;
}

inline double max_identity_error(const std::vector<double>& gram, int k) {
  double m = 0.0;
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) m = std::max(m, std::abs(gram[a * k + b] - (a == b ? 1.0 : 0.0)));
  return m;
}

}  // namespace testing_quad
