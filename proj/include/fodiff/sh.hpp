#pragma once

// Real, symmetric (even-order) spherical harmonics.
//
// Basis convention, used by every coefficient file and channel layout:
//   m = 0 : Y_h^0
//   m > 0 : sqrt(2) * (-1)^m * Re(Y_h^m)
//   m < 0 : sqrt(2) * (-1)^m * Im(Y_h^|m|)
// where Y_h^m = N_h^m P_h^m(cos theta) e^{i m phi} and P_h^m carries the
// Condon-Shortley phase. Coefficients are ordered by h ascending, then m
// ascending from -h to +h, so order h starts at flat index h(h-1)/2.

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fodiff/error.hpp"

namespace fodiff {

using Vec3 = std::array<double, 3>;

inline constexpr int kDefaultHMax = 8;
inline constexpr int kMaxHMax = 16;

struct SHIndex {
  int h = 0;
  int m = 0;

  constexpr bool valid() const noexcept { return h >= 0 && h % 2 == 0 && m >= -h && m <= h; }
  friend constexpr bool operator==(SHIndex, SHIndex) = default;
};

namespace detail {
inline void check_h_max(int h_max) {
  if (h_max < 0 || h_max % 2 != 0 || h_max > kMaxHMax)
    fail(ErrorKind::InvalidArgument,
         "h_max must be even and in [0, 16], got " + std::to_string(h_max));
}
}  // namespace detail

/// Number of coefficients in an even-order basis truncated at h_max.
inline int coeff_count(int h_max) {
  detail::check_h_max(h_max);
  return (h_max + 1) * (h_max + 2) / 2;
}

/// Block length 2h+1 for each even order h = 0, 2, ..., h_max.
inline std::vector<int> order_block_sizes(int h_max) {
  detail::check_h_max(h_max);
  std::vector<int> sizes;
  for (int h = 0; h <= h_max; h += 2) sizes.push_back(2 * h + 1);
  return sizes;
}

/// Flat offset of the first coefficient of order h.
constexpr int order_offset(int h) noexcept { return h * (h - 1) / 2; }

inline int flat_index(SHIndex idx) {
  if (!idx.valid()) detail::fail(ErrorKind::InvalidArgument, "invalid SH index");
  return order_offset(idx.h) + idx.m + idx.h;
}

inline SHIndex sh_index(int k) {
  if (k < 0) detail::fail(ErrorKind::InvalidArgument, "negative SH flat index");
  int h = 0;
  while (order_offset(h + 2) <= k) h += 2;
  return {h, k - order_offset(h) - h};
}

struct SHBasisMatrix {
  std::vector<Vec3> directions;
  int h_max = 0;
  int columns = 0;
  std::vector<double> amplitudes;  // row-major, directions.size() x columns

  std::size_t rows() const noexcept { return directions.size(); }
  double operator()(std::size_t n, std::size_t k) const { return amplitudes[n * columns + k]; }
  std::span<const double> row(std::size_t n) const {
    return {amplitudes.data() + n * columns, static_cast<std::size_t>(columns)};
  }
};

inline constexpr double kUnitTolerance = 1e-9;

inline double norm(const Vec3& v) noexcept { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

inline Vec3 normalized(const Vec3& v) {
  const double n = norm(v);
  if (!(n > 0.0)) detail::fail(ErrorKind::InvalidArgument, "cannot normalize a zero vector");
  return {v[0] / n, v[1] / n, v[2] / n};
}

/// Evaluates all basis functions at one unit direction into `out` (size coeff_count(h_max)).
///
/// The azimuthal factor is built from powers of (x + iy) and the Legendre part
/// from the sin^m-stripped recurrence, so negating the direction flips each
/// intermediate sign exactly and the result is bit-identical for v and -v.
inline void eval_basis_row(const Vec3& v, int h_max, std::span<double> out) {
  const int count = coeff_count(h_max);
  if (static_cast<int>(out.size()) != count)
    detail::fail(ErrorKind::InvalidArgument, "basis row buffer has wrong length");
  if (std::abs(norm(v) - 1.0) > kUnitTolerance)
    detail::fail(ErrorKind::InvalidArgument, "direction is not unit norm");

  const double x = v[0], y = v[1], z = v[2];
  // q[h][m] = P_h^m(z) / (1 - z^2)^{m/2}
  std::array<std::array<double, kMaxHMax + 1>, kMaxHMax + 1> q{};
  for (int m = 0; m <= h_max; ++m) {
    double qmm = 1.0;
    for (int i = 1; i <= m; ++i) qmm *= -(2.0 * i - 1.0);
    q[m][m] = qmm;
    if (m + 1 <= h_max) q[m + 1][m] = z * (2.0 * m + 1.0) * qmm;
    for (int l = m + 2; l <= h_max; ++l)
      q[l][m] = ((2.0 * l - 1.0) * z * q[l - 1][m] - (l + m - 1.0) * q[l - 2][m]) / (l - m);
  }
  // (x + iy)^m = sin^m(theta) e^{i m phi}
  std::array<double, kMaxHMax + 1> re{}, im{};
  re[0] = 1.0;
  im[0] = 0.0;
  for (int m = 1; m <= h_max; ++m) {
    re[m] = re[m - 1] * x - im[m - 1] * y;
    im[m] = re[m - 1] * y + im[m - 1] * x;
  }
  const double sqrt2 = std::numbers::sqrt2;
  for (int h = 0; h <= h_max; h += 2) {
    const int base = order_offset(h) + h;
    // N_h^m = sqrt((2h+1)/(4 pi) * (h-m)!/(h+m)!)
    double ratio = 1.0;
    out[base] = std::sqrt((2.0 * h + 1.0) / (4.0 * std::numbers::pi)) * q[h][0];
    for (int m = 1; m <= h; ++m) {
      ratio /= static_cast<double>(h + m) * static_cast<double>(h - m + 1);
      const double n = std::sqrt((2.0 * h + 1.0) / (4.0 * std::numbers::pi) * ratio);
      const double sign = (m % 2 == 0) ? 1.0 : -1.0;
      out[base + m] = sqrt2 * sign * n * q[h][m] * re[m];
      out[base - m] = sqrt2 * sign * n * q[h][m] * im[m];
    }
  }
}

inline SHBasisMatrix eval_basis(std::span<const Vec3> directions, int h_max) {
  SHBasisMatrix basis;
  basis.h_max = h_max;
  basis.columns = coeff_count(h_max);
  basis.directions.assign(directions.begin(), directions.end());
  basis.amplitudes.resize(directions.size() * basis.columns);
  for (std::size_t n = 0; n < directions.size(); ++n)
    eval_basis_row(directions[n], h_max,
                   {basis.amplitudes.data() + n * basis.columns, static_cast<std::size_t>(basis.columns)});
  return basis;
}

/// FOD amplitude at every basis direction: the linear combination sum_k c_k Y_k(v).
inline std::vector<double> reconstruct_fod(std::span<const double> coeffs, const SHBasisMatrix& basis) {
  if (static_cast<int>(coeffs.size()) != basis.columns)
    detail::fail(ErrorKind::InvalidArgument, "coefficient count does not match basis columns");
  std::vector<double> out(basis.rows(), 0.0);
  for (std::size_t n = 0; n < basis.rows(); ++n) {
    const auto row = basis.row(n);
    double acc = 0.0;
    for (std::size_t k = 0; k < coeffs.size(); ++k) acc += coeffs[k] * row[k];
    out[n] = acc;
  }
  return out;
}

inline constexpr double kAccNormFloor = 1e-8;

/// Angular correlation coefficient: cosine similarity of the coefficient
/// vectors with the order-0 block (flat index 0) removed. Empty when either
/// angular part has norm <= 1e-8.
inline std::optional<double> acc_voxel(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    detail::fail(ErrorKind::InvalidArgument, "ACC arguments differ in length");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t k = 1; k < u.size(); ++k) {
    dot += u[k] * v[k];
    uu += u[k] * u[k];
    vv += v[k] * v[k];
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu <= kAccNormFloor || nv <= kAccNormFloor) return std::nullopt;
  return dot / (nu * nv);
}

/// Points spread quasi-uniformly over the sphere (golden-angle spiral).
inline std::vector<Vec3> fibonacci_sphere(std::size_t n) {
  if (n == 0) detail::fail(ErrorKind::InvalidArgument, "direction count must be positive");
  std::vector<Vec3> dirs;
  dirs.reserve(n);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    dirs.push_back(normalized({r * std::cos(phi), r * std::sin(phi), z}));
  }
  return dirs;
}

/// n directions arranged as n/2 antipodal pairs: first half on the upper
/// hemisphere spiral, second half their negations. n must be even.
inline std::vector<Vec3> antipodal_sphere(std::size_t n) {
  if (n < 2 || n % 2 != 0)
    detail::fail(ErrorKind::InvalidArgument, "antipodal direction count must be even and >= 2");
  const auto full = fibonacci_sphere(n);
  std::vector<Vec3> dirs;
  dirs.reserve(n);
  for (std::size_t i = 0; i < n / 2; ++i) dirs.push_back(full[i]);
  for (std::size_t i = 0; i < n / 2; ++i) dirs.push_back({-full[i][0], -full[i][1], -full[i][2]});
  return dirs;
}

}  // namespace fodiff
