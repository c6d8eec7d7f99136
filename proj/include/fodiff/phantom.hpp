#pragma once

// Synthetic FOD volumes standing in for real subject data.
//
// Brain = ellipsoid centred in the volume. WM = brain voxels inside at least
// one fiber region. A WM voxel's FOD is the mean of exp(kappa((v.d)^2 - 1))
// over the fiber directions d of every region covering it; a brain voxel
// outside WM holds a flat floor plus a weak radial lobe. Both are projected
// onto the SH basis by least squares over a dense direction set. LAR = HAR
// with orders above lar_order zeroed plus Gaussian coefficient noise, kept
// only inside WM.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <vector>

#include "fodiff/error.hpp"
#include "fodiff/sh.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

struct FiberRegion {
  std::vector<Vec3> directions;  // 1 or 2 unit vectors
  Index3 lo{};                   // inclusive voxel corner
  Index3 hi{};                   // exclusive voxel corner
};

struct PhantomSpec {
  Dims dims{24, 24, 24};
  std::vector<FiberRegion> regions;
  double kappa = 15.0;
  int h_max = kDefaultHMax;
  int lar_order = 4;
  double lar_noise = 0.01;
  double brain_radius = 0.47;  // ellipsoid semi-axis as a fraction of each extent
  double floor_level = 0.15;   // flat amplitude outside WM
  double radial_level = 0.1;   // peak of the radial lobe outside WM
  double radial_kappa = 3.0;
  std::uint64_t seed = 0;

  void validate() const {
    auto bad = [](const std::string& m) { detail::fail(ErrorKind::InvalidArgument, m); };
    if (!dims.positive()) bad("phantom dims must be >= 1");
    (void)coeff_count(h_max);
    if (lar_order < 0 || lar_order % 2 != 0 || lar_order > h_max) bad("lar_order must be even and <= h_max");
    if (!(kappa > 0.0) || !(radial_kappa >= 0.0)) bad("kernel sharpness must be positive");
    if (!(lar_noise >= 0.0)) bad("lar_noise must be >= 0");
    if (!(brain_radius > 0.0)) bad("brain_radius must be positive");
    for (const auto& r : regions) {
      if (r.directions.empty() || r.directions.size() > 2) bad("a fiber region carries one or two directions");
      for (const auto& d : r.directions)
        if (std::abs(norm(d) - 1.0) > kUnitTolerance) bad("fiber directions must be unit vectors");
      for (int a = 0; a < 3; ++a)
        if (r.lo[a] < 0 || r.hi[a] > dims[a] || r.lo[a] >= r.hi[a]) bad("fiber region outside the volume");
    }
  }
};

struct Phantom {
  ChannelVolume har;
  ChannelVolume lar;
  BinaryMask wm;
  BinaryMask brain;
};

namespace detail {

/// Rotates `d` by a random angle up to max_deg about a random axis.
template <class Rng>
Vec3 jitter_direction(const Vec3& d, double max_deg, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::Vector3d axis(n(rng), n(rng), n(rng));
  axis.normalize();
  const double angle = max_deg * u(rng) * std::numbers::pi / 180.0;
  const Eigen::Vector3d r = Eigen::AngleAxisd(angle, axis) * Eigen::Vector3d(d[0], d[1], d[2]);
  return normalized({r[0], r[1], r[2]});
}

/// Least-squares projector P with coeffs = P * amplitudes over `dirs`.
inline Eigen::MatrixXd sh_projector(const std::vector<Vec3>& dirs, int h_max) {
  const auto basis = eval_basis(dirs, h_max);
  Eigen::MatrixXd b(static_cast<Eigen::Index>(basis.rows()), static_cast<Eigen::Index>(basis.columns));
  for (std::size_t n = 0; n < basis.rows(); ++n)
    for (int k = 0; k < basis.columns; ++k) b(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) = basis(n, k);
  const Eigen::MatrixXd bt = b.transpose();
  return (bt * b).ldlt().solve(bt);
}

}  // namespace detail

/// Fixed layout of four tracts (two of them crossing) scaled to `dims`, with
/// per-seed jitter of the region corners (up to one voxel) and of the fiber
/// directions (up to 8 degrees).
inline PhantomSpec default_phantom_spec(Dims dims, std::uint64_t seed) {
  PhantomSpec spec;
  spec.dims = dims;
  spec.seed = seed;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> shift(-1, 1);
  const double r = 1.0 / std::sqrt(2.0);
  struct Template {
    std::array<double, 3> lo, hi;
    Vec3 dir;
  };
  const Template templates[] = {
      {{0.25, 0.20, 0.15}, {0.45, 0.80, 0.85}, {0.0, 0.0, 1.0}},
      {{0.20, 0.40, 0.40}, {0.80, 0.60, 0.60}, {1.0, 0.0, 0.0}},
      {{0.55, 0.20, 0.60}, {0.80, 0.80, 0.85}, {0.0, r, r}},
      {{0.55, 0.20, 0.15}, {0.75, 0.80, 0.38}, {0.0, 1.0, 0.0}},
  };
  for (const auto& t : templates) {
    FiberRegion reg;
    for (int a = 0; a < 3; ++a) {
      const int n = dims[a];
      int lo = static_cast<int>(std::lround(t.lo[a] * n)) + shift(rng);
      int hi = static_cast<int>(std::lround(t.hi[a] * n)) + shift(rng);
      lo = std::clamp(lo, 0, n - 1);
      hi = std::clamp(hi, lo + 1, n);
      reg.lo[a] = lo;
      reg.hi[a] = hi;
    }
    reg.directions.push_back(detail::jitter_direction(t.dir, 8.0, rng));
    spec.regions.push_back(std::move(reg));
  }
  return spec;
}

inline Phantom phantom_generate(const PhantomSpec& spec) {
  spec.validate();
  const Dims d = spec.dims;
  const int k = coeff_count(spec.h_max);
  const auto dirs = fibonacci_sphere(2000);
  const Eigen::MatrixXd proj = detail::sh_projector(dirs, spec.h_max);

  Phantom out{ChannelVolume(d, k), ChannelVolume(d, k), BinaryMask(d), BinaryMask(d)};
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.lar_noise);
  const int keep = coeff_count(spec.lar_order);
  Eigen::VectorXd amp(static_cast<Eigen::Index>(dirs.size()));
  std::vector<double> coeffs(static_cast<std::size_t>(k));

  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const Vec3 rel{(x + 0.5 - d.x / 2.0) / (spec.brain_radius * d.x),
                       (y + 0.5 - d.y / 2.0) / (spec.brain_radius * d.y),
                       (z + 0.5 - d.z / 2.0) / (spec.brain_radius * d.z)};
        const double r2 = rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2];
        if (r2 > 1.0) continue;
        out.brain.set(x, y, z, true);

        std::vector<Vec3> fibers;
        for (const auto& reg : spec.regions) {
          if (x < reg.lo[0] || x >= reg.hi[0] || y < reg.lo[1] || y >= reg.hi[1] || z < reg.lo[2] || z >= reg.hi[2])
            continue;
          for (const auto& f : reg.directions) fibers.push_back(f);
        }
        const bool wm = !fibers.empty();
        out.wm.set(x, y, z, wm);

        for (std::size_t n = 0; n < dirs.size(); ++n) {
          const Vec3& v = dirs[n];
          double a = 0.0;
          if (wm) {
            for (const auto& f : fibers) {
              const double c = v[0] * f[0] + v[1] * f[1] + v[2] * f[2];
              a += std::exp(spec.kappa * (c * c - 1.0));
            }
            a /= static_cast<double>(fibers.size());
          } else {
            const double rn = std::sqrt(r2);
            double c = 0.0;
            if (rn > 1e-12) c = (v[0] * rel[0] + v[1] * rel[1] + v[2] * rel[2]) / rn;
            a = spec.floor_level + spec.radial_level * std::exp(spec.radial_kappa * (c * c - 1.0));
          }
          amp[static_cast<Eigen::Index>(n)] = a;
        }
        const Eigen::VectorXd c = proj * amp;
        for (int i = 0; i < k; ++i) coeffs[static_cast<std::size_t>(i)] = c[i];
        out.har.set_voxel(x, y, z, coeffs);

        if (wm) {
          for (int i = 0; i < k; ++i) {
            const double base = i < keep ? coeffs[static_cast<std::size_t>(i)] : 0.0;
            out.lar.at(x, y, z, i) = base + noise(rng);
          }
        }
      }
  return out;
}

}  // namespace fodiff
