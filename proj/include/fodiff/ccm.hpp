#pragma once

// Fourier positional conditioning: every voxel gets sin/cos features of its
// normalized coordinates at log-spaced frequencies omega_l = 2^(l * f_max / L),
// l = 0..L (L + 1 frequencies). Channels are axis-major:
//   [x: sin w0, cos w0, ..., sin wL, cos wL][y: ...][z: ...]
// Coordinates are normalized per axis to [0, 1] over the (cropped) volume
// extent, so a patch reads the same features as the whole volume.

#include <cassert>
#include <cmath>
#include <vector>

#include "fodiff/error.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

struct FrequencyBand {
  int levels = 0;  // L
  double f_max = 1.0;
  std::vector<double> omegas;  // L + 1 values

  int features_per_axis() const noexcept { return 2 * static_cast<int>(omegas.size()); }
  int channels() const noexcept { return 3 * features_per_axis(); }
};

inline FrequencyBand frequencies(int levels, double f_max) {
  if (levels < 0) detail::fail(ErrorKind::InvalidArgument, "frequency level count must be >= 0");
  if (!(f_max > 0.0)) detail::fail(ErrorKind::InvalidArgument, "f_max must be positive");
  FrequencyBand band{levels, f_max, {}};
  if (levels == 0) {
    band.omegas = {1.0};
    return band;
  }
  for (int l = 0; l <= levels; ++l)
    band.omegas.push_back(std::exp2(static_cast<double>(l) * f_max / static_cast<double>(levels)));
  return band;
}

inline std::vector<double> encode_axis(double u, const FrequencyBand& band) {
  assert(u >= 0.0 && u <= 1.0 && "coordinate outside [0, 1]");
  std::vector<double> out;
  out.reserve(band.omegas.size() * 2);
  for (double w : band.omegas) {
    out.push_back(std::sin(w * u));
    out.push_back(std::cos(w * u));
  }
  return out;
}

inline double normalized_coordinate(int i, int extent) {
  return extent > 1 ? static_cast<double>(i) / static_cast<double>(extent - 1) : 0.0;
}

inline ChannelVolume positional_volume(Dims dims, const FrequencyBand& band) {
  ChannelVolume out(dims, band.channels());
  const int per_axis = band.features_per_axis();
  for (int axis = 0; axis < 3; ++axis) {
    std::vector<std::vector<double>> table;
    table.reserve(static_cast<std::size_t>(dims[axis]));
    for (int i = 0; i < dims[axis]; ++i) table.push_back(encode_axis(normalized_coordinate(i, dims[axis]), band));
    for (int f = 0; f < per_axis; ++f) {
      const int c = axis * per_axis + f;
      for (int z = 0; z < dims.z; ++z)
        for (int y = 0; y < dims.y; ++y)
          for (int x = 0; x < dims.x; ++x) {
            const int i = axis == 0 ? x : (axis == 1 ? y : z);
            out.at(x, y, z, c) = table[static_cast<std::size_t>(i)][static_cast<std::size_t>(f)];
          }
    }
  }
  return out;
}

/// Sub-volume of the whole-volume encoding; positions stay global.
inline ChannelVolume positional_patch(const ChannelVolume& positional, const PatchSpec& spec) {
  return extract_patch(positional, spec);
}

}  // namespace fodiff
