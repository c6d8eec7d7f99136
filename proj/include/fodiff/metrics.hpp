#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "fodiff/error.hpp"
#include "fodiff/sh.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

struct AccStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  std::size_t counted = 0;
  std::size_t undefined = 0;
};

/// ACC over every mask voxel where it is defined.
inline AccStats acc_region(const ChannelVolume& pred, const ChannelVolume& truth, const BinaryMask& mask) {
  detail::require_same_dims(pred.dims(), truth.dims(), "acc_region");
  detail::require_same_dims(pred.dims(), mask.dims(), "acc_region");
  if (pred.channels() != truth.channels())
    detail::fail(ErrorKind::InvalidArgument, "acc_region: channel counts differ");
  const Dims d = pred.dims();
  const int channels = pred.channels();
  const std::size_t n = d.voxels();
  std::vector<double> u(channels), v(channels), values;
  AccStats stats;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.values()[i] == 0) continue;
    for (int c = 0; c < channels; ++c) {
      u[c] = pred.values()[c * n + i];
      v[c] = truth.values()[c * n + i];
    }
    if (auto acc = acc_voxel(u, v))
      values.push_back(*acc);
    else
      ++stats.undefined;
  }
  if (values.empty()) detail::fail(ErrorKind::NoValidVoxels, "no masked voxel has a defined ACC");
  double sum = 0.0;
  for (double a : values) sum += a;
  stats.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double a : values) ss += (a - stats.mean) * (a - stats.mean);
  stats.std = std::sqrt(ss / static_cast<double>(values.size()));
  stats.counted = values.size();
  return stats;
}

}  // namespace fodiff
