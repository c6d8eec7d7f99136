#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fodiff/config.hpp"
#include "fodiff/error.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

inline constexpr double kStdFloor = 1e-6;

/// Two-pass per-channel mean and population std over the masked voxels of
/// every volume, std floored at kStdFloor.
inline ChannelStats channel_stats(std::span<const ChannelVolume* const> vols, std::span<const BinaryMask* const> masks) {
  if (vols.empty() || vols.size() != masks.size())
    detail::fail(ErrorKind::InvalidArgument, "channel_stats needs one mask per volume");
  const int channels = vols.front()->channels();
  ChannelStats s;
  s.mean.assign(static_cast<std::size_t>(channels), 0.0);
  s.std.assign(static_cast<std::size_t>(channels), 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < vols.size(); ++i) {
    if (vols[i]->channels() != channels) detail::fail(ErrorKind::InvalidArgument, "channel counts differ");
    detail::require_same_dims(vols[i]->dims(), masks[i]->dims(), "channel_stats");
    count += masks[i]->count();
  }
  if (count == 0) detail::fail(ErrorKind::EmptyMask, "no masked voxels to compute statistics over");

  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < vols.size(); ++i) {
      const auto v = vols[i]->values();
      const auto m = masks[i]->values();
      const std::size_t nv = m.size();
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        const double mu = s.mean[static_cast<std::size_t>(c)];
        for (std::size_t j = 0; j < nv; ++j) {
          if (!m[j]) continue;
          const double x = v[static_cast<std::size_t>(c) * nv + j];
          acc += pass == 0 ? x : (x - mu) * (x - mu);
        }
        (pass == 0 ? s.mean : s.std)[static_cast<std::size_t>(c)] += acc;
      }
    }
    auto& dst = pass == 0 ? s.mean : s.std;
    for (auto& d : dst) d /= static_cast<double>(count);
  }
  for (auto& d : s.std) d = std::max(std::sqrt(d), kStdFloor);
  return s;
}

inline ChannelStats channel_stats(const ChannelVolume& vol, const BinaryMask& mask) {
  const ChannelVolume* v[] = {&vol};
  const BinaryMask* m[] = {&mask};
  return channel_stats(v, m);
}

namespace detail {
inline void check_stats(const ChannelStats& stats, int channels) {
  if (stats.empty()) fail(ErrorKind::InvalidArgument, "standardization statistics are missing");
  if (stats.mean.size() != static_cast<std::size_t>(channels) || stats.std.size() != stats.mean.size())
    fail(ErrorKind::InvalidArgument, "standardization statistics do not match the channel count");
}
}  // namespace detail

/// (x - mean_c) / std_c per channel.
inline ChannelVolume standardize(const ChannelVolume& vol, const ChannelStats& stats) {
  detail::check_stats(stats, vol.channels());
  ChannelVolume out = vol;
  const std::size_t nv = vol.dims().voxels();
  auto o = out.values();
  for (std::size_t c = 0; c < stats.mean.size(); ++c)
    for (std::size_t j = 0; j < nv; ++j) o[c * nv + j] = (o[c * nv + j] - stats.mean[c]) / stats.std[c];
  return out;
}

inline ChannelVolume destandardize(const ChannelVolume& vol, const ChannelStats& stats) {
  detail::check_stats(stats, vol.channels());
  ChannelVolume out = vol;
  const std::size_t nv = vol.dims().voxels();
  auto o = out.values();
  for (std::size_t c = 0; c < stats.mean.size(); ++c)
    for (std::size_t j = 0; j < nv; ++j) o[c * nv + j] = o[c * nv + j] * stats.std[c] + stats.mean[c];
  return out;
}

}  // namespace fodiff
