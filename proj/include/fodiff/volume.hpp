#pragma once

// Multi-channel 3D volumes, binary masks and the patch plumbing used for
// training-patch extraction and tile-sample-merge inference.
//
// Memory layout is channel-major planes: flat index = ((c*Z + z)*Y + y)*X + x.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fodiff/error.hpp"

namespace fodiff {

struct Dims {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  int operator[](int axis) const noexcept { return axis == 0 ? x : (axis == 1 ? y : z); }
  int& operator[](int axis) noexcept { return axis == 0 ? x : (axis == 1 ? y : z); }
  bool positive() const noexcept { return x >= 1 && y >= 1 && z >= 1; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

using Index3 = std::array<int, 3>;

class ChannelVolume {
 public:
  ChannelVolume() = default;
  ChannelVolume(Dims dims, int channels, double fill = 0.0) : dims_(dims), channels_(channels) {
    if (!dims.positive() || channels < 1)
      detail::fail(ErrorKind::InvalidArgument, "volume dims and channels must be >= 1");
    data_.assign(dims.voxels() * static_cast<std::size_t>(channels), fill);
  }
  ChannelVolume(Dims dims, int channels, std::vector<double> values) : dims_(dims), channels_(channels) {
    if (!dims.positive() || channels < 1)
      detail::fail(ErrorKind::InvalidArgument, "volume dims and channels must be >= 1");
    if (values.size() != dims.voxels() * static_cast<std::size_t>(channels))
      detail::fail(ErrorKind::InvalidArgument, "value count does not match dims x channels");
    for (double v : values)
      if (!std::isfinite(v)) detail::fail(ErrorKind::InvalidArgument, "volume values must be finite");
    data_ = std::move(values);
  }

  const Dims& dims() const noexcept { return dims_; }
  int channels() const noexcept { return channels_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t index(int x, int y, int z, int c) const noexcept {
    return ((static_cast<std::size_t>(c) * dims_.z + z) * dims_.y + y) * dims_.x + x;
  }
  double& at(int x, int y, int z, int c) noexcept { return data_[index(x, y, z, c)]; }
  double at(int x, int y, int z, int c) const noexcept { return data_[index(x, y, z, c)]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  /// All channel values of one voxel.
  std::vector<double> voxel(int x, int y, int z) const {
    std::vector<double> out(static_cast<std::size_t>(channels_));
    for (int c = 0; c < channels_; ++c) out[c] = at(x, y, z, c);
    return out;
  }
  void set_voxel(int x, int y, int z, std::span<const double> v) {
    for (int c = 0; c < channels_; ++c) at(x, y, z, c) = v[c];
  }

  friend bool operator==(const ChannelVolume&, const ChannelVolume&) = default;

 private:
  Dims dims_{};
  int channels_ = 0;
  std::vector<double> data_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  explicit BinaryMask(Dims dims, std::uint8_t fill = 0) : dims_(dims) {
    if (!dims.positive()) detail::fail(ErrorKind::InvalidArgument, "mask dims must be >= 1");
    if (fill > 1) detail::fail(ErrorKind::InvalidArgument, "mask values must be 0 or 1");
    data_.assign(dims.voxels(), fill);
  }
  BinaryMask(Dims dims, std::vector<std::uint8_t> values) : dims_(dims) {
    if (!dims.positive()) detail::fail(ErrorKind::InvalidArgument, "mask dims must be >= 1");
    if (values.size() != dims.voxels())
      detail::fail(ErrorKind::InvalidArgument, "mask value count does not match dims");
    for (auto v : values)
      if (v > 1) detail::fail(ErrorKind::InvalidArgument, "mask values must be 0 or 1");
    data_ = std::move(values);
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t index(int x, int y, int z) const noexcept {
    return (static_cast<std::size_t>(z) * dims_.y + y) * dims_.x + x;
  }
  bool at(int x, int y, int z) const noexcept { return data_[index(x, y, z)] != 0; }
  void set(int x, int y, int z, bool on) noexcept { data_[index(x, y, z)] = on ? 1 : 0; }
  std::span<const std::uint8_t> values() const noexcept { return data_; }
  std::size_t count() const noexcept {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  Dims dims_{};
  std::vector<std::uint8_t> data_;
};

/// Cubic window: origin corner plus edge length.
struct PatchSpec {
  Index3 origin{0, 0, 0};
  int size = 1;

  friend bool operator==(const PatchSpec&, const PatchSpec&) = default;
  friend auto operator<=>(const PatchSpec&, const PatchSpec&) = default;
};

/// Half-open box [lo, hi) per axis.
struct BoundingBox {
  Index3 lo{0, 0, 0};
  Index3 hi{0, 0, 0};

  Dims extent() const noexcept { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

namespace detail {

inline bool spec_in_bounds(const PatchSpec& spec, const Dims& dims) {
  if (spec.size < 1) return false;
  for (int a = 0; a < 3; ++a)
    if (spec.origin[a] < 0 || spec.origin[a] + spec.size > dims[a]) return false;
  return true;
}

inline void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) fail(ErrorKind::InvalidArgument, std::string(what) + ": spatial dims differ");
}

}  // namespace detail

/// Tight box around nonzero mask voxels, grown by `margin` on every side and
/// then expanded (as symmetrically as the volume allows) so each axis spans
/// at least `patch` voxels.
inline BoundingBox mask_bbox(const BinaryMask& mask, int patch, int margin = 0) {
  const Dims d = mask.dims();
  if (patch < 1 || margin < 0) detail::fail(ErrorKind::InvalidArgument, "patch must be >= 1 and margin >= 0");
  Index3 lo{d.x, d.y, d.z}, hi{0, 0, 0};
  bool any = false;
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        if (mask.at(x, y, z)) {
          any = true;
          lo = {std::min(lo[0], x), std::min(lo[1], y), std::min(lo[2], z)};
          hi = {std::max(hi[0], x + 1), std::max(hi[1], y + 1), std::max(hi[2], z + 1)};
        }
  if (!any) detail::fail(ErrorKind::EmptyMask, "mask has no nonzero voxels");
  BoundingBox box;
  for (int a = 0; a < 3; ++a) {
    if (patch > d[a])
      detail::fail(ErrorKind::InvalidArgument, "patch size exceeds volume extent on axis " + std::to_string(a));
    int l = std::max(0, lo[a] - margin);
    int h = std::min(d[a], hi[a] + margin);
    const int deficit = patch - (h - l);
    if (deficit > 0) {
      l -= deficit / 2;
      h += deficit - deficit / 2;
      if (l < 0) { h -= l; l = 0; }
      if (h > d[a]) { l -= h - d[a]; h = d[a]; }
    }
    box.lo[a] = l;
    box.hi[a] = h;
  }
  return box;
}

inline ChannelVolume crop(const ChannelVolume& vol, const BoundingBox& box) {
  const Dims e = box.extent();
  for (int a = 0; a < 3; ++a)
    if (box.lo[a] < 0 || box.hi[a] > vol.dims()[a] || e[a] < 1)
      detail::fail(ErrorKind::InvalidArgument, "bounding box outside volume");
  ChannelVolume out(e, vol.channels());
  for (int c = 0; c < vol.channels(); ++c)
    for (int z = 0; z < e.z; ++z)
      for (int y = 0; y < e.y; ++y) {
        const double* src = &vol.values()[vol.index(box.lo[0], box.lo[1] + y, box.lo[2] + z, c)];
        std::copy(src, src + e.x, &out.values()[out.index(0, y, z, c)]);
      }
  return out;
}

inline BinaryMask crop(const BinaryMask& mask, const BoundingBox& box) {
  const Dims e = box.extent();
  for (int a = 0; a < 3; ++a)
    if (box.lo[a] < 0 || box.hi[a] > mask.dims()[a] || e[a] < 1)
      detail::fail(ErrorKind::InvalidArgument, "bounding box outside mask");
  BinaryMask out(e);
  for (int z = 0; z < e.z; ++z)
    for (int y = 0; y < e.y; ++y)
      for (int x = 0; x < e.x; ++x) out.set(x, y, z, mask.at(box.lo[0] + x, box.lo[1] + y, box.lo[2] + z));
  return out;
}

struct CropResult {
  ChannelVolume volume;
  BoundingBox box;
};

inline CropResult crop_to_mask_bbox(const ChannelVolume& vol, const BinaryMask& mask, int patch, int margin = 0) {
  detail::require_same_dims(vol.dims(), mask.dims(), "crop_to_mask_bbox");
  const BoundingBox box = mask_bbox(mask, patch, margin);
  return {crop(vol, box), box};
}

/// Places `cropped` back at `box` inside a volume of `full` dims filled with `fill`.
inline ChannelVolume restore_from_bbox(const ChannelVolume& cropped, const BoundingBox& box, Dims full,
                                       double fill = 0.0) {
  for (int a = 0; a < 3; ++a)
    if (box.lo[a] < 0 || box.hi[a] > full[a] || box.hi[a] <= box.lo[a])
      detail::fail(ErrorKind::InvalidArgument, "bounding box outside full dims");
  if (!(cropped.dims() == box.extent()))
    detail::fail(ErrorKind::InvalidArgument, "cropped dims do not match bounding box extent");
  ChannelVolume out(full, cropped.channels(), fill);
  const Dims e = box.extent();
  for (int c = 0; c < cropped.channels(); ++c)
    for (int z = 0; z < e.z; ++z)
      for (int y = 0; y < e.y; ++y) {
        const double* src = &cropped.values()[cropped.index(0, y, z, c)];
        std::copy(src, src + e.x, &out.values()[out.index(box.lo[0], box.lo[1] + y, box.lo[2] + z, c)]);
      }
  return out;
}

inline ChannelVolume extract_patch(const ChannelVolume& vol, const PatchSpec& spec) {
  if (!detail::spec_in_bounds(spec, vol.dims()))
    detail::fail(ErrorKind::InvalidArgument, "patch spec out of bounds");
  BoundingBox box{spec.origin, {spec.origin[0] + spec.size, spec.origin[1] + spec.size, spec.origin[2] + spec.size}};
  return crop(vol, box);
}

/// Mask window as a one-channel 0/1 volume.
inline ChannelVolume extract_mask_patch(const BinaryMask& mask, const PatchSpec& spec) {
  if (!detail::spec_in_bounds(spec, mask.dims()))
    detail::fail(ErrorKind::InvalidArgument, "patch spec out of bounds");
  const int s = spec.size;
  ChannelVolume out({s, s, s}, 1);
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        out.at(x, y, z, 0) = mask.at(spec.origin[0] + x, spec.origin[1] + y, spec.origin[2] + z) ? 1.0 : 0.0;
  return out;
}

/// Per-axis window origins 0, d, 2d, ... plus a final clamped origin dim - s.
inline std::vector<int> axis_origins(int dim, int patch, int stride) {
  if (stride < 1) detail::fail(ErrorKind::InvalidArgument, "stride must be >= 1");
  if (patch < 1 || patch > dim) detail::fail(ErrorKind::InvalidArgument, "patch size exceeds volume extent");
  std::vector<int> origins;
  for (int o = 0; o + patch <= dim; o += stride) origins.push_back(o);
  if (origins.back() != dim - patch) origins.push_back(dim - patch);
  return origins;
}

/// Sliding-window tiling covering the whole volume, in lexicographic (z, y, x) order.
inline std::vector<PatchSpec> sliding_positions(Dims dims, int patch, int stride) {
  const auto ox = axis_origins(dims.x, patch, stride);
  const auto oy = axis_origins(dims.y, patch, stride);
  const auto oz = axis_origins(dims.z, patch, stride);
  std::vector<PatchSpec> out;
  out.reserve(ox.size() * oy.size() * oz.size());
  for (int z : oz)
    for (int y : oy)
      for (int x : ox) out.push_back({{x, y, z}, patch});
  return out;
}

inline ChannelVolume center_crop(const ChannelVolume& patch, int target) {
  const Dims d = patch.dims();
  if (d.x != d.y || d.y != d.z) detail::fail(ErrorKind::InvalidArgument, "center_crop expects a cubic patch");
  const int s = d.x;
  if (target < 1 || target > s || (s - target) % 2 != 0)
    detail::fail(ErrorKind::InvalidArgument, "target must be <= patch size with even difference");
  const int off = (s - target) / 2;
  return extract_patch(patch, {{off, off, off}, target});
}

/// Where the center crop of `window` lands in volume coordinates.
inline PatchSpec center_placement(const PatchSpec& window, int target) {
  if (target < 1 || target > window.size || (window.size - target) % 2 != 0)
    detail::fail(ErrorKind::InvalidArgument, "target must be <= patch size with even difference");
  const int off = (window.size - target) / 2;
  return {{window.origin[0] + off, window.origin[1] + off, window.origin[2] + off}, target};
}

/// Averages overlapping patches by hit count. The mean is kept as a running
/// update m += (x - m) / k, which returns x exactly when every contribution
/// equals x. Voxels that no patch covers stay zero.
inline ChannelVolume merge_patches(std::span<const ChannelVolume> patches, std::span<const PatchSpec> placements,
                                   Dims dims) {
  if (patches.size() != placements.size())
    detail::fail(ErrorKind::InvalidArgument, "patch and placement counts differ");
  if (patches.empty()) detail::fail(ErrorKind::InvalidArgument, "nothing to merge");
  const int channels = patches.front().channels();
  ChannelVolume mean(dims, channels);
  std::vector<std::uint32_t> hits(dims.voxels(), 0);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto& p = patches[i];
    const auto& spec = placements[i];
    if (!detail::spec_in_bounds(spec, dims))
      detail::fail(ErrorKind::InvalidArgument, "patch placement outside volume");
    if (p.channels() != channels || !(p.dims() == Dims{spec.size, spec.size, spec.size}))
      detail::fail(ErrorKind::InvalidArgument, "patch shape does not match its placement");
    const int s = spec.size;
    for (int z = 0; z < s; ++z)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const int vx = spec.origin[0] + x, vy = spec.origin[1] + y, vz = spec.origin[2] + z;
          const auto k = ++hits[(static_cast<std::size_t>(vz) * dims.y + vy) * dims.x + vx];
          for (int c = 0; c < channels; ++c) {
            double& m = mean.at(vx, vy, vz, c);
            const double v = p.at(x, y, z, c);
            m = k == 1 ? v : m + (v - m) / static_cast<double>(k);
          }
        }
  }
  return mean;
}

inline ChannelVolume apply_mask(const ChannelVolume& vol, const BinaryMask& mask) {
  detail::require_same_dims(vol.dims(), mask.dims(), "apply_mask");
  ChannelVolume out = vol;
  const std::size_t n = vol.dims().voxels();
  const auto m = mask.values();
  for (int c = 0; c < vol.channels(); ++c) {
    double* plane = out.values().data() + static_cast<std::size_t>(c) * n;
    for (std::size_t i = 0; i < n; ++i)
      if (m[i] == 0) plane[i] = 0.0;
  }
  return out;
}

}  // namespace fodiff
