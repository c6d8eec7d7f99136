#pragma once

// FVol binary volume file.
//
//   bytes 0-3   "FVOL"
//   u32 LE      version (1)
//   u32 LE      X, Y, Z, C
//   u32 LE      dtype: 0 = f32 IEEE-754, 1 = u8 mask
//   payload     X*Y*Z*C elements, flat order ((c*Z + z)*Y + y)*X + x, little-endian

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fodiff/error.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

inline constexpr std::array<char, 4> kFVolMagic{'F', 'V', 'O', 'L'};
inline constexpr std::uint32_t kFVolVersion = 1;

enum class FVolType : std::uint32_t { Float32 = 0, Mask8 = 1 };

struct FVolHeader {
  Dims dims{};
  int channels = 0;
  FVolType dtype = FVolType::Float32;

  std::size_t element_size() const noexcept { return dtype == FVolType::Float32 ? 4 : 1; }
  std::size_t payload_bytes() const noexcept { return dims.voxels() * static_cast<std::size_t>(channels) * element_size(); }
};

inline constexpr std::size_t kFVolHeaderBytes = 4 + 4 * 6;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

inline std::vector<std::uint8_t> encode_header(const FVolHeader& h) {
  std::vector<std::uint8_t> out(kFVolMagic.begin(), kFVolMagic.end());
  put_u32(out, kFVolVersion);
  put_u32(out, static_cast<std::uint32_t>(h.dims.x));
  put_u32(out, static_cast<std::uint32_t>(h.dims.y));
  put_u32(out, static_cast<std::uint32_t>(h.dims.z));
  put_u32(out, static_cast<std::uint32_t>(h.channels));
  put_u32(out, static_cast<std::uint32_t>(h.dtype));
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_fvol(const ChannelVolume& vol) {
  FVolHeader h{vol.dims(), vol.channels(), FVolType::Float32};
  auto out = detail::encode_header(h);
  out.reserve(kFVolHeaderBytes + h.payload_bytes());
  for (double v : vol.values()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

inline std::vector<std::uint8_t> encode_fvol(const BinaryMask& mask) {
  FVolHeader h{mask.dims(), 1, FVolType::Mask8};
  auto out = detail::encode_header(h);
  out.insert(out.end(), mask.values().begin(), mask.values().end());
  return out;
}

inline FVolHeader decode_fvol_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kFVolHeaderBytes) detail::fail(ErrorKind::PayloadShort, "file shorter than the FVol header");
  if (!std::equal(kFVolMagic.begin(), kFVolMagic.end(), bytes.begin()))
    detail::fail(ErrorKind::BadMagic, "missing FVOL magic");
  const std::uint8_t* p = bytes.data() + 4;
  if (detail::get_u32(p) != kFVolVersion) detail::fail(ErrorKind::BadVersion, "unsupported FVol version");
  FVolHeader h;
  h.dims = {static_cast<int>(detail::get_u32(p + 4)), static_cast<int>(detail::get_u32(p + 8)),
            static_cast<int>(detail::get_u32(p + 12))};
  h.channels = static_cast<int>(detail::get_u32(p + 16));
  const std::uint32_t dtype = detail::get_u32(p + 20);
  if (dtype > 1) detail::fail(ErrorKind::BadDtype, "unknown FVol dtype code " + std::to_string(dtype));
  h.dtype = static_cast<FVolType>(dtype);
  if (!h.dims.positive() || h.channels < 1) detail::fail(ErrorKind::InvalidArgument, "FVol dims must be >= 1");
  if (bytes.size() < kFVolHeaderBytes + h.payload_bytes())
    detail::fail(ErrorKind::PayloadShort, "FVol payload shorter than header declares");
  if (bytes.size() > kFVolHeaderBytes + h.payload_bytes())
    detail::fail(ErrorKind::InvalidArgument, "trailing bytes after FVol payload");
  return h;
}

/// Reads either dtype as a volume (mask bytes widen to 0.0 / 1.0).
inline ChannelVolume decode_fvol_volume(const std::vector<std::uint8_t>& bytes) {
  const FVolHeader h = decode_fvol_header(bytes);
  const std::size_t n = h.dims.voxels() * static_cast<std::size_t>(h.channels);
  std::vector<double> values(n);
  const std::uint8_t* p = bytes.data() + kFVolHeaderBytes;
  for (std::size_t i = 0; i < n; ++i)
    values[i] = h.dtype == FVolType::Float32 ? static_cast<double>(detail::get_f32(p + 4 * i)) : p[i];
  return ChannelVolume(h.dims, h.channels, std::move(values));
}

inline BinaryMask decode_fvol_mask(const std::vector<std::uint8_t>& bytes) {
  const FVolHeader h = decode_fvol_header(bytes);
  if (h.dtype != FVolType::Mask8 || h.channels != 1)
    detail::fail(ErrorKind::BadDtype, "expected a one-channel u8 mask file");
  const std::uint8_t* p = bytes.data() + kFVolHeaderBytes;
  return BinaryMask(h.dims, std::vector<std::uint8_t>(p, p + h.dims.voxels()));
}

inline void fvol_write(const ChannelVolume& vol, const std::filesystem::path& path) {
  detail::write_file(path, encode_fvol(vol));
}
inline void fvol_write(const BinaryMask& mask, const std::filesystem::path& path) {
  detail::write_file(path, encode_fvol(mask));
}
inline ChannelVolume fvol_read_volume(const std::filesystem::path& path) {
  return decode_fvol_volume(detail::read_file(path));
}
inline BinaryMask fvol_read_mask(const std::filesystem::path& path) { return decode_fvol_mask(detail::read_file(path)); }

}  // namespace fodiff
