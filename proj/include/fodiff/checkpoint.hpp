#pragma once

// FDCK checkpoint container (all integers u32 little-endian):
//
//   "FDCK"  version(1)
//   config_len  config text (RunConfig key = value form)
//   param_count
//   per parameter: name_len name ndim dims[ndim] f32 data[prod(dims)]

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fodiff/config.hpp"
#include "fodiff/denoiser.hpp"
#include "fodiff/error.hpp"
#include "fodiff/fvol.hpp"

namespace fodiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::vector<ad::Parameter<float>> params;
};

inline std::vector<std::uint8_t> encode_checkpoint(const RunConfig& config,
                                                   const std::vector<ad::Parameter<float>>& params) {
  std::vector<std::uint8_t> out{'F', 'D', 'C', 'K'};
  detail::put_u32(out, kCheckpointVersion);
  const std::string text = to_text(config);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.value) detail::put_f32(out, v);
  }
  return out;
}

namespace detail {
class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) fail(ErrorKind::PayloadShort, "checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    const auto v = get_u32(b_.data() + pos_);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() {
    need(4);
    const float v = get_f32(b_.data() + pos_);
    pos_ += 4;
    return v;
  }
  bool done() const noexcept { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};
}  // namespace detail

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4) != "FDCK") detail::fail(ErrorKind::BadMagic, "missing FDCK magic");
  if (r.u32() != kCheckpointVersion) detail::fail(ErrorKind::BadVersion, "unsupported checkpoint version");
  Checkpoint ck;
  ck.config = parse_run_config(r.str(r.u32()));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    ad::Parameter<float> p;
    p.name = r.str(r.u32());
    const std::uint32_t ndim = r.u32();
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      p.shape.push_back(static_cast<int>(r.u32()));
      n *= static_cast<std::size_t>(p.shape.back());
    }
    r.need(4 * n);
    p.value.resize(n);
    for (auto& v : p.value) v = r.f32();
    ck.params.push_back(std::move(p));
  }
  if (!r.done()) detail::fail(ErrorKind::InvalidArgument, "trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const RunConfig& config, const std::vector<ad::Parameter<float>>& params,
                            const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(config, params));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

/// Network built from the checkpoint's config with its stored weights.
inline Denoiser<float> restore_denoiser(const Checkpoint& ck) {
  Denoiser<float> net(ck.config.denoiser());
  auto& params = net.parameters();
  if (params.size() != ck.params.size())
    detail::fail(ErrorKind::InvalidArgument, "checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ck.params[i];
    if (src.name != params[i].name || src.shape != params[i].shape)
      detail::fail(ErrorKind::InvalidArgument, "checkpoint parameter " + src.name + " does not match the network");
    params[i].value = src.value;
  }
  return net;
}

}  // namespace fodiff
