#pragma once

// Conditional noise predictor.
//
//   input  = concat[S_t (45), LAR patch (45), positional patch (6(L+1))]
//   enc_0  = block(input)                         at s^3
//   enc_i  = block(avgpool2(enc_{i-1}))           at s/2^i
//   F_m    = relu(concat[f_e(p_k mask patch), f_e(M0)])   pooled to the deepest grid
//   F_a    = mix + attn(mix),  mix = conv3(concat[enc_deep, F_m])
//   dec_i  = block(concat[upsample2(dec_{i+1}), enc_i]),  dec_deep = F_a
//   pre    = conv1(concat[dec_0, input])          45 channels
//   eps    = pre * SHAM(pre)
//
// block(x) = silu(groupnorm(conv3(x)) + W_t temb), temb = two silu(affine)
// stages over a sinusoidal step embedding. SHAM pools pre-gate features
// (global average and global max), maps each pooled 45-vector through five
// relu(affine) stages of widths 1, 5, 9, 13, 17 (one per SH order), sums the
// two concatenated branches and turns the result into per-channel sigmoid
// weights.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fodiff/autodiff.hpp"
#include "fodiff/diffusion.hpp"
#include "fodiff/error.hpp"
#include "fodiff/sh.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

struct DenoiserConfig {
  int levels = 2;
  std::vector<int> channel_widths{8, 16};
  int sh_channels = 45;
  int lar_channels = 45;
  int pos_channels = 18;
  int patch_edge = 8;
  int time_embed_dim = 16;
  int fusion_channels = 4;
  int groups = 4;
  bool share_shfe = true;
  int h_max = kDefaultHMax;
  std::uint64_t seed = 0;

  int in_channels() const noexcept { return sh_channels + lar_channels + pos_channels; }
  int out_channels() const noexcept { return sh_channels; }
  int deepest_edge() const noexcept { return patch_edge >> (levels - 1); }
  int deepest_width() const { return channel_widths.back(); }

  void validate() const {
    using detail::fail;
    if (levels < 1) fail(ErrorKind::InvalidArgument, "denoiser needs at least one level");
    if (static_cast<int>(channel_widths.size()) != levels)
      fail(ErrorKind::InvalidArgument, "channel_widths must list one width per level");
    if (sh_channels != coeff_count(h_max) || out_channels() != coeff_count(h_max))
      fail(ErrorKind::InvalidArgument, "SH channel count must equal coeff_count(h_max)");
    if (patch_edge < 1 || patch_edge % (1 << (levels - 1)) != 0)
      fail(ErrorKind::InvalidArgument, "patch edge must be divisible by 2^(levels-1)");
    for (int w : channel_widths)
      if (w < groups || w % groups != 0)
        fail(ErrorKind::InvalidArgument, "every channel width must be a positive multiple of the group count");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
      fail(ErrorKind::InvalidArgument, "time_embed_dim must be even and >= 2");
    if (fusion_channels < 1) fail(ErrorKind::InvalidArgument, "fusion_channels must be >= 1");
    if (lar_channels < 1 || pos_channels < 0) fail(ErrorKind::InvalidArgument, "bad condition channel counts");
  }

  /// Small preset used for CPU runs.
  static DenoiserConfig desk() { return {}; }

  /// Published 4-level network (patch 32, widths 128/256/256/512).
  static DenoiserConfig full_scale() {
    DenoiserConfig c;
    c.levels = 4;
    c.channel_widths = {128, 256, 256, 512};
    c.patch_edge = 32;
    c.time_embed_dim = 128;
    c.fusion_channels = 32;
    c.groups = 32;
    return c;
  }
};

/// Sinusoidal step embedding before projection: [sin(t f_i)..., cos(t f_i)...]
/// with f_i = 10000^(-i / (dim/2)).
inline std::vector<double> time_embed(int t, int dim) {
  if (t < 1) detail::fail(ErrorKind::InvalidArgument, "time step must be >= 1");
  if (dim < 2 || dim % 2 != 0) detail::fail(ErrorKind::InvalidArgument, "embedding dim must be even");
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(t * f);
    out[half + i] = std::cos(t * f);
  }
  return out;
}

/// Network inputs in the scalar type of the network.
template <class T>
struct DenoiserInput {
  std::vector<T> noisy;    // [45][s][s][s]
  std::vector<T> lar;      // [45][s][s][s]
  std::vector<T> pos;      // [pos][s][s][s]
  std::vector<T> pk_mask;  // [1][s][s][s]
  std::vector<T> wm_full;  // [1][Z][Y][X]
  Dims wm_dims{};
  int t = 1;
};

template <class T>
std::vector<T> cast_values(std::span<const double> v) {
  return std::vector<T>(v.begin(), v.end());
}

template <class T>
DenoiserInput<T> make_input(const ChannelVolume& st, const ConditionSet& cond, int t) {
  DenoiserInput<T> in;
  in.noisy = cast_values<T>(st.values());
  in.lar = cast_values<T>(cond.lar_patch.values());
  in.pos = cast_values<T>(cond.pos_patch.values());
  in.pk_mask = cast_values<T>(cond.pk_mask_patch.values());
  const auto m = cond.wm_mask_full.values();
  in.wm_full.assign(m.begin(), m.end());
  in.wm_dims = cond.wm_mask_full.dims();
  in.t = t;
  return in;
}

template <class T>
struct ForwardResult {
  ad::Var<T> output;   // gated eps_hat
  ad::Var<T> pregate;  // output-layer features before SHAM
  ad::Var<T> gate;     // 45 SHAM weights
};

template <class T>
class Denoiser {
 public:
  Denoiser() = default;
  explicit Denoiser(DenoiserConfig config) : config_(std::move(config)) {
    config_.validate();
    build();
    initialize();
  }

  const DenoiserConfig& config() const noexcept { return config_; }
  const std::vector<ad::Parameter<T>>& parameters() const noexcept { return params_; }
  std::vector<ad::Parameter<T>>& parameters() noexcept { return params_; }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  int slot(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) detail::fail(ErrorKind::InvalidArgument, "unknown parameter " + name);
    return it->second;
  }
  ad::Parameter<T>& parameter(const std::string& name) { return params_[static_cast<std::size_t>(slot(name))]; }
  const ad::Parameter<T>& parameter(const std::string& name) const {
    return params_[static_cast<std::size_t>(slot(name))];
  }

  ad::GradientSet<T> zero_gradients() const {
    ad::GradientSet<T> g(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) g[i].assign(params_[i].size(), T(0));
    return g;
  }

  /// Records the full forward pass on `tape`.
  ForwardResult<T> forward(ad::Tape<T>& tape, const DenoiserInput<T>& in) const {
    check_input(in);
    const int s = config_.patch_edge;
    auto as = [&](int c) { return ad::Shape{c, s, s, s}; };

    // step embedding
    std::vector<T> emb;
    for (double v : time_embed(in.t, config_.time_embed_dim)) emb.push_back(static_cast<T>(v));
    auto temb = tape.constant({config_.time_embed_dim, 1, 1, 1}, std::move(emb));
    temb = tape.silu(tape.linear(temb, p(tape, "temb.l1.w"), p(tape, "temb.l1.b"), config_.time_embed_dim));
    temb = tape.silu(tape.linear(temb, p(tape, "temb.l2.w"), p(tape, "temb.l2.b"), config_.time_embed_dim));

    auto noisy = tape.constant(as(config_.sh_channels), in.noisy);
    auto lar = tape.constant(as(config_.lar_channels), in.lar);
    ad::Var<T> input = config_.pos_channels > 0
                           ? tape.concat({noisy, lar, tape.constant(as(config_.pos_channels), in.pos)})
                           : tape.concat({noisy, lar});

    std::vector<ad::Var<T>> enc;
    ad::Var<T> h = input;
    for (int i = 0; i < config_.levels; ++i) {
      if (i > 0) h = tape.avg_pool2(h);
      h = block(tape, "enc" + std::to_string(i), h, temb, width(i));
      enc.push_back(h);
    }

    // anatomy fusion at the deepest level
    const int e = config_.deepest_edge();
    const ad::Shape deep{config_.fusion_channels, e, e, e};
    auto pk = tape.constant(as(1), in.pk_mask);
    auto m0 = tape.constant({1, in.wm_dims.z, in.wm_dims.y, in.wm_dims.x}, in.wm_full);
    auto fe_pk = tape.relu(tape.adaptive_avg_pool(
        tape.conv3d(pk, p(tape, "fuse.pk.w"), p(tape, "fuse.pk.b"), config_.fusion_channels, 3), deep));
    auto fe_m0 = tape.relu(tape.adaptive_avg_pool(
        tape.conv3d(m0, p(tape, "fuse.m0.w"), p(tape, "fuse.m0.b"), config_.fusion_channels, 3), deep));
    auto fm = tape.relu(tape.concat({fe_pk, fe_m0}));
    const int wd = config_.deepest_width();
    auto mix = tape.conv3d(tape.concat({enc.back(), fm}), p(tape, "fuse.mix.w"), p(tape, "fuse.mix.b"), wd, 3);
    auto q = tape.conv3d(mix, p(tape, "attn.q.w"), p(tape, "attn.q.b"), wd, 1);
    auto k = tape.conv3d(mix, p(tape, "attn.k.w"), p(tape, "attn.k.b"), wd, 1);
    auto v = tape.conv3d(mix, p(tape, "attn.v.w"), p(tape, "attn.v.b"), wd, 1);
    auto att = tape.conv3d(tape.attention(q, k, v), p(tape, "attn.o.w"), p(tape, "attn.o.b"), wd, 1);
    ad::Var<T> d = tape.add(mix, att);

    for (int i = config_.levels - 2; i >= 0; --i)
      d = block(tape, "dec" + std::to_string(i), tape.concat({tape.upsample2(d), enc[static_cast<std::size_t>(i)]}),
                temb, width(i));

    auto pre = tape.conv3d(tape.concat({d, input}), p(tape, "head.w"), p(tape, "head.b"), config_.out_channels(), 1);
    auto [out, gate] = sham(tape, pre);
    return {out, pre, gate};
  }

  /// Gated output for a standalone pre-gate feature map [45][...].
  std::pair<ad::Var<T>, ad::Var<T>> sham(ad::Tape<T>& tape, ad::Var<T> pre) const {
    if (tape.shape(pre).c != config_.out_channels())
      detail::fail(ErrorKind::Contract, "SHAM input must have one channel per SH coefficient");
    auto avg = shfe(tape, tape.global_avg_pool(pre), "sham.shfe");
    auto mx = shfe(tape, tape.global_max_pool(pre), config_.share_shfe ? "sham.shfe" : "sham.shfe_max");
    auto logits = tape.linear(tape.add(avg, mx), p(tape, "sham.gate.w"), p(tape, "sham.gate.b"),
                              config_.out_channels());
    auto gate = tape.sigmoid(logits);
    return {tape.mul_channel(pre, gate), gate};
  }

  /// Widths of the SHFE stages, one per even SH order.
  std::vector<int> shfe_widths() const { return order_block_sizes(config_.h_max); }

  /// Convenience: eps_hat for a ChannelVolume patch, no recording.
  ChannelVolume predict(const ChannelVolume& st, const ConditionSet& cond, int t) const {
    ad::Tape<T> tape(false);
    const auto in = make_input<T>(st, cond, t);
    const auto res = forward(tape, in);
    const auto& v = tape.value(res.output);
    return ChannelVolume(st.dims(), config_.out_channels(), std::vector<double>(v.begin(), v.end()));
  }

 private:
  int width(int level) const { return config_.channel_widths[static_cast<std::size_t>(level)]; }

  ad::Var<T> p(ad::Tape<T>& tape, const std::string& name) const {
    const int i = slot(name);
    return tape.param(params_[static_cast<std::size_t>(i)], i);
  }

  ad::Var<T> block(ad::Tape<T>& tape, const std::string& prefix, ad::Var<T> x, ad::Var<T> temb, int cout) const {
    auto h = tape.conv3d(x, p(tape, prefix + ".conv.w"), p(tape, prefix + ".conv.b"), cout, 3);
    h = tape.group_norm(h, p(tape, prefix + ".gn.g"), p(tape, prefix + ".gn.b"), config_.groups);
    h = tape.add_channel(h, tape.linear(temb, p(tape, prefix + ".temb.w"), p(tape, prefix + ".temb.b"), cout));
    return tape.silu(h);
  }

  ad::Var<T> shfe(ad::Tape<T>& tape, ad::Var<T> pooled, const std::string& prefix) const {
    const auto widths = shfe_widths();
    std::vector<ad::Var<T>> stages;
    for (std::size_t j = 0; j < widths.size(); ++j) {
      const std::string n = prefix + std::to_string(j);
      stages.push_back(tape.relu(tape.linear(pooled, p(tape, n + ".w"), p(tape, n + ".b"), widths[j])));
    }
    ad::Var<T> acc = stages.front();
    for (std::size_t j = 1; j < stages.size(); ++j) acc = tape.concat({acc, stages[j]});
    return acc;
  }

  void check_input(const DenoiserInput<T>& in) const {
    const std::size_t vox = static_cast<std::size_t>(config_.patch_edge) * config_.patch_edge * config_.patch_edge;
    auto bad = [](const char* what) { detail::fail(ErrorKind::Contract, what); };
    if (in.noisy.size() != vox * config_.sh_channels) bad("noisy patch has wrong size");
    if (in.lar.size() != vox * config_.lar_channels) bad("LAR patch has wrong size");
    if (in.pos.size() != vox * config_.pos_channels) bad("positional patch has wrong size");
    if (in.pk_mask.size() != vox) bad("mask patch has wrong size");
    if (!in.wm_dims.positive() || in.wm_full.size() != in.wm_dims.voxels()) bad("WM mask has wrong size");
    const int e = config_.deepest_edge();
    if (in.wm_dims.x < e || in.wm_dims.y < e || in.wm_dims.z < e) bad("WM mask smaller than the deepest grid");
    if (in.t < 1) bad("time step must be >= 1");
  }

  void add(const std::string& name, std::vector<int> shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    index_[name] = static_cast<int>(params_.size());
    params_.push_back({name, std::move(shape), std::vector<T>(n, T(0))});
  }

  void build() {
    const int d = config_.time_embed_dim;
    add("temb.l1.w", {d, d});
    add("temb.l1.b", {d});
    add("temb.l2.w", {d, d});
    add("temb.l2.b", {d});
    auto add_block = [&](const std::string& pre, int cin, int cout) {
      add(pre + ".conv.w", {cout, cin, 3, 3, 3});
      add(pre + ".conv.b", {cout});
      add(pre + ".gn.g", {cout});
      add(pre + ".gn.b", {cout});
      add(pre + ".temb.w", {cout, d});
      add(pre + ".temb.b", {cout});
    };
    for (int i = 0; i < config_.levels; ++i)
      add_block("enc" + std::to_string(i), i == 0 ? config_.in_channels() : width(i - 1), width(i));
    const int f = config_.fusion_channels;
    const int wd = config_.deepest_width();
    add("fuse.pk.w", {f, 1, 3, 3, 3});
    add("fuse.pk.b", {f});
    add("fuse.m0.w", {f, 1, 3, 3, 3});
    add("fuse.m0.b", {f});
    add("fuse.mix.w", {wd, wd + 2 * f, 3, 3, 3});
    add("fuse.mix.b", {wd});
    for (const char* n : {"q", "k", "v", "o"}) {
      add(std::string("attn.") + n + ".w", {wd, wd, 1, 1, 1});
      add(std::string("attn.") + n + ".b", {wd});
    }
    for (int i = config_.levels - 2; i >= 0; --i) add_block("dec" + std::to_string(i), width(i + 1) + width(i), width(i));
    const int k = config_.out_channels();
    add("head.w", {k, width(0) + config_.in_channels(), 1, 1, 1});
    add("head.b", {k});
    const auto widths = shfe_widths();
    for (const char* pre : {"sham.shfe", "sham.shfe_max"}) {
      if (config_.share_shfe && std::string(pre) == "sham.shfe_max") continue;
      for (std::size_t j = 0; j < widths.size(); ++j) {
        add(pre + std::to_string(j) + ".w", {widths[j], k});
        add(pre + std::to_string(j) + ".b", {widths[j]});
      }
    }
    add("sham.gate.w", {k, k});
    add("sham.gate.b", {k});
  }

  /// Fan-in uniform weights, zero biases, unit norm scales, zero gate.
  void initialize() {
    std::mt19937_64 rng(config_.seed);
    for (auto& prm : params_) {
      const std::string& n = prm.name;
      const bool is_bias = n.size() > 2 && n.ends_with(".b");
      if (n.ends_with(".gn.g")) {
        std::fill(prm.value.begin(), prm.value.end(), T(1));
      } else if (is_bias || n.starts_with("sham.gate.")) {
        std::fill(prm.value.begin(), prm.value.end(), T(0));
      } else {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < prm.shape.size(); ++i) fan_in *= static_cast<std::size_t>(prm.shape[i]);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : prm.value) v = static_cast<T>(u(rng));
      }
    }
  }

  DenoiserConfig config_;
  std::vector<ad::Parameter<T>> params_;
  std::map<std::string, int> index_;
};

}  // namespace fodiff
