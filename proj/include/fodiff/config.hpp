#pragma once

// Run configuration and its line-based `key = value` text form.
//
// Lines are `key = value`; blank lines and lines starting with '#' are
// ignored. Unknown keys, repeated keys and malformed values are hard errors.
// List values are comma separated. `preset = desk|full` may only appear as
// the first key and resets every field to that preset before the remaining
// keys apply.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "fodiff/ccm.hpp"
#include "fodiff/denoiser.hpp"
#include "fodiff/error.hpp"
#include "fodiff/fpa.hpp"

namespace fodiff {

/// Per-channel affine standardization parameters.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool empty() const noexcept { return mean.empty(); }
  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

struct RunConfig {
  std::string preset = "desk";
  int steps = 250;
  int h_max = kDefaultHMax;
  int patch = 8;
  int target = 4;
  int train_stride = 2;
  int infer_stride = 4;
  double a_start = 0.99;
  double b_start = 0.8;
  double a_end = 0.8;
  double b_end = 0.5;
  int pos_levels = 2;
  double f_max = 2.0;
  int levels = 2;
  std::vector<int> channel_widths{16, 32};
  int time_embed_dim = 16;
  int fusion_channels = 4;
  int groups = 4;
  bool share_shfe = true;
  int iterations = 2000;
  int batch = 2;
  double lr = 5e-3;
  /// Fraction of `iterations` after which the learning rate is halved.
  double lr_halve_at = 0.5;
  std::uint64_t seed = 1;
  std::uint64_t init_seed = 7;
  std::uint64_t infer_seed = 0;
  int checkpoint_every = 0;  // 0: final checkpoint only
  /// Bound on |S_0| estimates (standardized units) inside the reverse chain; 0 disables.
  double x0_clip = 3.0;
  ChannelStats har_stats;
  ChannelStats lar_stats;

  static RunConfig desk() { return {}; }

  static RunConfig full() {
    RunConfig c;
    c.preset = "full";
    c.patch = 32;
    c.target = 20;
    c.train_stride = 2;
    c.infer_stride = 20;
    c.levels = 4;
    c.channel_widths = {128, 256, 256, 512};
    c.time_embed_dim = 128;
    c.fusion_channels = 32;
    c.groups = 32;
    c.batch = 4;
    c.lr = 1e-4;
    return c;
  }

  int crop_margin() const noexcept { return (patch - target) / 2; }
  double lr_at(long iteration) const {
    return static_cast<double>(iteration) >= lr_halve_at * iterations ? lr * 0.5 : lr;
  }

  SamplerConfig sampler() const { return {a_start, b_start, a_end, b_end, iterations}; }
  FrequencyBand band() const { return frequencies(pos_levels, f_max); }

  DenoiserConfig denoiser() const {
    DenoiserConfig d;
    d.levels = levels;
    d.channel_widths = channel_widths;
    d.h_max = h_max;
    d.sh_channels = coeff_count(h_max);
    d.lar_channels = coeff_count(h_max);
    d.pos_channels = band().channels();
    d.patch_edge = patch;
    d.time_embed_dim = time_embed_dim;
    d.fusion_channels = fusion_channels;
    d.groups = groups;
    d.share_shfe = share_shfe;
    d.seed = init_seed;
    return d;
  }

  void validate() const {
    auto bad = [](const std::string& m) { detail::fail(ErrorKind::Config, m); };
    if (steps < 2) bad("steps must be >= 2");
    if (target < 1 || target > patch) bad("target must satisfy 1 <= target <= patch");
    if ((patch - target) % 2 != 0) bad("patch - target must be even");
    if (train_stride < 1 || infer_stride < 1) bad("strides must be >= 1");
    if (infer_stride > target) bad("infer_stride must not exceed target, or merged output leaves gaps");
    if (iterations < 1) bad("iterations must be >= 1");
    if (batch < 1) bad("batch must be >= 1");
    if (!(lr > 0.0)) bad("lr must be positive");
    if (!(lr_halve_at >= 0.0 && lr_halve_at <= 1.0)) bad("lr_halve_at must lie in [0, 1]");
    if (checkpoint_every < 0) bad("checkpoint_every must be >= 0");
    if (!(x0_clip >= 0.0)) bad("x0_clip must be >= 0");
    const std::size_t k = static_cast<std::size_t>(coeff_count(h_max));
    for (const auto* s : {&har_stats, &lar_stats}) {
      if (s->empty()) continue;
      if (s->mean.size() != k || s->std.size() != k) bad("standardization stats must have one entry per channel");
      for (double v : s->std)
        if (!(v > 0.0)) bad("standardization std must be positive");
    }
    try {
      sampler().validate();
      (void)band();
      denoiser().validate();
    } catch (const Error& e) {
      bad(e.what());
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N parse_number(const std::string& key, std::string_view text) {
  N v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size())
    fail(ErrorKind::Config, "bad value for '" + key + "': '" + std::string(text) + "'");
  return v;
}

template <class N>
std::vector<N> parse_list(const std::string& key, std::string_view text) {
  std::vector<N> out;
  if (trim(text).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = text.find(',', start);
    const std::string item = trim(text.substr(start, comma == std::string_view::npos ? text.npos : comma - start));
    out.push_back(parse_number<N>(key, item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  fail(ErrorKind::Config, "bad boolean for '" + key + "': '" + text + "'");
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) fail(ErrorKind::Contract, "number formatting failed");
  return std::string(buf, ptr);
}

template <class N>
std::string format_list(const std::vector<N>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<N>)
      out += format_double(v[i]);
    else
      out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

inline std::string to_text(const RunConfig& c) {
  using detail::format_double;
  using detail::format_list;
  std::ostringstream o;
  o << "preset = " << c.preset << '\n'
    << "steps = " << c.steps << '\n'
    << "h_max = " << c.h_max << '\n'
    << "patch = " << c.patch << '\n'
    << "target = " << c.target << '\n'
    << "train_stride = " << c.train_stride << '\n'
    << "infer_stride = " << c.infer_stride << '\n'
    << "a_start = " << format_double(c.a_start) << '\n'
    << "b_start = " << format_double(c.b_start) << '\n'
    << "a_end = " << format_double(c.a_end) << '\n'
    << "b_end = " << format_double(c.b_end) << '\n'
    << "pos_levels = " << c.pos_levels << '\n'
    << "f_max = " << format_double(c.f_max) << '\n'
    << "levels = " << c.levels << '\n'
    << "channel_widths = " << format_list(c.channel_widths) << '\n'
    << "time_embed_dim = " << c.time_embed_dim << '\n'
    << "fusion_channels = " << c.fusion_channels << '\n'
    << "groups = " << c.groups << '\n'
    << "share_shfe = " << (c.share_shfe ? "true" : "false") << '\n'
    << "iterations = " << c.iterations << '\n'
    << "batch = " << c.batch << '\n'
    << "lr = " << format_double(c.lr) << '\n'
    << "lr_halve_at = " << format_double(c.lr_halve_at) << '\n'
    << "seed = " << c.seed << '\n'
    << "init_seed = " << c.init_seed << '\n'
    << "infer_seed = " << c.infer_seed << '\n'
    << "checkpoint_every = " << c.checkpoint_every << '\n'
    << "x0_clip = " << format_double(c.x0_clip) << '\n'
    << "har_mean = " << format_list(c.har_stats.mean) << '\n'
    << "har_std = " << format_list(c.har_stats.std) << '\n'
    << "lar_mean = " << format_list(c.lar_stats.mean) << '\n'
    << "lar_std = " << format_list(c.lar_stats.std) << '\n';
  return o.str();
}

inline RunConfig parse_run_config(std::string_view text) {
  using namespace detail;
  RunConfig c;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::Config, "line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string val = trim(std::string_view(t).substr(eq + 1));
    if (!seen.insert(key).second) fail(ErrorKind::Config, "duplicate key '" + key + "'");
    auto num = [&]<class N>(N& dst) { dst = parse_number<N>(key, val); };

    if (key == "preset") {
      if (seen.size() != 1) fail(ErrorKind::Config, "'preset' must be the first key");
      if (val == "desk")
        c = RunConfig::desk();
      else if (val == "full")
        c = RunConfig::full();
      else
        fail(ErrorKind::Config, "unknown preset '" + val + "'");
    } else if (key == "steps") num(c.steps);
    else if (key == "h_max") num(c.h_max);
    else if (key == "patch") num(c.patch);
    else if (key == "target") num(c.target);
    else if (key == "train_stride") num(c.train_stride);
    else if (key == "infer_stride") num(c.infer_stride);
    else if (key == "a_start") num(c.a_start);
    else if (key == "b_start") num(c.b_start);
    else if (key == "a_end") num(c.a_end);
    else if (key == "b_end") num(c.b_end);
    else if (key == "pos_levels") num(c.pos_levels);
    else if (key == "f_max") num(c.f_max);
    else if (key == "levels") num(c.levels);
    else if (key == "channel_widths") c.channel_widths = parse_list<int>(key, val);
    else if (key == "time_embed_dim") num(c.time_embed_dim);
    else if (key == "fusion_channels") num(c.fusion_channels);
    else if (key == "groups") num(c.groups);
    else if (key == "share_shfe") c.share_shfe = parse_bool(key, val);
    else if (key == "iterations") num(c.iterations);
    else if (key == "batch") num(c.batch);
    else if (key == "lr") num(c.lr);
    else if (key == "lr_halve_at") num(c.lr_halve_at);
    else if (key == "seed") num(c.seed);
    else if (key == "init_seed") num(c.init_seed);
    else if (key == "infer_seed") num(c.infer_seed);
    else if (key == "checkpoint_every") num(c.checkpoint_every);
    else if (key == "x0_clip") num(c.x0_clip);
    else if (key == "har_mean") c.har_stats.mean = parse_list<double>(key, val);
    else if (key == "har_std") c.har_stats.std = parse_list<double>(key, val);
    else if (key == "lar_mean") c.lar_stats.mean = parse_list<double>(key, val);
    else if (key == "lar_std") c.lar_stats.std = parse_list<double>(key, val);
    else fail(ErrorKind::Config, "unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) detail::fail(ErrorKind::Io, "cannot open config " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return parse_run_config(s.str());
}

inline void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) detail::fail(ErrorKind::Io, "cannot write config " + path.string());
  out << to_text(c);
  if (!out) detail::fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace fodiff
