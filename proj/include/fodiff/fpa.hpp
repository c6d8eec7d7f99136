#pragma once

// Anatomy-weighted patch sampling over a white-matter mask.
//
// Each candidate window gets importance = fraction of WM voxels. Windows that
// belong to the inference tiling ("targets") get weight a, the rest 1 - a,
// each scaled by (1 - b) + b * importance / max_importance. Patches are drawn
// proportionally to those weights; a and b decay linearly over training.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <vector>

#include "fodiff/error.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

struct SamplerConfig {
  double a_start = 0.99;
  double b_start = 0.8;
  double a_end = 0.8;
  double b_end = 0.5;
  long total_iterations = 1;

  void validate() const {
    auto in_open_unit = [](double v) { return v > 0.0 && v < 1.0; };
    if (!in_open_unit(a_start) || !in_open_unit(a_end) || !in_open_unit(b_start) || !in_open_unit(b_end))
      detail::fail(ErrorKind::InvalidArgument, "sampler a/b values must lie in (0, 1)");
    if (a_end > a_start || b_end > b_start)
      detail::fail(ErrorKind::InvalidArgument, "sampler a/b must not increase over training");
    if (total_iterations < 1) detail::fail(ErrorKind::InvalidArgument, "total_iterations must be >= 1");
  }
};

struct PatchEntry {
  PatchSpec spec;
  double importance = 0.0;
  bool is_target = false;
};

struct PatchImportanceTable {
  std::vector<PatchEntry> entries;
  double max_importance = 0.0;

  std::size_t target_count() const noexcept {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [](const PatchEntry& e) { return e.is_target; }));
  }
};

/// Fraction of nonzero voxels in a window of the mask.
inline double importance(const BinaryMask& mask, const PatchSpec& spec) {
  if (!detail::spec_in_bounds(spec, mask.dims()))
    detail::fail(ErrorKind::InvalidArgument, "patch spec out of bounds");
  std::size_t ones = 0;
  const int s = spec.size;
  for (int z = 0; z < s; ++z)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        ones += mask.at(spec.origin[0] + x, spec.origin[1] + y, spec.origin[2] + z) ? 1 : 0;
  return static_cast<double>(ones) / (static_cast<double>(s) * s * s);
}

/// Same quantity for a patch already materialized as 0/1 values.
inline double importance(std::span<const std::uint8_t> patch_values) {
  if (patch_values.empty()) detail::fail(ErrorKind::InvalidArgument, "empty mask patch");
  std::size_t ones = 0;
  for (auto v : patch_values) ones += v != 0 ? 1 : 0;
  return static_cast<double>(ones) / static_cast<double>(patch_values.size());
}

/// Candidate set = training tiling at `train_stride`; targets = `target_specs`.
/// A target window that the training tiling misses (its clamped origin is off
/// the stride grid) is appended so every target is also a candidate.
inline PatchImportanceTable build_table(const BinaryMask& wm_mask, int patch, int train_stride,
                                        std::span<const PatchSpec> target_specs) {
  PatchImportanceTable table;
  auto candidates = sliding_positions(wm_mask.dims(), patch, train_stride);
  const std::set<PatchSpec> targets(target_specs.begin(), target_specs.end());
  std::set<PatchSpec> seen;
  for (const auto& spec : candidates) seen.insert(spec);
  for (const auto& spec : target_specs) {
    if (spec.size != patch || !detail::spec_in_bounds(spec, wm_mask.dims()))
      detail::fail(ErrorKind::InvalidArgument, "target spec does not fit the candidate geometry");
    if (seen.insert(spec).second) candidates.push_back(spec);
  }
  table.entries.reserve(candidates.size());
  for (const auto& spec : candidates) {
    const double imp = importance(wm_mask, spec);
    table.max_importance = std::max(table.max_importance, imp);
    table.entries.push_back({spec, imp, targets.contains(spec)});
  }
  if (!(table.max_importance > 0.0))
    detail::fail(ErrorKind::EmptyMask, "every candidate patch has zero importance");
  return table;
}

struct SamplerState {
  double a = 0.0;
  double b = 0.0;
};

/// Linear decay from the start to the end values, clamped after total_iterations.
inline SamplerState schedule(long iteration, const SamplerConfig& cfg) {
  if (iteration <= 0) return {cfg.a_start, cfg.b_start};
  if (iteration >= cfg.total_iterations) return {cfg.a_end, cfg.b_end};
  const double f = static_cast<double>(iteration) / static_cast<double>(cfg.total_iterations);
  return {cfg.a_start + (cfg.a_end - cfg.a_start) * f, cfg.b_start + (cfg.b_end - cfg.b_start) * f};
}

inline std::vector<double> unnormalized_prob(const PatchImportanceTable& table, double a, double b) {
  if (!(table.max_importance > 0.0))
    detail::fail(ErrorKind::InvalidArgument, "table max importance must be positive");
  std::vector<double> w;
  w.reserve(table.entries.size());
  for (const auto& e : table.entries)
    w.push_back((e.is_target ? a : 1.0 - a) * ((1.0 - b) + b * e.importance / table.max_importance));
  return w;
}

/// Inverse-CDF sampler over a fixed table; cumulative weights are rebuilt only
/// when (a, b) move by more than 1e-6.
class PatchSampler {
 public:
  explicit PatchSampler(PatchImportanceTable table) : table_(std::move(table)) {}

  const PatchImportanceTable& table() const noexcept { return table_; }

  template <class Rng>
  const PatchSpec& sample(double a, double b, Rng& rng) {
    refresh(a, b);
    std::uniform_real_distribution<double> uniform(0.0, total_);
    const double u = uniform(rng);
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    if (it == cumulative_.end()) --it;
    return table_.entries[static_cast<std::size_t>(it - cumulative_.begin())].spec;
  }

  std::span<const double> cumulative() const noexcept { return cumulative_; }

 private:
  void refresh(double a, double b) {
    if (!cumulative_.empty() && std::abs(a - a_) <= 1e-6 && std::abs(b - b_) <= 1e-6) return;
    const auto w = unnormalized_prob(table_, a, b);
    cumulative_.resize(w.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      acc += w[i];
      cumulative_[i] = acc;
    }
    if (!(acc > 0.0)) detail::fail(ErrorKind::InvalidArgument, "total sampling weight is zero");
    total_ = acc;
    a_ = a;
    b_ = b;
  }

  PatchImportanceTable table_;
  std::vector<double> cumulative_;
  double total_ = 0.0;
  double a_ = 0.0;
  double b_ = 0.0;
};

/// One draw from the normalized weights of `table`.
template <class Rng>
PatchSpec sample(const PatchImportanceTable& table, double a, double b, Rng& rng) {
  PatchSampler sampler(table);
  return sampler.sample(a, b, rng);
}

}  // namespace fodiff
