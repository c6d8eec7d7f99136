#pragma once

// End-to-end orchestration: datasets on disk, training, tiled inference,
// evaluation reports and glyph export.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fodiff/adam.hpp"
#include "fodiff/ccm.hpp"
#include "fodiff/checkpoint.hpp"
#include "fodiff/config.hpp"
#include "fodiff/denoiser.hpp"
#include "fodiff/diffusion.hpp"
#include "fodiff/error.hpp"
#include "fodiff/fpa.hpp"
#include "fodiff/fvol.hpp"
#include "fodiff/metrics.hpp"
#include "fodiff/phantom.hpp"
#include "fodiff/sh.hpp"
#include "fodiff/standardize.hpp"
#include "fodiff/volume.hpp"

namespace fodiff {

struct Subject {
  std::string name;
  ChannelVolume har;
  ChannelVolume lar;
  BinaryMask wm;
  BinaryMask brain;
};

/// Seed of subject `index` in a dataset generated from `seed`.
inline std::uint64_t subject_seed(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

inline std::string subject_name(std::size_t index) {
  std::string n = std::to_string(index);
  return "sub-" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
}

inline std::vector<Subject> generate_dataset(std::size_t n, Dims dims, std::uint64_t seed) {
  std::vector<Subject> out;
  for (std::size_t i = 0; i < n; ++i) {
    Phantom p = phantom_generate(default_phantom_spec(dims, subject_seed(seed, i)));
    out.push_back({subject_name(i), std::move(p.har), std::move(p.lar), std::move(p.wm), std::move(p.brain)});
  }
  return out;
}

/// Writes `<dir>/<name>_{har,lar,wm,brain}.fvol`.
inline void write_subject(const Subject& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  fvol_write(s.har, dir / (s.name + "_har.fvol"));
  fvol_write(s.lar, dir / (s.name + "_lar.fvol"));
  fvol_write(s.wm, dir / (s.name + "_wm.fvol"));
  fvol_write(s.brain, dir / (s.name + "_brain.fvol"));
}

inline Subject read_subject(const std::filesystem::path& dir, const std::string& name) {
  Subject s{name, fvol_read_volume(dir / (name + "_har.fvol")), fvol_read_volume(dir / (name + "_lar.fvol")),
            fvol_read_mask(dir / (name + "_wm.fvol")), fvol_read_mask(dir / (name + "_brain.fvol"))};
  for (const Dims& d : {s.lar.dims(), s.wm.dims(), s.brain.dims()})
    detail::require_same_dims(s.har.dims(), d, ("subject " + name).c_str());
  return s;
}

/// Every subject in `dir`, in name order.
inline std::vector<Subject> read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) detail::fail(ErrorKind::Io, "not a directory: " + dir.string());
  std::vector<std::string> names;
  const std::string suffix = "_har.fvol";
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string f = e.path().filename().string();
    if (f.size() > suffix.size() && f.ends_with(suffix)) names.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) detail::fail(ErrorKind::Io, "no *_har.fvol subjects in " + dir.string());
  std::vector<Subject> out;
  for (const auto& n : names) out.push_back(read_subject(dir, n));
  return out;
}

// ---- shared geometry ----------------------------------------------------

/// Crop and tiling shared by training and inference. The crop grows the WM
/// box by (s - tau) / 2 so every WM voxel away from the volume border falls
/// inside some tile's centre crop.
struct VolumeLayout {
  Dims full{};
  BoundingBox box;
  std::vector<PatchSpec> tiles;  // inference tiling over the cropped extent
};

inline VolumeLayout plan_layout(const BinaryMask& wm, const RunConfig& cfg) {
  VolumeLayout l;
  l.full = wm.dims();
  l.box = mask_bbox(wm, cfg.patch, cfg.crop_margin());
  l.tiles = sliding_positions(l.box.extent(), cfg.patch, cfg.infer_stride);
  return l;
}

/// Cropped, standardized view of one subject plus its condition volumes.
/// Standardized volumes are zero (the WM mean) outside WM.
struct PreparedVolume {
  VolumeLayout layout;
  ChannelVolume lar;  // standardized
  ChannelVolume pos;
  BinaryMask wm;
};

inline PreparedVolume prepare_volume(const ChannelVolume& lar, const BinaryMask& wm, const RunConfig& cfg) {
  detail::require_same_dims(lar.dims(), wm.dims(), "prepare_volume");
  if (lar.channels() != coeff_count(cfg.h_max))
    detail::fail(ErrorKind::InvalidArgument, "LAR volume must carry one channel per SH coefficient");
  PreparedVolume p;
  p.layout = plan_layout(wm, cfg);
  p.wm = crop(wm, p.layout.box);
  p.lar = apply_mask(standardize(crop(lar, p.layout.box), cfg.lar_stats), p.wm);
  p.pos = positional_volume(p.layout.box.extent(), cfg.band());
  return p;
}

inline ConditionSet make_condition(const PreparedVolume& p, const PatchSpec& spec) {
  return {extract_patch(p.lar, spec), positional_patch(p.pos, spec), extract_mask_patch(p.wm, spec), p.wm};
}

// ---- training -----------------------------------------------------------

struct LossRecord {
  long iteration = 0;
  double loss = 0.0;
  double lr = 0.0;
  double a = 0.0;
  double b = 0.0;
};

inline std::string loss_csv(const std::vector<LossRecord>& log) {
  std::string out = "iteration,loss,lr,a,b\n";
  for (const auto& r : log)
    out += std::to_string(r.iteration) + ',' + detail::format_double(r.loss) + ',' + detail::format_double(r.lr) +
           ',' + detail::format_double(r.a) + ',' + detail::format_double(r.b) + '\n';
  return out;
}

struct TrainResult {
  RunConfig config;  // resolved, with standardization statistics
  Denoiser<float> net;
  std::vector<LossRecord> log;
};

/// Called after iteration `it` (1-based count of completed iterations).
using CheckpointHook = std::function<void(long it, const RunConfig&, const Denoiser<float>&)>;

/// Training statistics: per-channel mean/std over WM voxels of every subject.
inline void fit_statistics(RunConfig& cfg, const std::vector<Subject>& data) {
  std::vector<const ChannelVolume*> har, lar;
  std::vector<const BinaryMask*> wm;
  for (const auto& s : data) {
    har.push_back(&s.har);
    lar.push_back(&s.lar);
    wm.push_back(&s.wm);
  }
  cfg.har_stats = channel_stats(har, wm);
  cfg.lar_stats = channel_stats(lar, wm);
}

inline TrainResult train(RunConfig cfg, const std::vector<Subject>& data, const CheckpointHook& hook = {}) {
  cfg.validate();
  if (data.empty()) detail::fail(ErrorKind::InvalidArgument, "training needs at least one subject");
  const int k = coeff_count(cfg.h_max);
  for (const auto& s : data) {
    if (s.har.channels() != k || s.lar.channels() != k)
      detail::fail(ErrorKind::InvalidArgument, "subject " + s.name + " must carry one channel per SH coefficient");
    for (const Dims& d : {s.lar.dims(), s.wm.dims(), s.brain.dims()})
      detail::require_same_dims(s.har.dims(), d, "train");
  }
  fit_statistics(cfg, data);

  struct Item {
    PreparedVolume vol;
    ChannelVolume har;
    PatchSampler sampler;
  };
  std::vector<Item> items;
  items.reserve(data.size());
  for (const auto& s : data) {
    PreparedVolume p = prepare_volume(s.lar, s.wm, cfg);
    ChannelVolume har = apply_mask(standardize(crop(s.har, p.layout.box), cfg.har_stats), p.wm);
    auto table = build_table(p.wm, cfg.patch, cfg.train_stride, p.layout.tiles);
    items.push_back({std::move(p), std::move(har), PatchSampler(std::move(table))});
  }

  TrainResult res{cfg, Denoiser<float>(cfg.denoiser()), {}};
  auto& net = res.net;
  const NoiseSchedule sched = cosine_schedule(cfg.steps);
  const SamplerConfig scfg = cfg.sampler();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, items.size() - 1);
  AdamState<float> adam;

  for (long it = 0; it < cfg.iterations; ++it) {
    const SamplerState ab = schedule(it, scfg);
    auto grads = net.zero_gradients();
    double loss = 0.0;
    for (int bi = 0; bi < cfg.batch; ++bi) {
      Item& item = items[pick(rng)];
      const PatchSpec spec = item.sampler.sample(ab.a, ab.b, rng);
      const ConditionSet cond = make_condition(item.vol, spec);
      const ChannelVolume s0 = extract_patch(item.har, spec);
      ad::Tape<float> tape(true);
      ForwardResult<float> fw;
      auto predictor = [&](const ChannelVolume& st, const ConditionSet& c, int t) {
        fw = net.forward(tape, make_input<float>(st, c, t));
        const auto& v = tape.value(fw.output);
        return ChannelVolume(st.dims(), k, std::vector<double>(v.begin(), v.end()));
      };
      const LossSample ls = training_loss(predictor, s0, cond, rng, sched);
      std::vector<float> seed(ls.grad_eps_hat.size());
      for (std::size_t i = 0; i < seed.size(); ++i) seed[i] = static_cast<float>(ls.grad_eps_hat[i] / cfg.batch);
      tape.backward(fw.output, seed, grads);
      loss += ls.loss;
    }
    const double lr = cfg.lr_at(it);
    adam_step(net.parameters(), grads, adam, lr);
    res.log.push_back({it, loss / cfg.batch, lr, ab.a, ab.b});
    if (hook && cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0) hook(it + 1, res.config, net);
  }
  return res;
}

// ---- inference ----------------------------------------------------------

/// Builds the noise predictor used for tile `index` (test seam).
using PredictorFactory = std::function<NoisePredictor(std::size_t index, const PatchSpec& tile)>;

inline std::uint64_t tile_seed(std::uint64_t seed, std::size_t index) { return subject_seed(seed, index); }

/// Tile, sample, centre-crop, merge, destandardize, restore, brain-mask.
/// Cropped voxels that no centre crop reaches are set to zero.
inline ChannelVolume infer_with(const PredictorFactory& factory, const RunConfig& cfg, const ChannelVolume& lar,
                                const BinaryMask& wm, const BinaryMask& brain) {
  cfg.validate();
  if (cfg.har_stats.empty() || cfg.lar_stats.empty())
    detail::fail(ErrorKind::InvalidArgument, "configuration carries no standardization statistics");
  detail::require_same_dims(lar.dims(), brain.dims(), "infer");
  const PreparedVolume p = prepare_volume(lar, wm, cfg);
  const NoiseSchedule sched = cosine_schedule(cfg.steps);
  const int k = coeff_count(cfg.h_max);
  const Dims patch{cfg.patch, cfg.patch, cfg.patch};
  const Dims ext = p.layout.box.extent();

  std::vector<ChannelVolume> crops;
  std::vector<PatchSpec> places;
  for (std::size_t i = 0; i < p.layout.tiles.size(); ++i) {
    const PatchSpec& tile = p.layout.tiles[i];
    const ConditionSet cond = make_condition(p, tile);
    std::mt19937_64 rng(tile_seed(cfg.infer_seed, i));
    const NoisePredictor pred = factory(i, tile);
    const ChannelVolume s0 = sample_loop(pred, cond, patch, k, rng, sched, cfg.x0_clip);
    crops.push_back(center_crop(s0, cfg.target));
    places.push_back(center_placement(tile, cfg.target));
  }
  ChannelVolume merged = destandardize(merge_patches(crops, places, ext), cfg.har_stats);

  BinaryMask covered(ext);
  for (const auto& pl : places)
    for (int z = 0; z < pl.size; ++z)
      for (int y = 0; y < pl.size; ++y)
        for (int x = 0; x < pl.size; ++x) covered.set(pl.origin[0] + x, pl.origin[1] + y, pl.origin[2] + z, true);
  merged = apply_mask(merged, covered);
  return apply_mask(restore_from_bbox(merged, p.layout.box, lar.dims()), brain);
}

inline ChannelVolume infer(const Denoiser<float>& net, const RunConfig& cfg, const ChannelVolume& lar,
                           const BinaryMask& wm, const BinaryMask& brain) {
  const DenoiserConfig want = cfg.denoiser();
  const DenoiserConfig& have = net.config();
  if (want.patch_edge != have.patch_edge || want.channel_widths != have.channel_widths ||
      want.pos_channels != have.pos_channels || want.levels != have.levels)
    detail::fail(ErrorKind::InvalidArgument, "run configuration does not match the network");
  auto factory = [&net](std::size_t, const PatchSpec&) -> NoisePredictor {
    return [&net](const ChannelVolume& st, const ConditionSet& c, int t) { return net.predict(st, c, t); };
  };
  return infer_with(factory, cfg, lar, wm, brain);
}

// ---- evaluation ---------------------------------------------------------

struct RegionReport {
  std::string region;
  std::optional<AccStats> stats;  // empty when no voxel has a defined ACC
  std::size_t mask_voxels = 0;
};

struct EvalReport {
  std::vector<RegionReport> regions;

  bool ok() const {
    return std::all_of(regions.begin(), regions.end(), [](const RegionReport& r) { return r.stats.has_value(); });
  }
};

inline EvalReport evaluate(const ChannelVolume& pred, const ChannelVolume& truth, const BinaryMask& wm,
                           const BinaryMask& brain) {
  detail::require_same_dims(pred.dims(), truth.dims(), "evaluate");
  detail::require_same_dims(pred.dims(), wm.dims(), "evaluate");
  detail::require_same_dims(pred.dims(), brain.dims(), "evaluate");
  EvalReport rep;
  for (const auto& [name, mask] : {std::pair<const char*, const BinaryMask*>{"wm", &wm}, {"brain", &brain}}) {
    RegionReport r{name, std::nullopt, mask->count()};
    try {
      r.stats = acc_region(pred, truth, *mask);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoValidVoxels) throw;
    }
    rep.regions.push_back(r);
  }
  return rep;
}

inline std::string fixed4(double v) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(4);
  o << v;
  return o.str();
}

inline std::string report_text(const EvalReport& rep) {
  std::string out;
  for (const auto& r : rep.regions) {
    std::string label = r.region == "wm" ? "WM" : "brain";
    if (r.stats)
      out += label + " ACC " + fixed4(r.stats->mean) + "±" + fixed4(r.stats->std) + " (voxels " +
             std::to_string(r.stats->counted) + ", undefined " + std::to_string(r.stats->undefined) + ")\n";
    else
      out += label + " ACC no-valid-voxels (mask voxels " + std::to_string(r.mask_voxels) + ")\n";
  }
  return out;
}

inline std::string report_csv(const EvalReport& rep) {
  std::string out = "region,status,mean,std,counted,undefined\n";
  for (const auto& r : rep.regions) {
    if (r.stats)
      out += r.region + ",ok," + detail::format_double(r.stats->mean) + ',' + detail::format_double(r.stats->std) +
             ',' + std::to_string(r.stats->counted) + ',' + std::to_string(r.stats->undefined) + '\n';
    else
      out += r.region + ",no-valid-voxels,,,0," + std::to_string(r.mask_voxels) + '\n';
  }
  return out;
}

// ---- glyph export -------------------------------------------------------

/// Rows `x,y,z,dx,dy,dz,amplitude` for each voxel over an antipodal sphere
/// grid of `directions` points (even).
inline std::string export_glyph_samples(const ChannelVolume& fod, std::span<const Index3> voxels, int directions) {
  if (directions < 2 || directions % 2 != 0)
    detail::fail(ErrorKind::InvalidArgument, "direction count must be even and >= 2");
  int h_max = -1;
  for (int h = 0; h <= kMaxHMax; h += 2)
    if (coeff_count(h) == fod.channels()) h_max = h;
  if (h_max < 0) detail::fail(ErrorKind::InvalidArgument, "channel count is not an even-order SH coefficient count");
  const auto dirs = antipodal_sphere(static_cast<std::size_t>(directions));
  const SHBasisMatrix basis = eval_basis(dirs, h_max);
  std::string out = "x,y,z,dx,dy,dz,amplitude\n";
  const Dims d = fod.dims();
  for (const auto& v : voxels) {
    if (v[0] < 0 || v[1] < 0 || v[2] < 0 || v[0] >= d.x || v[1] >= d.y || v[2] >= d.z)
      detail::fail(ErrorKind::InvalidArgument, "voxel outside volume");
    const auto coeffs = fod.voxel(v[0], v[1], v[2]);
    const auto amp = reconstruct_fod(coeffs, basis);
    for (std::size_t n = 0; n < dirs.size(); ++n)
      out += std::to_string(v[0]) + ',' + std::to_string(v[1]) + ',' + std::to_string(v[2]) + ',' +
             detail::format_double(dirs[n][0]) + ',' + detail::format_double(dirs[n][1]) + ',' +
             detail::format_double(dirs[n][2]) + ',' + detail::format_double(amp[n]) + '\n';
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) detail::fail(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) detail::fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace fodiff
