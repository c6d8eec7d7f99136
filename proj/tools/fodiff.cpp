// fodiff command-line tool.
//
// Failures print `error: <code>: <message>` to stderr and exit nonzero:
// 2 for usage errors, 3 when evaluation finds no valid voxels, 1 otherwise.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "fodiff/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fodiff;

namespace {

Dims parse_dims(const std::string& text) {
  const auto v = detail::parse_list<int>("dims", text);
  if (v.size() != 3) detail::fail(ErrorKind::Usage, "--dims expects X,Y,Z");
  return {v[0], v[1], v[2]};
}

/// "x,y,z;x,y,z;..."
std::vector<Index3> parse_voxels(const std::string& text) {
  std::vector<Index3> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto semi = text.find(';', start);
    const std::string item = text.substr(start, semi == std::string::npos ? std::string::npos : semi - start);
    if (!detail::trim(item).empty()) {
      const auto v = detail::parse_list<int>("voxels", item);
      if (v.size() != 3) detail::fail(ErrorKind::Usage, "--voxels expects x,y,z triples separated by ';'");
      out.push_back({v[0], v[1], v[2]});
    }
    if (semi == std::string::npos) break;
    start = semi + 1;
  }
  if (out.empty()) detail::fail(ErrorKind::Usage, "--voxels lists no voxel");
  return out;
}

void cmd_phantom(const fs::path& out, int n, const std::string& dims, std::uint64_t seed) {
  if (n < 1) detail::fail(ErrorKind::Usage, "--n must be >= 1");
  const Dims d = parse_dims(dims);
  fs::create_directories(out);
  for (const auto& s : generate_dataset(static_cast<std::size_t>(n), d, seed)) write_subject(s, out);
  write_text(out / "phantom.txt",
             "n = " + std::to_string(n) + "\ndims = " + dims + "\nseed = " + std::to_string(seed) + "\n");
}

void cmd_train(const fs::path& data, const fs::path& config, const fs::path& out) {
  const RunConfig cfg = load_run_config(config);
  const auto subjects = read_dataset(data);
  fs::create_directories(out);
  auto hook = [&](long it, const RunConfig& c, const Denoiser<float>& net) {
    save_checkpoint(c, net.parameters(), out / ("model-" + std::to_string(it) + ".fdck"));
  };
  const TrainResult res = train(cfg, subjects, hook);
  save_run_config(res.config, out / "run.cfg");
  write_text(out / "loss.csv", loss_csv(res.log));
  save_checkpoint(res.config, res.net.parameters(), out / "model.fdck");
}

void cmd_infer(const fs::path& ckpt, const fs::path& lar, const fs::path& wm, const fs::path& brain,
               const fs::path& out, std::uint64_t seed) {
  const Checkpoint ck = load_checkpoint(ckpt);
  RunConfig cfg = ck.config;
  cfg.infer_seed = seed;
  const Denoiser<float> net = restore_denoiser(ck);
  const ChannelVolume pred =
      infer(net, cfg, fvol_read_volume(lar), fvol_read_mask(wm), fvol_read_mask(brain));
  fvol_write(pred, out);
  save_run_config(cfg, fs::path(out.string() + ".cfg"));
}

int cmd_eval(const fs::path& pred, const fs::path& truth, const fs::path& wm, const fs::path& brain,
             const fs::path& report) {
  const EvalReport rep =
      evaluate(fvol_read_volume(pred), fvol_read_volume(truth), fvol_read_mask(wm), fvol_read_mask(brain));
  write_text(report, report_csv(rep));
  const std::string text = report_text(rep);
  write_text(fs::path(report.string() + ".txt"), text);
  std::cout << text;
  if (!rep.ok()) {
    std::cerr << "error: " << error_code(ErrorKind::NoValidVoxels) << ": a region has no voxel with a defined ACC\n";
    return 3;
  }
  return 0;
}

void cmd_glyphs(const fs::path& fod, const std::string& voxels, int dirs, const fs::path& out) {
  write_text(out, export_glyph_samples(fvol_read_volume(fod), parse_voxels(voxels), dirs));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fodiff: conditional diffusion for FOD angular super-resolution"};
  app.require_subcommand(1);

  std::string out, data, config, ckpt, lar, wm, brain, pred, truth, report, fod, voxels, dims = "24,24,24";
  int n = 10, dirs = 100;
  std::uint64_t seed = 0;

  auto* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
  phantom->add_option("--out", out, "output directory")->required();
  phantom->add_option("--n", n, "number of subjects")->required();
  phantom->add_option("--dims", dims, "volume dims X,Y,Z");
  phantom->add_option("--seed", seed, "dataset seed");

  auto* trn = app.add_subcommand("train", "train a denoiser");
  trn->add_option("--data", data, "dataset directory")->required();
  trn->add_option("--config", config, "run configuration file")->required();
  trn->add_option("--out", out, "output directory")->required();

  auto* inf = app.add_subcommand("infer", "predict a HAR volume");
  inf->add_option("--ckpt", ckpt, "checkpoint")->required();
  inf->add_option("--lar", lar, "LAR FOD volume")->required();
  inf->add_option("--wm", wm, "WM mask")->required();
  inf->add_option("--brain", brain, "brain mask")->required();
  inf->add_option("--out", out, "output volume")->required();
  inf->add_option("--seed", seed, "sampling seed");

  auto* ev = app.add_subcommand("eval", "ACC report");
  ev->add_option("--pred", pred, "predicted volume")->required();
  ev->add_option("--truth", truth, "reference volume")->required();
  ev->add_option("--wm", wm, "WM mask")->required();
  ev->add_option("--brain", brain, "brain mask")->required();
  ev->add_option("--report", report, "CSV report path")->required();

  auto* gl = app.add_subcommand("export-glyphs", "FOD amplitudes on a sphere grid");
  gl->add_option("--fod", fod, "FOD volume")->required();
  gl->add_option("--voxels", voxels, "x,y,z;x,y,z;...")->required();
  gl->add_option("--dirs", dirs, "direction count (even)");
  gl->add_option("--out", out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << error_code(ErrorKind::Usage) << ": " << e.what() << '\n';
    return 2;
  }

  try {
    if (*phantom) cmd_phantom(out, n, dims, seed);
    if (*trn) cmd_train(data, config, out);
    if (*inf) cmd_infer(ckpt, lar, wm, brain, out, seed);
    if (*ev) return cmd_eval(pred, truth, wm, brain, report);
    if (*gl) cmd_glyphs(fod, voxels, dirs, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << '\n';
    return e.kind() == ErrorKind::Usage ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
