#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dipnet/config.hpp"
#include "dipnet/error.hpp"
#include "dipnet/gradcheck.hpp"
#include "dipnet/train.hpp"

using namespace dipnet;
namespace fs = std::filesystem;

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool image_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".png" || e == ".ppm" || e == ".pgm";
}

std::vector<fs::path> collect_images(const std::string& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && image_ext(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no images (.png/.ppm/.pgm) in " + dir);
  return files;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("short write: " + path);
}

int cmd_train(const std::string& cfg_path, const std::vector<std::string>& sets) {
  RunConfig rc = RunConfig::from_file(cfg_path);
  rc.apply_env();
  rc.apply_overrides(sets);
  rc.validate();
  fs::create_directories(rc.out_dir);
  write_text(rc.out_dir + "/config_resolved.cfg", rc.resolved());

  Trainer t(rc.train, rc.model, rc.data);
  std::cout << "mode " << train_mode_name(rc.train.mode) << ", " << rc.train.max_steps
            << " steps, seed " << rc.train.seed << "\n";
  std::vector<MetricRecord> recs = t.run(rc.out_dir + "/metrics.csv", rc.out_dir);

  std::cout << metric_csv_header() << "\n";
  const int64_t last = recs.empty() ? 0 : recs.back().step;
  for (const MetricRecord& r : recs)
    if (r.step == last) std::cout << metric_csv_row(r) << "\n";
  std::cout << "artifacts in " << rc.out_dir << "\n";
  return 0;
}

int cmd_denoise(const std::string& ckpt, const std::string& input, const std::string& out_dir) {
  Model<float> gen = load_generator(ckpt);
  fs::create_directories(out_dir);
  std::vector<fs::path> files;
  if (fs::is_directory(input)) files = collect_images(input);
  else files.push_back(input);

  int failures = 0;
  for (const fs::path& p : files) {
    try {
      ImageBuffer img = load_image(p.string());
      ImageBuffer out = denoise_image(gen, img);
      const std::string dst = (fs::path(out_dir) / p.filename()).string();
      save_image(out, dst, /*clip_for_display=*/true);
      std::cout << p.string() << " -> " << dst << "\n";
    } catch (const Error& e) {
      ++failures;
      std::cerr << "error: " << p.string() << ": " << e.what() << "\n";
    }
  }
  return failures ? 2 : 0;
}

int cmd_eval(const std::string& ckpt, const std::string& images, std::vector<double> sigmas,
             uint64_t seed, const std::string& out_csv) {
  Model<float> gen = load_generator(ckpt);
  std::vector<ImageBuffer> testset;
  for (const fs::path& p : collect_images(images)) testset.push_back(load_image(p.string()));

  std::vector<SweepRow> rows = noise_sensitivity_sweep(gen, testset, std::move(sigmas), seed);
  std::string csv = "sigma,psnr_db,ssim\n";
  double ap = 0, as = 0;
  for (const SweepRow& r : rows) {
    csv += g17(r.sigma) + "," + g17(r.psnr_db) + "," + g17(r.ssim) + "\n";
    ap += r.psnr_db;
    as += r.ssim;
  }
  csv += "average," + g17(ap / double(rows.size())) + "," + g17(as / double(rows.size())) + "\n";
  std::cout << csv;
  if (!out_csv.empty()) write_text(out_csv, csv);
  return 0;
}

int cmd_sweep(const std::string& ckpt, const std::string& images, double lo, double hi, int steps,
              uint64_t seed, const std::string& out_csv) {
  if (!(lo > 0) || !(hi > lo)) throw ConfigError("sweep needs 0 < sigma_min < sigma_max");
  if (steps < 1) throw ConfigError("sweep needs steps >= 1");
  Model<float> gen = load_generator(ckpt);
  std::vector<ImageBuffer> testset;
  for (const fs::path& p : collect_images(images)) testset.push_back(load_image(p.string()));

  std::vector<double> sigmas;
  for (int i = 0; i < steps; ++i)
    sigmas.push_back(steps == 1 ? lo : lo + (hi - lo) * double(i) / double(steps - 1));
  std::vector<SweepRow> rows = noise_sensitivity_sweep(gen, testset, std::move(sigmas), seed);
  std::string csv = "sigma,psnr_db,ssim\n";
  for (const SweepRow& r : rows)
    csv += g17(r.sigma) + "," + g17(r.psnr_db) + "," + g17(r.ssim) + "\n";
  std::cout << csv;
  if (!out_csv.empty()) write_text(out_csv, csv);
  return 0;
}

int cmd_gradcheck(const std::string& scope) {
  if (scope != "primitives" && scope != "blocks" && scope != "end2end" && scope != "all")
    throw ConfigError("unknown gradcheck scope '" + scope +
                      "' (expected primitives, blocks, end2end, or all)");
  std::vector<GradCheckCase> cases;
  auto append = [&](std::vector<GradCheckCase> v) {
    for (auto& c : v) cases.push_back(std::move(c));
  };
  if (scope == "primitives" || scope == "all") append(gradcheck_primitive_cases());
  if (scope == "blocks" || scope == "all") append(gradcheck_block_cases());
  if (scope == "end2end" || scope == "all") append(gradcheck_end2end_cases());

  bool ok = true;
  for (const GradCheckReport& r : run_gradcheck_cases(cases)) {
    std::printf("%-44s max_rel_err %.3e  (%lld coords, %lld kink-excluded)  %s\n", r.name.c_str(),
                r.max_rel_err, (long long)r.checked, (long long)r.excluded,
                r.pass ? "PASS" : "FAIL");
    ok = ok && r.pass;
  }
  if (!ok) {
    std::cout << "gradient check FAILED\n";
    return 2;
  }
  std::cout << "all gradient checks passed (tolerance " << kGradCheckTol << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"blind image denoiser: residual transform net with local/global fusion"};
  app.require_subcommand(1);

  std::string cfg_path;
  std::vector<std::string> sets;
  CLI::App* train = app.add_subcommand("train", "train per a key=value config file");
  train->add_option("--config", cfg_path, "run configuration file")->required();
  train->add_option("--set", sets, "override a config key, key=value (repeatable)");

  std::string ckpt, input, out_dir;
  CLI::App* denoise = app.add_subcommand("denoise", "denoise an image or directory");
  denoise->add_option("--ckpt", ckpt, "training checkpoint")->required();
  denoise->add_option("--input", input, "image file or directory")->required();
  denoise->add_option("--out", out_dir, "output directory")->required();

  std::string ev_ckpt, ev_images, ev_out;
  std::vector<double> ev_sigmas{15, 25, 35, 50, 75};
  uint64_t ev_seed = 0;
  CLI::App* eval = app.add_subcommand("eval", "PSNR/SSIM at fixed noise levels");
  eval->add_option("--ckpt", ev_ckpt, "training checkpoint")->required();
  eval->add_option("--images", ev_images, "directory of clean images")->required();
  eval->add_option("--sigmas", ev_sigmas, "noise levels (0-255 scale)");
  eval->add_option("--seed", ev_seed, "evaluation noise seed");
  eval->add_option("--out", ev_out, "also write the CSV here");

  std::string sw_ckpt, sw_images, sw_out;
  double sw_lo = 5, sw_hi = 100;
  int sw_steps = 20;
  uint64_t sw_seed = 0;
  CLI::App* sweep = app.add_subcommand("sweep", "noise-level sensitivity curve");
  sweep->add_option("--ckpt", sw_ckpt, "training checkpoint")->required();
  sweep->add_option("--images", sw_images, "directory of clean images")->required();
  sweep->add_option("--sigma-min", sw_lo, "lowest sigma");
  sweep->add_option("--sigma-max", sw_hi, "highest sigma");
  sweep->add_option("--steps", sw_steps, "number of evenly spaced sigmas");
  sweep->add_option("--seed", sw_seed, "evaluation noise seed");
  sweep->add_option("--out", sw_out, "also write the CSV here");

  std::string scope = "all";
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gradcheck->add_option("scope", scope, "primitives, blocks, end2end, or all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // usage problems are config errors
  }

  try {
    if (*train) return cmd_train(cfg_path, sets);
    if (*denoise) return cmd_denoise(ckpt, input, out_dir);
    if (*eval) return cmd_eval(ev_ckpt, ev_images, ev_sigmas, ev_seed, ev_out);
    if (*sweep) return cmd_sweep(sw_ckpt, sw_images, sw_lo, sw_hi, sw_steps, sw_seed, sw_out);
    if (*gradcheck) return cmd_gradcheck(scope);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
