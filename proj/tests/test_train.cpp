#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dipnet/error.hpp"
#include "dipnet/metrics.hpp"
#include "dipnet/train.hpp"

using namespace dipnet;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_model(int classes) {
  ModelConfig c;
  c.base_channels = 4;
  c.low_level_blocks = 1;
  c.local_blocks = 1;
  c.global_fc_width = 6;
  c.num_noise_classes = classes;
  c.feat_disc_channels = 6;
  c.feat_disc_fc_width = 6;
  c.pixel_disc_channels = {4, 6, 8};
  c.extractor_channels = {3, 4, 6};
  return c;
}

DatasetSpec micro_data() {
  DatasetSpec d;
  d.synth_seed = 5;
  d.synth_count = 4;
  d.synth_size = 24;
  d.patch_size = 12;
  d.sigma_set = {15, 75};
  d.seed = 11;
  return d;
}

TrainConfig micro_train(TrainMode m) {
  TrainConfig t;
  t.mode = m;
  t.fixed_sigma = 25.0;
  t.batch_size = 2;
  t.max_steps = 6;
  t.lr0 = 1e-3;
  t.metric_cadence = 3;
  t.eval_images = 2;
  t.probe_samples = 4;
  t.seed = 21;
  return t;
}

std::vector<Tensor<float>> snap_params(const Model<float>& m) {
  std::vector<Tensor<float>> out;
  for (const auto& p : m.params()) out.push_back(p->value);
  return out;
}

struct StatsSnap {
  std::vector<Tensor<float>> mean, var;
  std::vector<int64_t> updates;
};

StatsSnap snap_stats(const Model<float>& m) {
  StatsSnap s;
  for (const auto& st : m.all_stats()) {
    s.mean.push_back(st->mean);
    s.var.push_back(st->var);
    s.updates.push_back(st->updates);
  }
  return s;
}

bool params_equal(const std::vector<Tensor<float>>& a, const Model<float>& m) {
  const auto& ps = m.params();
  if (a.size() != ps.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (!a[i].same_values(ps[i]->value)) return false;
  return true;
}

bool stats_equal(const StatsSnap& a, const Model<float>& m) {
  const auto& ss = m.all_stats();
  if (a.mean.size() != ss.size()) return false;
  for (size_t i = 0; i < ss.size(); ++i) {
    if (!a.mean[i].same_values(ss[i]->mean)) return false;
    if (!a.var[i].same_values(ss[i]->var)) return false;
    if (a.updates[i] != ss[i]->updates) return false;
  }
  return true;
}

bool moments_equal(const std::vector<Tensor<float>>& a, std::vector<Tensor<float>>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (!a[i].same_values(b[i])) return false;
  return true;
}

bool records_match(const std::vector<MetricRecord>& a, const std::vector<MetricRecord>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const MetricRecord &x = a[i], &y = b[i];
    if (x.step != y.step || x.sigma != y.sigma || x.psnr_db != y.psnr_db || x.ssim != y.ssim ||
        x.l1 != y.l1 || x.prior_loss != y.prior_loss || x.hdiv != y.hdiv || x.lr != y.lr)
      return false;  // wall_s deliberately ignored
  }
  return true;
}

fs::path tmp_dir(const std::string& leaf) {
  fs::path d = fs::temp_directory_path() / leaf;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("mode names and config validation") {
  CHECK(train_mode_from_name("s") == TrainMode::S);
  CHECK(train_mode_from_name("B") == TrainMode::B);
  CHECK(train_mode_from_name("bf") == TrainMode::BF);
  CHECK(train_mode_from_name("BP") == TrainMode::BP);
  CHECK_THROWS_AS(train_mode_from_name("sb"), ConfigError);
  for (TrainMode m : {TrainMode::S, TrainMode::B, TrainMode::BF, TrainMode::BP})
    CHECK(train_mode_from_name(train_mode_name(m)) == m);

  TrainConfig t = micro_train(TrainMode::S);
  CHECK_NOTHROW(t.validate());
  TrainConfig bad = t;
  bad.lr0 = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.metric_cadence = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.fixed_sigma = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.lambda1 = -0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.mode = TrainMode::B;
  bad.fixed_sigma = 0;  // only mode s cares
  CHECK_NOTHROW(bad.validate());

  // the feature-prior mode requires one classifier head per sigma class
  CHECK_THROWS_AS(Trainer(micro_train(TrainMode::BF), micro_model(5), micro_data()), ConfigError);
}

TEST_CASE("metric csv formatting round trips") {
  CHECK(metric_csv_header() == "step,sigma,psnr_db,ssim,l1,prior_loss,hdiv,lr,wall_s");

  MetricRecord r{250, 25.0, 28.1234567890123456, 0.91, 0.03125, 1.5, 0.25, 5e-4, 12.5};
  std::string row = metric_csv_row(r);
  CHECK(row.substr(0, 7) == "250,25,");
  CHECK(std::count(row.begin(), row.end(), ',') == 8);
  // %.17g keeps doubles bit-exact through the text round trip
  CHECK(std::stod(row.substr(row.find("28."))) == r.psnr_db);

  fs::path dir = tmp_dir("dipnet_train_csv");
  std::string path = (dir / "m.csv").string();
  write_metrics_csv({r, r}, path);
  std::ifstream f(path);
  std::string l0, l1, l2, extra;
  REQUIRE(bool(std::getline(f, l0)));
  REQUIRE(bool(std::getline(f, l1)));
  REQUIRE(bool(std::getline(f, l2)));
  CHECK_FALSE(bool(std::getline(f, extra)));
  CHECK(l0 == metric_csv_header());
  CHECK(l1 == row);
  CHECK(l2 == row);

  CHECK_THROWS_AS(write_metrics_csv({r}, (dir / "no_such" / "m.csv").string()), IoError);
}

TEST_CASE("fixed-sigma training runs and repeats bitwise") {
  TrainConfig tc = micro_train(TrainMode::S);
  Trainer a(tc, micro_model(2), micro_data());
  std::vector<MetricRecord> ra = a.run();
  REQUIRE(ra.size() == 2);  // cadence 3, 6 steps, one sigma
  CHECK(ra[0].step == 3);
  CHECK(ra[1].step == 6);
  CHECK(a.step() == 6);
  for (const MetricRecord& r : ra) {
    CHECK(r.sigma == 25.0);
    CHECK(std::isfinite(r.psnr_db));
    CHECK(r.psnr_db > 0);
    CHECK(r.ssim >= -1.0);  // a near-untrained net can emit anti-correlated texture
    CHECK(r.ssim <= 1.0);
    CHECK(r.l1 > 0);
    CHECK(r.prior_loss == 0.0);  // no prior term in mode s
    CHECK(r.hdiv == 0.0);
    CHECK(r.wall_s >= 0.0);
  }
  CHECK(ra[0].lr == cosine_lr(2, 6, tc.lr0));
  CHECK(ra[1].lr == cosine_lr(5, 6, tc.lr0));

  Trainer b(tc, micro_model(2), micro_data());
  std::vector<MetricRecord> rb = b.run();
  CHECK(records_match(ra, rb));
}

TEST_CASE("blind-set records carry one row per sigma with shared columns") {
  TrainConfig tc = micro_train(TrainMode::B);
  tc.max_steps = 3;
  Trainer t(tc, micro_model(2), micro_data());
  std::vector<MetricRecord> r = t.run();
  REQUIRE(r.size() == 2);  // one emission, sigma set {15, 75}
  CHECK(r[0].sigma == 15.0);
  CHECK(r[1].sigma == 75.0);
  CHECK(r[0].step == r[1].step);
  CHECK(r[0].l1 == r[1].l1);
  CHECK(r[0].hdiv == 0.0);  // no domain classifier outside the feature-prior mode
  CHECK(r[0].lr == r[1].lr);
  CHECK(r[0].psnr_db != r[1].psnr_db);  // different noise levels really evaluated
}

TEST_CASE("feature-prior step trains generator and feature discriminator together") {
  TrainConfig tc = micro_train(TrainMode::BF);
  Trainer t(tc, micro_model(2), micro_data());
  auto g0 = snap_params(t.generator());
  auto d0 = snap_params(t.feature_disc());
  t.train_step();
  CHECK_FALSE(params_equal(g0, t.generator()));
  CHECK_FALSE(params_equal(d0, t.feature_disc()));
  CHECK(t.gen_opt().step_count() == 1);

  // prior column reports the mean raw cross entropy, not the weighted term
  tc.max_steps = 3;
  Trainer t2(tc, micro_model(2), micro_data());
  auto r = t2.run();
  REQUIRE(!r.empty());
  CHECK(r[0].prior_loss > 0.0);
}

TEST_CASE("grl warm-up gates the reversal, nothing else") {
  TrainConfig on = micro_train(TrainMode::BF);
  on.max_steps = 4;
  on.metric_cadence = 2;
  on.lambda_grl = 40;
  on.grl_warmup = 100;  // longer than the run: reversal never engages
  TrainConfig off = on;
  off.lambda_grl = 0;
  off.grl_warmup = 0;
  auto ra = Trainer(on, micro_model(2), micro_data()).run();
  auto rb = Trainer(off, micro_model(2), micro_data()).run();
  CHECK(records_match(ra, rb));

  on.grl_warmup = 2;  // engages halfway through
  auto rc = Trainer(on, micro_model(2), micro_data()).run();
  REQUIRE(rc.size() == 4);  // two emissions, two sigma rows each
  CHECK(records_match({rc[0], rc[1]}, {ra[0], ra[1]}));  // identical before the gate opens
  CHECK(rc[2].psnr_db != ra[2].psnr_db);                 // different after
}

TEST_CASE("pixel-prior substeps touch disjoint parameter sets") {
  TrainConfig tc = micro_train(TrainMode::BP);
  tc.max_steps = 20;
  Trainer t(tc, micro_model(2), micro_data());

  for (int i = 0; i < 2; ++i) t.train_step();  // get past the all-zero-moment start

  Batch b = t.train_batch(t.step());

  auto gp = snap_params(t.generator());
  auto gs = snap_stats(t.generator());
  auto gm1 = t.gen_opt().moments1();
  auto gm2 = t.gen_opt().moments2();
  int64_t gsteps = t.gen_opt().step_count();
  auto dp0 = snap_params(t.pixel_disc());
  StepLosses dl = t.bp_disc_substep(b);

  // discriminator moved, generator untouched in every observable way
  CHECK(dl.prior > 0.0);
  CHECK_FALSE(params_equal(dp0, t.pixel_disc()));
  CHECK(params_equal(gp, t.generator()));
  CHECK(stats_equal(gs, t.generator()));
  CHECK(moments_equal(gm1, t.gen_opt().moments1()));
  CHECK(moments_equal(gm2, t.gen_opt().moments2()));
  CHECK(t.gen_opt().step_count() == gsteps);
  CHECK(t.disc_opt().step_count() == 3);

  auto dp = snap_params(t.pixel_disc());
  auto ds = snap_stats(t.pixel_disc());
  auto dm1 = t.disc_opt().moments1();
  auto dm2 = t.disc_opt().moments2();
  StepLosses gl = t.bp_gen_substep(b);

  CHECK(gl.l1 > 0.0);
  CHECK_FALSE(params_equal(gp, t.generator()));
  CHECK_FALSE(stats_equal(gs, t.generator()));  // generator stats update in its own substep
  CHECK(t.gen_opt().step_count() == gsteps + 1);
  CHECK(params_equal(dp, t.pixel_disc()));
  CHECK(stats_equal(ds, t.pixel_disc()));  // frozen while the generator trains
  CHECK(moments_equal(dm1, t.disc_opt().moments1()));
  CHECK(moments_equal(dm2, t.disc_opt().moments2()));
  CHECK(t.disc_opt().step_count() == 3);
}

TEST_CASE("divergence guard reports the failing step") {
  TrainConfig tc = micro_train(TrainMode::S);
  Trainer t(tc, micro_model(2), micro_data());
  t.train_step();
  t.generator().params()[0]->value.data()[0] = std::nanf("");
  try {
    t.run();
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("diverged at step 1") != std::string::npos);
  }
}

TEST_CASE("checkpoint resume reproduces the uninterrupted tail bitwise") {
  fs::path dir = tmp_dir("dipnet_train_resume");
  TrainConfig tc = micro_train(TrainMode::S);
  tc.max_steps = 8;
  tc.metric_cadence = 2;

  Trainer a(tc, micro_model(2), micro_data());
  std::vector<MetricRecord> ra = a.run("", dir.string());
  REQUIRE(ra.size() == 4);
  for (int s : {2, 4, 6, 8}) CHECK(fs::exists(dir / ("ckpt_" + std::to_string(s) + ".bin")));

  Trainer b(tc, micro_model(2), micro_data());
  b.restore((dir / "ckpt_4.bin").string());
  CHECK(b.step() == 4);
  std::vector<MetricRecord> rb = b.run();
  REQUIRE(rb.size() == 2);
  CHECK(records_match({ra[2], ra[3]}, rb));

  // a config change invalidates the fingerprint
  TrainConfig other = tc;
  other.lr0 = 2e-3;
  Trainer c(other, micro_model(2), micro_data());
  CHECK_THROWS_AS(c.restore((dir / "ckpt_4.bin").string()), ConfigError);
}

TEST_CASE("sweep rows are sigma-sorted and composition independent") {
  TrainConfig tc = micro_train(TrainMode::S);
  Trainer t(tc, micro_model(2), micro_data());
  for (int i = 0; i < 3; ++i) t.train_step();  // prime BN running stats

  std::vector<ImageBuffer> testset(t.dataset().images().begin(),
                                   t.dataset().images().begin() + 2);
  auto rows = noise_sensitivity_sweep(t.generator(), testset, {75, 15, 35}, 99);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].sigma == 15.0);
  CHECK(rows[1].sigma == 35.0);
  CHECK(rows[2].sigma == 75.0);
  for (const SweepRow& r : rows) {
    CHECK(std::isfinite(r.psnr_db));
    CHECK(r.ssim >= -1.0);
    CHECK(r.ssim <= 1.0);
  }

  // a sigma's row does not depend on which other sigmas were swept
  auto solo = noise_sensitivity_sweep(t.generator(), testset, {35}, 99);
  REQUIRE(solo.size() == 1);
  CHECK(solo[0].psnr_db == rows[1].psnr_db);
  CHECK(solo[0].ssim == rows[1].ssim);

  CHECK_THROWS_AS(noise_sensitivity_sweep(t.generator(), {}, {25}, 99), ConfigError);
  CHECK_THROWS_AS(noise_sensitivity_sweep(t.generator(), testset, {}, 99), ConfigError);
  CHECK_THROWS_AS(noise_sensitivity_sweep(t.generator(), testset, {25, -5}, 99), ConfigError);

  // denoising preserves geometry
  ImageBuffer out = denoise_image(t.generator(), testset[0]);
  CHECK(out.height == testset[0].height);
  CHECK(out.width == testset[0].width);
  CHECK(out.channels == testset[0].channels);
}

TEST_CASE("single-sigma sweep equals a plain evaluation") {
  TrainConfig tc = micro_train(TrainMode::S);
  Trainer t(tc, micro_model(2), micro_data());
  for (int i = 0; i < 3; ++i) t.train_step();

  auto [p, s] = t.evaluate_sigma(25.0);
  std::vector<ImageBuffer> testset(t.dataset().images().begin(),
                                   t.dataset().images().begin() + tc.eval_images);
  auto rows = noise_sensitivity_sweep(t.generator(), testset, {25.0}, tc.seed);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].psnr_db == p);
  CHECK(rows[0].ssim == s);
}

TEST_CASE("domain probe separates separable clouds and not identical ones") {
  auto cloud = [](double cx, double cy, int n, uint64_t seed, int label) {
    ProbeSet s;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
      s.x.push_back({cx + rng.normal(0, 0.5), cy + rng.normal(0, 0.5)});
      s.y.push_back(label);
    }
    return s;
  };
  auto merge = [](ProbeSet a, const ProbeSet& b) {
    a.x.insert(a.x.end(), b.x.begin(), b.x.end());
    a.y.insert(a.y.end(), b.y.begin(), b.y.end());
    return a;
  };

  ProbeSet tr = merge(cloud(-3, -3, 64, 101, 0), cloud(3, 3, 64, 102, 1));
  ProbeSet te = merge(cloud(-3, -3, 256, 103, 0), cloud(3, 3, 256, 104, 1));
  ProbeResult sep = train_domain_probe(tr, te, 2);
  CHECK(sep.held_out_accuracy >= 0.95);
  CHECK(sep.hdiv.clamped >= 1.9);
  CHECK(sep.hdiv.clamped <= 2.0);

  // same distribution for both labels: nothing to find
  ProbeSet tr0 = merge(cloud(0, 0, 64, 201, 0), cloud(0, 0, 64, 202, 1));
  ProbeSet te0 = merge(cloud(0, 0, 512, 203, 0), cloud(0, 0, 512, 204, 1));
  ProbeResult same = train_domain_probe(tr0, te0, 2);
  CHECK(std::abs(same.hdiv.clamped) <= 0.15);
  CHECK(same.held_out_accuracy < 0.65);

  CHECK_THROWS_AS(train_domain_probe(tr, te, 1), ConfigError);
  CHECK_THROWS_AS(train_domain_probe(ProbeSet{}, te, 2), ConfigError);
  ProbeSet ragged = tr;
  ragged.x[1] = {1.0};
  CHECK_THROWS_AS(train_domain_probe(ragged, te, 2), ShapeError);
  ProbeSet badlabel = tr;
  badlabel.y[0] = 7;
  CHECK_THROWS_AS(train_domain_probe(badlabel, te, 2), ConfigError);
}

TEST_CASE("trainer domain probe scores the live discriminator on held-out draws") {
  TrainConfig tc = micro_train(TrainMode::BF);
  Trainer t(tc, micro_model(2), micro_data());
  for (int i = 0; i < 2; ++i) t.train_step();
  ProbeResult r = t.domain_probe(8);
  CHECK(std::isfinite(r.hdiv.clamped));
  CHECK(r.hdiv.clamped >= -2.0);
  CHECK(r.hdiv.clamped <= 2.0);
  CHECK(r.held_out_accuracy >= 0.0);
  CHECK(r.held_out_accuracy <= 1.0);
  // deterministic: probing twice at the same step gives the same answer
  ProbeResult r2 = t.domain_probe(8);
  CHECK(r.hdiv.clamped == r2.hdiv.clamped);
  CHECK(r.held_out_accuracy == r2.held_out_accuracy);

  // the probe is the training-time classifier; other modes have none
  Trainer s(micro_train(TrainMode::S), micro_model(2), micro_data());
  s.train_step();
  CHECK_THROWS_AS(s.domain_probe(8), ConfigError);
}
