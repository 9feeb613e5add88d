#include "dipnet/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "dipnet/error.hpp"

namespace dipnet {

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Noise for scoring is derived from (seed, sigma value, image index), never
// from list position, so a sigma's row does not depend on its neighbours.
Rng eval_rng(uint64_t seed, double sigma, int64_t i) {
  return Rng(Rng::mix(Rng::mix(seed, 0xe7a10001ULL),
                      Rng::mix(std::bit_cast<uint64_t>(sigma), uint64_t(i))));
}

// probe batches live far above any reachable training-step key
int64_t probe_key(int64_t step, int domain) {
  return (int64_t(1) << 40) + step * 16 + domain;
}

constexpr ForwardOptions kTrainUpdate{BnMode::Train, true, false};
constexpr ForwardOptions kTrainFrozenStats{BnMode::Train, false, false};
constexpr ForwardOptions kFrozenDisc{BnMode::Train, false, true};
constexpr ForwardOptions kEval{BnMode::Eval, false, false};

}  // namespace

TrainMode train_mode_from_name(const std::string& name) {
  std::string n;
  for (char c : name) n.push_back(char(std::tolower(uint8_t(c))));
  if (n == "s") return TrainMode::S;
  if (n == "b") return TrainMode::B;
  if (n == "bf") return TrainMode::BF;
  if (n == "bp") return TrainMode::BP;
  throw ConfigError("unknown training mode '" + name + "' (expected s, b, bf, or bp)");
}

std::string train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::S: return "s";
    case TrainMode::B: return "b";
    case TrainMode::BF: return "bf";
    case TrainMode::BP: return "bp";
  }
  throw Error("unreachable train mode");
}

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("lr0 must be positive");
  if (lambda1 < 0 || lambda2 < 0 || lambda_grl < 0)
    throw ConfigError("lambda weights must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (metric_cadence < 1) throw ConfigError("metric_cadence must be >= 1");
  if (grl_warmup < 0) throw ConfigError("grl_warmup must be >= 0");
  if (mode == TrainMode::S && !(fixed_sigma > 0))
    throw ConfigError("mode s carries a fixed sigma; it must be positive");
  if (eval_images < 1) throw ConfigError("eval_images must be >= 1");
  if (probe_samples < 2) throw ConfigError("probe_samples must be >= 2");
}

std::string metric_csv_header() { return "step,sigma,psnr_db,ssim,l1,prior_loss,hdiv,lr,wall_s"; }

std::string metric_csv_row(const MetricRecord& r) {
  return std::to_string(r.step) + "," + g17(r.sigma) + "," + g17(r.psnr_db) + "," + g17(r.ssim) +
         "," + g17(r.l1) + "," + g17(r.prior_loss) + "," + g17(r.hdiv) + "," + g17(r.lr) + "," +
         g17(r.wall_s);
}

void write_metrics_csv(const std::vector<MetricRecord>& records, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write metrics csv " + path);
  f << metric_csv_header() << '\n';
  for (const MetricRecord& r : records) f << metric_csv_row(r) << '\n';
  if (!f) throw IoError("short metrics write: " + path);
}

// --- domain probe -------------------------------------------------------------

ProbeResult train_domain_probe(const ProbeSet& train, const ProbeSet& held_out, int classes) {
  if (classes < 2) throw ConfigError("probe: need at least two classes");
  if (train.x.empty() || held_out.x.empty()) throw ConfigError("probe: empty split");
  if (train.x.size() != train.y.size() || held_out.x.size() != held_out.y.size())
    throw ShapeError("probe: feature/label count mismatch");
  const size_t d = train.x[0].size();
  auto check = [&](const ProbeSet& s) {
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (s.x[i].size() != d) throw ShapeError("probe: ragged feature vectors");
      if (s.y[i] < 0 || s.y[i] >= classes) throw ConfigError("probe: label out of range");
    }
  };
  check(train);
  check(held_out);

  // standardize by training statistics
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (const auto& v : train.x)
    for (size_t j = 0; j < d; ++j) mu[j] += v[j];
  for (double& m : mu) m /= double(train.x.size());
  for (const auto& v : train.x)
    for (size_t j = 0; j < d; ++j) sd[j] += (v[j] - mu[j]) * (v[j] - mu[j]);
  for (double& s : sd) s = std::sqrt(s / double(train.x.size()) + 1e-12);

  auto standardize = [&](const std::vector<std::vector<double>>& xs) {
    std::vector<std::vector<double>> out(xs.size(), std::vector<double>(d));
    for (size_t i = 0; i < xs.size(); ++i)
      for (size_t j = 0; j < d; ++j) out[i][j] = (xs[i][j] - mu[j]) / sd[j];
    return out;
  };
  const auto xtr = standardize(train.x);
  const auto xte = standardize(held_out.x);

  // full-batch gradient descent on softmax cross entropy, small ridge term
  const int iters = 400;
  const double lr = 0.5, ridge = 1e-2;
  const size_t m = size_t(classes), n = xtr.size();
  std::vector<double> w(d * m, 0.0), b(m, 0.0);
  std::vector<double> z(m), p(m), gw(d * m), gb(m);
  for (int it = 0; it < iters; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (size_t i = 0; i < n; ++i) {
      double zmax = -1e300;
      for (size_t k = 0; k < m; ++k) {
        z[k] = b[k];
        for (size_t j = 0; j < d; ++j) z[k] += xtr[i][j] * w[j * m + k];
        zmax = std::max(zmax, z[k]);
      }
      double denom = 0;
      for (size_t k = 0; k < m; ++k) denom += (p[k] = std::exp(z[k] - zmax));
      for (size_t k = 0; k < m; ++k) {
        double delta = (p[k] / denom - (int(k) == train.y[i] ? 1.0 : 0.0)) / double(n);
        gb[k] += delta;
        for (size_t j = 0; j < d; ++j) gw[j * m + k] += xtr[i][j] * delta;
      }
    }
    for (size_t q = 0; q < w.size(); ++q) w[q] -= lr * (gw[q] + ridge * w[q]);
    for (size_t k = 0; k < m; ++k) b[k] -= lr * gb[k];
  }

  // held-out 0-1 losses, per domain and overall
  std::vector<double> errors(m, 0.0), counts(m, 0.0);
  double wrong = 0;
  for (size_t i = 0; i < xte.size(); ++i) {
    size_t best = 0;
    double bestz = -1e300;
    for (size_t k = 0; k < m; ++k) {
      double zk = b[k];
      for (size_t j = 0; j < d; ++j) zk += xte[i][j] * w[j * m + k];
      if (zk > bestz) {
        bestz = zk;
        best = k;
      }
    }
    const size_t truth = size_t(held_out.y[i]);
    counts[truth] += 1.0;
    if (best != truth) {
      errors[truth] += 1.0;
      wrong += 1.0;
    }
  }
  std::vector<double> per_domain(m, 0.0);
  for (size_t k = 0; k < m; ++k) {
    if (counts[k] == 0) throw ConfigError("probe: a domain has no held-out samples");
    per_domain[k] = errors[k] / counts[k];
  }
  ProbeResult r;
  r.hdiv = h_divergence_estimate(per_domain);
  r.held_out_accuracy = 1.0 - wrong / double(xte.size());
  return r;
}

// --- inference / evaluation ----------------------------------------------------

ImageBuffer denoise_image(Model<float>& gen, const ImageBuffer& noisy) {
  Graph<float> g;
  auto out = forward_denoise(g, gen, g.constant(batch_from_image(noisy)), kEval);
  return image_from_batch(g.value(out.denoised), 0);
}

std::vector<SweepRow> noise_sensitivity_sweep(Model<float>& gen,
                                              const std::vector<ImageBuffer>& testset,
                                              std::vector<double> sigmas, uint64_t seed) {
  if (testset.empty()) throw ConfigError("sweep: empty test set");
  if (sigmas.empty()) throw ConfigError("sweep: no sigma values");
  for (double s : sigmas)
    if (!(s > 0)) throw ConfigError("sweep: sigma values must be positive");
  std::sort(sigmas.begin(), sigmas.end());

  std::vector<SweepRow> rows;
  for (double sigma : sigmas) {
    double ps = 0, ss = 0;
    for (size_t i = 0; i < testset.size(); ++i) {
      Rng rng = eval_rng(seed, sigma, int64_t(i));
      ImageBuffer noisy = add_awgn(testset[i], sigma, rng);
      ImageBuffer den = clamp01(denoise_image(gen, noisy));
      ps += psnr(den, testset[i]);
      ss += ssim(den, testset[i]);
    }
    rows.push_back({sigma, ps / double(testset.size()), ss / double(testset.size())});
  }
  return rows;
}

Model<float> load_generator(const std::string& ckpt_path) {
  CheckpointData d = load_checkpoint(ckpt_path);
  const auto cut = d.fingerprint.find('|');
  if (cut == std::string::npos)
    throw ConfigError("checkpoint fingerprint has no model descriptor: " + d.fingerprint);
  ModelConfig mc = ModelConfig::from_descriptor(d.fingerprint.substr(0, cut));
  Model<float> gen = build_transform_net<float>(mc, 0);
  unpack_model(d, "g.", gen);
  return gen;
}

// --- trainer -------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& tc, const ModelConfig& mc, const DatasetSpec& ds)
    : tc_(tc), mc_(mc), data_(Dataset::open(ds)) {
  tc_.validate();
  mc_.validate();
  if (tc_.mode == TrainMode::BF && mc_.num_noise_classes != int(ds.sigma_set.size()))
    throw ConfigError("feature-prior training needs num_noise_classes == sigma_set size (" +
                      std::to_string(mc_.num_noise_classes) + " vs " +
                      std::to_string(ds.sigma_set.size()) + ")");

  gen_ = std::make_unique<Model<float>>(build_transform_net<float>(mc_, Rng::mix(tc_.seed, 1)));
  if (tc_.mode == TrainMode::BF) {
    fdisc_ = std::make_unique<Model<float>>(
        build_feature_discriminator<float>(mc_, Rng::mix(tc_.seed, 2)));
    auto ptrs = gen_->param_ptrs();
    auto dp = fdisc_->param_ptrs();
    ptrs.insert(ptrs.end(), dp.begin(), dp.end());
    opt_ = std::make_unique<Adam<float>>(std::move(ptrs), tc_.adam);
  } else {
    opt_ = std::make_unique<Adam<float>>(gen_->param_ptrs(), tc_.adam);
  }
  if (tc_.mode == TrainMode::BP) {
    extractor_ = std::make_unique<Model<float>>(build_feature_extractor<float>(mc_));
    pdisc_ = std::make_unique<Model<float>>(
        build_pixel_discriminator<float>(mc_, *extractor_, Rng::mix(tc_.seed, 3)));
    disc_opt_ = std::make_unique<Adam<float>>(pdisc_->param_ptrs(), tc_.adam);
  }
}

Batch Trainer::train_batch(int64_t step) const {
  NoiseMode nm = tc_.mode == TrainMode::S ? NoiseMode::FixedSigma : NoiseMode::BlindSet;
  return data_.make_batch(tc_.batch_size, nm, tc_.fixed_sigma, step);
}

StepLosses Trainer::s_or_b_step(const Batch& b) {
  Graph<float> g;
  auto out = forward_denoise(g, *gen_, g.constant(b.noisy), kTrainUpdate);
  auto l1 = l1_loss(g, out.denoised, g.constant(b.clean));
  GradientMap<float> gm = g.backward(l1);
  opt_->step(gm, cosine_lr(step_, tc_.max_steps, tc_.lr0));
  return {double(g.value(l1).item()), 0.0};
}

StepLosses Trainer::bf_step(const Batch& b) {
  Graph<float> g;
  auto out = forward_denoise(g, *gen_, g.constant(b.noisy), kTrainUpdate);
  auto l1 = l1_loss(g, out.denoised, g.constant(b.clean));
  // during warm-up the reversal is a zero gate: the discriminator trains on
  // the prior term as usual, the transform net feels only the L1 pull
  const double grl = step_ < tc_.grl_warmup ? 0.0 : tc_.lambda_grl;
  auto logits = feature_disc_logits(g, *fdisc_, out.fused_features, grl, true, kTrainUpdate);
  auto ce = multiclass_ce_loss(g, logits, b.class_indices);
  auto total = combined_feat_loss(g, l1, ce, float(tc_.lambda1));
  GradientMap<float> gm = g.backward(total);
  opt_->step(gm, cosine_lr(step_, tc_.max_steps, tc_.lr0));
  return {double(g.value(l1).item()), double(g.value(ce).item())};
}

StepLosses Trainer::bp_disc_substep(const Batch& b) {
  // The transform net only supplies data here: batch-statistic normalization,
  // running stats untouched, and no backward ever reaches it.
  Tensor<float> xhat;
  {
    Graph<float> g;
    auto out = forward_denoise(g, *gen_, g.constant(b.noisy), kTrainFrozenStats);
    xhat = g.value(out.denoised);
  }
  Graph<float> g;
  auto fake = pixel_disc_logits(g, *pdisc_, *extractor_, g.constant(std::move(xhat)), kTrainUpdate);
  auto real = pixel_disc_logits(g, *pdisc_, *extractor_, g.constant(b.clean), kTrainUpdate);
  auto objs = adversarial_objectives(g, fake, real);
  GradientMap<float> gm = g.backward(objs.disc_loss);
  disc_opt_->step(gm, cosine_lr(step_, tc_.max_steps, tc_.lr0));
  return {0.0, double(g.value(objs.disc_loss).item())};
}

StepLosses Trainer::bp_gen_substep(const Batch& b) {
  Graph<float> g;
  auto out = forward_denoise(g, *gen_, g.constant(b.noisy), kTrainUpdate);
  auto l1 = l1_loss(g, out.denoised, g.constant(b.clean));
  // freshly updated discriminator, parameters and BN stats both frozen
  auto fake = pixel_disc_logits(g, *pdisc_, *extractor_, out.denoised, kFrozenDisc);
  auto adv = patch_bce_loss(g, fake, 0);  // push patches toward the "clear" label
  auto total = combined_pix_loss(g, l1, adv, float(tc_.lambda2));
  GradientMap<float> gm = g.backward(total);
  opt_->step(gm, cosine_lr(step_, tc_.max_steps, tc_.lr0));
  return {double(g.value(l1).item()), double(g.value(adv).item())};
}

void Trainer::train_step() {
  Batch b = train_batch(step_);
  StepLosses sl;
  switch (tc_.mode) {
    case TrainMode::S:
    case TrainMode::B: sl = s_or_b_step(b); break;
    case TrainMode::BF: sl = bf_step(b); break;
    case TrainMode::BP:
      bp_disc_substep(b);
      sl = bp_gen_substep(b);
      break;
  }
  if (!std::isfinite(sl.l1) || !std::isfinite(sl.prior))
    throw NumericError("non-finite loss at step " + std::to_string(step_) +
                       " (l1=" + g17(sl.l1) + ", prior=" + g17(sl.prior) + ")");
  l1_sum_ += sl.l1;
  prior_sum_ += sl.prior;
  ++loss_n_;
  ++step_;
}

std::vector<double> Trainer::eval_sigmas() const {
  if (tc_.mode == TrainMode::S) return {tc_.fixed_sigma};
  std::vector<double> s = data_.spec().sigma_set;
  std::sort(s.begin(), s.end());
  return s;
}

std::pair<double, double> Trainer::evaluate_sigma(double sigma) const {
  const auto& imgs = data_.images();
  const int n = int(std::min<int64_t>(tc_.eval_images, int64_t(imgs.size())));
  double ps = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    Rng rng = eval_rng(tc_.seed, sigma, i);
    ImageBuffer noisy = add_awgn(imgs[size_t(i)], sigma, rng);
    ImageBuffer den = clamp01(denoise_image(*gen_, noisy));
    ps += psnr(den, imgs[size_t(i)]);
    ss += ssim(den, imgs[size_t(i)]);
  }
  return {ps / n, ss / n};
}

ProbeResult Trainer::domain_probe(int per_domain) const {
  if (!fdisc_) throw ConfigError("domain probe needs the feature-prior training mode");
  if (per_domain < 1) throw ConfigError("domain probe needs at least one sample per domain");
  // The diagnostic classifier is the training-time discriminator itself,
  // scored on held-out draws (probe step keys never occur in training).
  const std::vector<double>& set = data_.spec().sigma_set;
  std::vector<double> per_domain_err;
  double correct = 0;
  for (int d = 0; d < int(set.size()); ++d) {
    Batch b = data_.make_batch(per_domain, NoiseMode::FixedSigma, set[size_t(d)],
                               probe_key(step_, d));
    Graph<float> g;
    auto out = forward_denoise(g, *gen_, g.constant(b.noisy), kEval);
    auto logits =
        feature_disc_logits(g, *fdisc_, out.fused_features, tc_.lambda_grl, false, kEval);
    const Tensor<float>& z = g.value(logits);
    const int64_t n = z.shape()[0], m = z.shape()[1];
    double wrong = 0;
    for (int64_t i = 0; i < n; ++i) {
      const float* row = z.data() + i * m;
      int64_t best = 0;
      for (int64_t k = 1; k < m; ++k)
        if (row[k] > row[best]) best = k;
      if (best != d) wrong += 1.0;
    }
    per_domain_err.push_back(wrong / double(n));
    correct += double(n) - wrong;
  }
  ProbeResult r;
  r.hdiv = h_divergence_estimate(per_domain_err);
  r.held_out_accuracy = correct / double(per_domain * int(set.size()));
  return r;
}

void Trainer::emit(std::vector<MetricRecord>& out,
                   const std::chrono::steady_clock::time_point& start) {
  const double l1m = loss_n_ ? l1_sum_ / double(loss_n_) : 0.0;
  const double prm = loss_n_ ? prior_sum_ / double(loss_n_) : 0.0;
  const double hd =
      tc_.mode == TrainMode::BF ? domain_probe(tc_.probe_samples).hdiv.clamped : 0.0;
  const double lr = cosine_lr(step_ - 1, tc_.max_steps, tc_.lr0);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (double sigma : eval_sigmas()) {
    auto [p, s] = evaluate_sigma(sigma);
    out.push_back(MetricRecord{step_, sigma, p, s, l1m, prm, hd, lr, wall});
  }
  l1_sum_ = prior_sum_ = 0.0;
  loss_n_ = 0;
}

std::vector<MetricRecord> Trainer::run(const std::string& csv_path, const std::string& ckpt_dir) {
  std::vector<MetricRecord> records;
  const auto start = std::chrono::steady_clock::now();
  while (step_ < tc_.max_steps) {
    try {
      train_step();
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step_) + ": " + e.what());
    }
    if (step_ % tc_.metric_cadence == 0 || step_ == tc_.max_steps) {
      emit(records, start);
      if (!ckpt_dir.empty()) save(ckpt_dir + "/ckpt_" + std::to_string(step_) + ".bin");
    }
  }
  if (!csv_path.empty()) write_metrics_csv(records, csv_path);
  return records;
}

std::string Trainer::fingerprint() const {
  const DatasetSpec& ds = data_.spec();
  std::string f = mc_.descriptor();
  f += "|mode=" + train_mode_name(tc_.mode);
  if (tc_.mode == TrainMode::S) f += "|sigma=" + g17(tc_.fixed_sigma);
  f += "|batch=" + std::to_string(tc_.batch_size) + "|steps=" + std::to_string(tc_.max_steps);
  f += "|lr0=" + g17(tc_.lr0) + "|l1=" + g17(tc_.lambda1) + "|l2=" + g17(tc_.lambda2) +
       "|grl=" + g17(tc_.lambda_grl) + "|warm=" + std::to_string(tc_.grl_warmup);
  f += "|seed=" + std::to_string(tc_.seed) + "|cadence=" + std::to_string(tc_.metric_cadence);
  f += "|patch=" + std::to_string(ds.patch_size) + "|dseed=" + std::to_string(ds.seed);
  f += "|sigmas=";
  for (size_t i = 0; i < ds.sigma_set.size(); ++i)
    f += (i ? "," : "") + g17(ds.sigma_set[i]);
  f += "|range=" + g17(ds.sigma_lo) + "-" + g17(ds.sigma_hi);
  if (ds.root.empty())
    f += "|synth=" + std::to_string(ds.synth_count) + "x" + std::to_string(ds.synth_size) + "@" +
         std::to_string(ds.synth_seed);
  else
    f += "|root=" + ds.root;
  return f;
}

void Trainer::save(const std::string& path) const {
  CheckpointData d;
  d.fingerprint = fingerprint();
  d.step = step_;
  d.rng_state = Rng(tc_.seed).serialize();
  pack_model(d, "g.", *gen_);
  if (fdisc_) pack_model(d, "fd.", *fdisc_);
  if (pdisc_) pack_model(d, "pd.", *pdisc_);
  pack_adam(d, "optg.", *opt_);
  if (disc_opt_) pack_adam(d, "optd.", *disc_opt_);
  save_checkpoint(d, path);
}

void Trainer::restore(const std::string& path) {
  CheckpointData d = load_checkpoint(path);
  require_fingerprint(d, fingerprint());
  unpack_model(d, "g.", *gen_);
  if (fdisc_) unpack_model(d, "fd.", *fdisc_);
  if (pdisc_) unpack_model(d, "pd.", *pdisc_);
  unpack_adam(d, "optg.", *opt_);
  if (disc_opt_) unpack_adam(d, "optd.", *disc_opt_);
  step_ = d.step;
  l1_sum_ = prior_sum_ = 0.0;
  loss_n_ = 0;
}

}  // namespace dipnet
