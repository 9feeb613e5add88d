#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dipnet/checkpoint.hpp"
#include "dipnet/data.hpp"
#include "dipnet/losses.hpp"
#include "dipnet/metrics.hpp"
#include "dipnet/model.hpp"
#include "dipnet/optim.hpp"

namespace dipnet {

// S: fixed noise level, L1 only.           B: blind sampling, L1 only.
// BF: blind + feature-level alignment prior (reversal layer, one backward
//     updates transform net and feature discriminator together).
// BP: blind + pixel-level adversarial prior (alternating 1:1 discriminator /
//     generator steps per batch).
enum class TrainMode { S, B, BF, BP };

TrainMode train_mode_from_name(const std::string& name);
std::string train_mode_name(TrainMode m);

struct TrainConfig {
  TrainMode mode = TrainMode::S;
  double fixed_sigma = 25.0;  // mode S only
  int batch_size = 8;
  int64_t max_steps = 2000;
  double lr0 = 1e-3;
  double lambda1 = 1e-3;      // feature-prior weight
  double lambda2 = 1e-3;      // pixel-prior weight
  double lambda_grl = 1.0;    // reversal strength
  int64_t grl_warmup = 0;     // steps with the reversal disabled so the domain
                              // classifier learns the unaligned features first
  AdamConfig adam;
  uint64_t seed = 0;
  int64_t metric_cadence = 250;  // metric emission / checkpoint boundary
  int eval_images = 8;           // corpus slice scored per emission
  int probe_samples = 32;        // held-out samples per domain for the divergence probe

  void validate() const;
};

struct MetricRecord {
  int64_t step = 0;
  double sigma = 0;
  double psnr_db = 0;
  double ssim = 0;
  double l1 = 0;          // mean training L1 since the previous emission
  double prior_loss = 0;  // mean raw prior term (unweighted) since previous emission
  double hdiv = 0;        // held-out divergence of the training-time domain
                          // classifier over fused features (feature-prior mode;
                          // 0 in modes without one)
  double lr = 0;
  double wall_s = 0;      // exempt from determinism comparisons
};

std::string metric_csv_header();
std::string metric_csv_row(const MetricRecord& r);
void write_metrics_csv(const std::vector<MetricRecord>& records, const std::string& path);

// --- domain probe -------------------------------------------------------------
// Generic classifier-induced divergence: train a softmax-linear classifier
// (full-batch gradient descent on standardized inputs) and score held-out
// samples.  This standalone probe calibrates the estimator on synthetic
// clouds; the trainer's own diagnostic instead reuses the training-time
// feature discriminator (no separate probe model).
struct ProbeSet {
  std::vector<std::vector<double>> x;
  std::vector<int> y;  // in [0, classes)
};

struct ProbeResult {
  HDivEstimate hdiv;
  double held_out_accuracy = 0.0;
};

ProbeResult train_domain_probe(const ProbeSet& train, const ProbeSet& held_out, int classes);

// --- inference / evaluation ----------------------------------------------------
// Eval-mode forward of one image (any extents); output is NOT clamped.
ImageBuffer denoise_image(Model<float>& gen, const ImageBuffer& noisy);

struct SweepRow {
  double sigma = 0;
  double psnr_db = 0;
  double ssim = 0;
};

// Corrupt every test image at each sigma (noise derived from (seed, sigma,
// image index), so a row does not depend on which other sigmas are swept),
// denoise, clamp, and average PSNR/SSIM.  Rows come back sorted ascending by
// sigma.  Also serves plain fixed-sigma evaluation.
std::vector<SweepRow> noise_sensitivity_sweep(Model<float>& gen,
                                              const std::vector<ImageBuffer>& testset,
                                              std::vector<double> sigmas, uint64_t seed);

// Rebuild just the denoiser from a training checkpoint of any mode: the
// architecture comes out of the fingerprint, the weights out of the g. blobs.
Model<float> load_generator(const std::string& ckpt_path);

// --- trainer -------------------------------------------------------------------
struct StepLosses {
  double l1 = 0.0;
  double prior = 0.0;
};

class Trainer {
 public:
  Trainer(const TrainConfig& tc, const ModelConfig& mc, const DatasetSpec& ds);

  // Train until max_steps.  Metric records are emitted every metric_cadence
  // steps and at the final step; when ckpt_dir is nonempty a checkpoint lands
  // at every emission boundary (ckpt_<step>.bin).  Returns the records from
  // this call (a resumed run returns only the remaining ones).
  std::vector<MetricRecord> run(const std::string& csv_path = {},
                                const std::string& ckpt_dir = {});

  void train_step();
  int64_t step() const { return step_; }

  // BP halves, public so tests can audit parameter isolation between them.
  StepLosses bp_disc_substep(const Batch& b);
  StepLosses bp_gen_substep(const Batch& b);
  Batch train_batch(int64_t step) const;

  // Mean clamped PSNR/SSIM over the eval slice at one sigma.
  std::pair<double, double> evaluate_sigma(double sigma) const;
  std::vector<double> eval_sigmas() const;

  // Held-out evaluation of the training-time feature discriminator over every
  // sigma class (feature-prior mode only): per-domain 0/1 losses feed the
  // divergence estimate, probe batches use step keys disjoint from training.
  ProbeResult domain_probe(int per_domain) const;

  void save(const std::string& path) const;
  void restore(const std::string& path);
  std::string fingerprint() const;

  Model<float>& generator() { return *gen_; }
  Model<float>& feature_disc() { return *fdisc_; }
  Model<float>& pixel_disc() { return *pdisc_; }
  Adam<float>& gen_opt() { return *opt_; }
  Adam<float>& disc_opt() { return *disc_opt_; }
  const Dataset& dataset() const { return data_; }
  const TrainConfig& config() const { return tc_; }

 private:
  StepLosses s_or_b_step(const Batch& b);
  StepLosses bf_step(const Batch& b);
  void emit(std::vector<MetricRecord>& out,
            const std::chrono::steady_clock::time_point& start);

  TrainConfig tc_;
  ModelConfig mc_;
  Dataset data_;
  std::unique_ptr<Model<float>> gen_;
  std::unique_ptr<Model<float>> fdisc_;      // BF
  std::unique_ptr<Model<float>> extractor_;  // BP
  std::unique_ptr<Model<float>> pdisc_;      // BP
  std::unique_ptr<Adam<float>> opt_;         // transform net (S/B/BP) or union (BF)
  std::unique_ptr<Adam<float>> disc_opt_;    // BP only
  int64_t step_ = 0;
  double l1_sum_ = 0.0, prior_sum_ = 0.0;
  int64_t loss_n_ = 0;
};

}  // namespace dipnet
