#pragma once

#include <array>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "dipnet/graph.hpp"

namespace dipnet {

enum class ModelKind { TransformNet, FeatureDisc, PixelDisc, FeatureExtractor };

std::string model_kind_name(ModelKind k);

// Architecture constants shared by the denoiser and both discriminators.
struct ModelConfig {
  int input_channels = 3;
  int base_channels = 32;
  int low_level_blocks = 16;
  int local_blocks = 2;
  int global_fc_width = 64;
  int num_noise_classes = 5;
  int feat_disc_channels = 64;
  int feat_disc_fc_width = 64;
  std::array<int, 3> pixel_disc_channels{64, 128, 256};
  std::array<int, 3> extractor_channels{16, 32, 64};
  // Optional input-image skip onto the output head, kept for ablation runs;
  // the default output predicts the clean image directly.
  bool input_image_skip = false;

  // Small variant for desk-scale training and tests.
  static ModelConfig desk();

  void validate() const;
  // Canonical key=value serialization; doubles as the checkpoint fingerprint.
  std::string descriptor() const;
  static ModelConfig from_descriptor(const std::string& s);
};

// Ordered, name-addressable parameter and BN-statistic store.  Order is the
// registration order of the builder, which is what checkpoints serialize.
template <typename T>
class Model {
 public:
  Model() = default;
  Model(ModelKind kind, ModelConfig cfg) : kind_(kind), config_(std::move(cfg)) {}

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }
  std::string descriptor() const { return model_kind_name(kind_) + ":" + config_.descriptor(); }

  Parameter<T>& add_param(const std::string& name, Tensor<T> init, bool requires_grad = true) {
    if (param_index_.count(name)) throw Error("duplicate parameter " + name);
    param_index_.emplace(name, params_.size());
    params_.push_back(std::make_unique<Parameter<T>>(Parameter<T>{name, std::move(init), requires_grad}));
    return *params_.back();
  }

  Parameter<T>& param(const std::string& name) {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) throw Error("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<T>& param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
  }

  BnStats<T>& add_stats(const std::string& name, int64_t channels) {
    if (stats_index_.count(name)) throw Error("duplicate bn stats " + name);
    stats_index_.emplace(name, stats_.size());
    stats_.push_back(std::make_unique<BnStats<T>>(name, channels));
    return *stats_.back();
  }

  BnStats<T>& stats(const std::string& name) {
    auto it = stats_index_.find(name);
    if (it == stats_index_.end()) throw Error("unknown bn stats " + name);
    return *stats_[it->second];
  }

  const std::vector<std::unique_ptr<Parameter<T>>>& params() const { return params_; }
  const std::vector<std::unique_ptr<BnStats<T>>>& all_stats() const { return stats_; }
  std::vector<std::unique_ptr<BnStats<T>>>& all_stats_mutable() { return stats_; }

  std::vector<Parameter<T>*> param_ptrs() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  ModelKind kind_ = ModelKind::TransformNet;
  ModelConfig config_;
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, size_t> param_index_;
  std::vector<std::unique_ptr<BnStats<T>>> stats_;
  std::unordered_map<std::string, size_t> stats_index_;
};

struct ForwardOptions {
  BnMode bn_mode = BnMode::Eval;
  bool update_stats = true;   // honored only in train mode
  bool freeze_params = false; // bind parameters as constants (grads flow through, never accumulate)
};

template <typename T>
struct DenoiseOutput {
  typename Graph<T>::Value denoised;
  typename Graph<T>::Value fused_features;
};

template <typename T>
struct FeatureTaps {
  typename Graph<T>::Value scale1, scale2, scale4;
};

// --- builders (seeded, deterministic) --------------------------------------
template <typename T>
Model<T> build_transform_net(const ModelConfig& cfg, uint64_t seed);
template <typename T>
Model<T> build_feature_discriminator(const ModelConfig& cfg, uint64_t seed);
template <typename T>
Model<T> build_pixel_discriminator(const ModelConfig& cfg, const Model<T>& extractor, uint64_t seed);
// Frozen random conv stack standing in for pretrained classifier features.
// The fixed default seed keeps its response identical across processes.
inline constexpr uint64_t kDefaultExtractorSeed = 0x5eedfea70011ULL;
template <typename T>
Model<T> build_feature_extractor(const ModelConfig& cfg, uint64_t seed = kDefaultExtractorSeed);

// --- forwards ----------------------------------------------------------------
template <typename T>
typename Graph<T>::Value residual_block_preact(Graph<T>& g, Model<T>& m, const std::string& prefix,
                                               typename Graph<T>::Value x, const ForwardOptions& o);

template <typename T>
typename Graph<T>::Value fuse_local_global(Graph<T>& g, Model<T>& m, typename Graph<T>::Value local,
                                           typename Graph<T>::Value global_nc11,
                                           const ForwardOptions& o);

template <typename T>
DenoiseOutput<T> forward_denoise(Graph<T>& g, Model<T>& m, typename Graph<T>::Value noisy,
                                 const ForwardOptions& o);

template <typename T>
typename Graph<T>::Value feature_disc_logits(Graph<T>& g, Model<T>& m,
                                             typename Graph<T>::Value fused, double lambda_grl,
                                             bool apply_grl, const ForwardOptions& o);

template <typename T>
FeatureTaps<T> perceptual_features(Graph<T>& g, const Model<T>& extractor,
                                   typename Graph<T>::Value image);

template <typename T>
typename Graph<T>::Value pixel_disc_logits(Graph<T>& g, Model<T>& disc, const Model<T>& extractor,
                                           typename Graph<T>::Value image, const ForwardOptions& o);

}  // namespace dipnet
