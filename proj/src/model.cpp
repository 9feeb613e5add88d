#include "dipnet/model.hpp"

#include <sstream>

#include "dipnet/init.hpp"

namespace dipnet {

std::string model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::TransformNet: return "transform_net";
    case ModelKind::FeatureDisc: return "feature_disc";
    case ModelKind::PixelDisc: return "pixel_disc";
    case ModelKind::FeatureExtractor: return "feature_extractor";
  }
  return "?";
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.base_channels = 16;
  c.low_level_blocks = 4;
  c.local_blocks = 1;
  c.global_fc_width = 64;
  c.feat_disc_channels = 32;
  c.feat_disc_fc_width = 32;
  c.pixel_disc_channels = {16, 32, 64};
  c.extractor_channels = {8, 16, 32};
  return c;
}

void ModelConfig::validate() const {
  if (input_channels != 3) throw ConfigError("model: input_channels must be 3");
  if (base_channels < 1 || low_level_blocks < 1 || local_blocks < 1 || global_fc_width < 1 ||
      feat_disc_channels < 1 || feat_disc_fc_width < 1)
    throw ConfigError("model: channel/block counts must be positive");
  if (num_noise_classes < 2) throw ConfigError("model: need at least 2 noise classes");
  for (int v : pixel_disc_channels)
    if (v < 1) throw ConfigError("model: pixel_disc_channels must be positive");
  for (int v : extractor_channels)
    if (v < 1) throw ConfigError("model: extractor_channels must be positive");
}

std::string ModelConfig::descriptor() const {
  std::ostringstream os;
  os << "in=" << input_channels << ";base=" << base_channels << ";low=" << low_level_blocks
     << ";loc=" << local_blocks << ";gfc=" << global_fc_width << ";m=" << num_noise_classes
     << ";fdc=" << feat_disc_channels << ";fdw=" << feat_disc_fc_width << ";pd="
     << pixel_disc_channels[0] << "," << pixel_disc_channels[1] << "," << pixel_disc_channels[2]
     << ";ex=" << extractor_channels[0] << "," << extractor_channels[1] << ","
     << extractor_channels[2] << ";skip=" << (input_image_skip ? 1 : 0);
  return os.str();
}

ModelConfig ModelConfig::from_descriptor(const std::string& s) {
  ModelConfig c;
  std::istringstream is(s);
  std::string field;
  auto int3 = [](const std::string& v, std::array<int, 3>& out) {
    if (std::sscanf(v.c_str(), "%d,%d,%d", &out[0], &out[1], &out[2]) != 3)
      throw ConfigError("bad triple in model descriptor: " + v);
  };
  while (std::getline(is, field, ';')) {
    auto eq = field.find('=');
    if (eq == std::string::npos) throw ConfigError("bad model descriptor field: " + field);
    std::string k = field.substr(0, eq), v = field.substr(eq + 1);
    if (k == "in") c.input_channels = std::stoi(v);
    else if (k == "base") c.base_channels = std::stoi(v);
    else if (k == "low") c.low_level_blocks = std::stoi(v);
    else if (k == "loc") c.local_blocks = std::stoi(v);
    else if (k == "gfc") c.global_fc_width = std::stoi(v);
    else if (k == "m") c.num_noise_classes = std::stoi(v);
    else if (k == "fdc") c.feat_disc_channels = std::stoi(v);
    else if (k == "fdw") c.feat_disc_fc_width = std::stoi(v);
    else if (k == "pd") int3(v, c.pixel_disc_channels);
    else if (k == "ex") int3(v, c.extractor_channels);
    else if (k == "skip") c.input_image_skip = v == "1";
    else throw ConfigError("unknown model descriptor key: " + k);
  }
  c.validate();
  return c;
}

// --- builders ------------------------------------------------------------

namespace {

template <typename T>
void add_conv(Model<T>& m, Rng& rng, const std::string& name, int oc, int ic, int k) {
  m.add_param(name + ".w", he_normal<T>(Shape{oc, ic, k, k}, int64_t(ic) * k * k, rng));
  m.add_param(name + ".b", Tensor<T>(Shape{oc}, T(0)));
}

template <typename T>
void add_bn(Model<T>& m, const std::string& name, int c) {
  m.add_param(name + ".gamma", Tensor<T>(Shape{c}, T(1)));
  m.add_param(name + ".beta", Tensor<T>(Shape{c}, T(0)));
  m.add_stats(name, c);
}

template <typename T>
void add_block(Model<T>& m, Rng& rng, const std::string& prefix, int c) {
  add_bn(m, prefix + ".bn1", c);
  add_conv(m, rng, prefix + ".conv1", c, c, 3);
  add_bn(m, prefix + ".bn2", c);
  add_conv(m, rng, prefix + ".conv2", c, c, 3);
}

template <typename T>
typename Graph<T>::Value bind_param(Graph<T>& g, Model<T>& m, const std::string& name,
                              const ForwardOptions& o) {
  Parameter<T>& p = m.param(name);
  return o.freeze_params ? g.frozen(p) : g.param(p);
}

}  // namespace

template <typename T>
Model<T> build_transform_net(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> m(ModelKind::TransformNet, cfg);
  Rng rng(seed);
  const int c = cfg.base_channels, f = cfg.global_fc_width;
  add_conv(m, rng, "in_conv", c, cfg.input_channels, 3);
  for (int i = 0; i < cfg.low_level_blocks; ++i) add_block(m, rng, "low" + std::to_string(i), c);
  for (int i = 0; i < cfg.local_blocks; ++i) add_block(m, rng, "loc" + std::to_string(i), c);
  m.add_param("global.fc1.w", he_normal<T>(Shape{c, f}, c, rng));
  m.add_param("global.fc1.b", Tensor<T>(Shape{1, f}, T(0)));
  m.add_param("global.fc2.w", he_normal<T>(Shape{f, c}, f, rng));
  m.add_param("global.fc2.b", Tensor<T>(Shape{1, c}, T(0)));
  add_conv(m, rng, "fuse", c, 2 * c, 1);
  add_conv(m, rng, "out_conv", cfg.input_channels, c, 3);
  return m;
}

template <typename T>
Model<T> build_feature_discriminator(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> m(ModelKind::FeatureDisc, cfg);
  Rng rng(seed);
  add_conv(m, rng, "conv", cfg.feat_disc_channels, cfg.base_channels, 3);
  m.add_param("fc1.w", he_normal<T>(Shape{cfg.feat_disc_channels, cfg.feat_disc_fc_width},
                                    cfg.feat_disc_channels, rng));
  m.add_param("fc1.b", Tensor<T>(Shape{1, cfg.feat_disc_fc_width}, T(0)));
  m.add_param("fc2.w", he_normal<T>(Shape{cfg.feat_disc_fc_width, cfg.num_noise_classes},
                                    cfg.feat_disc_fc_width, rng));
  m.add_param("fc2.b", Tensor<T>(Shape{1, cfg.num_noise_classes}, T(0)));
  return m;
}

template <typename T>
Model<T> build_feature_extractor(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model<T> m(ModelKind::FeatureExtractor, cfg);
  Rng rng(seed);
  int prev = cfg.input_channels;
  for (int i = 0; i < 3; ++i) {
    int oc = cfg.extractor_channels[static_cast<size_t>(i)];
    m.add_param("stage" + std::to_string(i) + ".w",
                he_normal<T>(Shape{oc, prev, 3, 3}, int64_t(prev) * 9, rng), false);
    m.add_param("stage" + std::to_string(i) + ".b", Tensor<T>(Shape{oc}, T(0)), false);
    prev = oc;
  }
  return m;
}

template <typename T>
Model<T> build_pixel_discriminator(const ModelConfig& cfg, const Model<T>& extractor,
                                   uint64_t seed) {
  cfg.validate();
  Model<T> m(ModelKind::PixelDisc, cfg);
  Rng rng(seed);
  int prev = cfg.input_channels;
  for (int i = 0; i < 3; ++i) {
    // each stride block sees the previous activation stacked with one frozen
    // feature map of matching scale
    int64_t ext_c = extractor.param("stage" + std::to_string(i) + ".w").value.shape()[0];
    int oc = cfg.pixel_disc_channels[static_cast<size_t>(i)];
    std::string prefix = "blk" + std::to_string(i);
    add_conv(m, rng, prefix + ".conv", oc, prev + static_cast<int>(ext_c), 3);
    add_bn(m, prefix + ".bn", oc);
    prev = oc;
  }
  add_conv(m, rng, "final", 1, prev, 1);
  return m;
}

// --- forwards ------------------------------------------------------------

template <typename T>
typename Graph<T>::Value residual_block_preact(Graph<T>& g, Model<T>& m, const std::string& prefix,
                                               typename Graph<T>::Value x, const ForwardOptions& o) {
  if (g.shape(x)[1] != m.config().base_channels)
    throw ShapeError("residual block " + prefix + ": channel extent must equal base_channels");
  auto h = g.batch_norm(x, bind_param(g, m, prefix + ".bn1.gamma", o), bind_param(g, m, prefix + ".bn1.beta", o),
                        m.stats(prefix + ".bn1"), o.bn_mode, o.update_stats);
  h = g.relu(h);
  h = g.conv2d(h, bind_param(g, m, prefix + ".conv1.w", o), bind_param(g, m, prefix + ".conv1.b", o), 1, 1);
  h = g.batch_norm(h, bind_param(g, m, prefix + ".bn2.gamma", o), bind_param(g, m, prefix + ".bn2.beta", o),
                   m.stats(prefix + ".bn2"), o.bn_mode, o.update_stats);
  h = g.relu(h);
  h = g.conv2d(h, bind_param(g, m, prefix + ".conv2.w", o), bind_param(g, m, prefix + ".conv2.b", o), 1, 1);
  return g.add(x, h);
}

template <typename T>
typename Graph<T>::Value fuse_local_global(Graph<T>& g, Model<T>& m, typename Graph<T>::Value local,
                                           typename Graph<T>::Value global_nc11,
                                           const ForwardOptions& o) {
  const Shape ls = g.shape(local);  // copy: broadcast/concat below grow the node store
  const Shape gs = g.shape(global_nc11);
  if (ls.rank() != 4 || gs.rank() != 4 || ls[0] != gs[0] || ls[1] != gs[1] || gs[2] != 1 || gs[3] != 1)
    throw ShapeError("fuse: expected local (N,C,H,W) and global (N,C,1,1), got " + ls.str() + " and " + gs.str());
  auto wide = g.broadcast_hw(global_nc11, ls[2], ls[3]);
  auto cat = g.concat_channels({local, wide});
  auto fused = g.conv2d(cat, bind_param(g, m, "fuse.w", o), bind_param(g, m, "fuse.b", o), 1, 0);
  return g.relu(fused);
}

template <typename T>
DenoiseOutput<T> forward_denoise(Graph<T>& g, Model<T>& m, typename Graph<T>::Value noisy,
                                 const ForwardOptions& o) {
  const Shape s = g.shape(noisy);  // copy: later ops may reallocate the node store
  if (s.rank() != 4 || s[1] != m.config().input_channels)
    throw ShapeError("forward_denoise expects (N,3,H,W), got " + s.str());
  const ModelConfig& cfg = m.config();

  auto f0 = g.conv2d(noisy, bind_param(g, m, "in_conv.w", o), bind_param(g, m, "in_conv.b", o), 1, 1);
  auto t = f0;
  for (int i = 0; i < cfg.low_level_blocks; ++i)
    t = residual_block_preact(g, m, "low" + std::to_string(i), t, o);
  auto features = g.add(t, f0);  // long skip from the input-conv features

  auto local = features;
  for (int i = 0; i < cfg.local_blocks; ++i)
    local = residual_block_preact(g, m, "loc" + std::to_string(i), local, o);

  auto pooled = g.global_avg_pool(features);  // (N, C)
  auto h = g.relu(g.add(g.matmul(pooled, bind_param(g, m, "global.fc1.w", o)), bind_param(g, m, "global.fc1.b", o)));
  auto gv = g.relu(g.add(g.matmul(h, bind_param(g, m, "global.fc2.w", o)), bind_param(g, m, "global.fc2.b", o)));
  auto g4 = g.reshape(gv, Shape{s[0], cfg.base_channels, 1, 1});

  auto fused = fuse_local_global(g, m, local, g4, o);
  auto out = g.conv2d(fused, bind_param(g, m, "out_conv.w", o), bind_param(g, m, "out_conv.b", o), 1, 1);
  if (cfg.input_image_skip) out = g.add(out, noisy);
  return {out, fused};
}

template <typename T>
typename Graph<T>::Value feature_disc_logits(Graph<T>& g, Model<T>& m,
                                             typename Graph<T>::Value fused, double lambda_grl,
                                             bool apply_grl, const ForwardOptions& o) {
  auto h = apply_grl ? g.grad_reverse(fused, static_cast<T>(lambda_grl)) : fused;
  h = g.conv2d(h, bind_param(g, m, "conv.w", o), bind_param(g, m, "conv.b", o), 2, 1);
  h = g.relu(h);
  auto pooled = g.global_avg_pool(h);
  auto fc1 = g.relu(g.add(g.matmul(pooled, bind_param(g, m, "fc1.w", o)), bind_param(g, m, "fc1.b", o)));
  return g.add(g.matmul(fc1, bind_param(g, m, "fc2.w", o)), bind_param(g, m, "fc2.b", o));
}

template <typename T>
FeatureTaps<T> perceptual_features(Graph<T>& g, const Model<T>& extractor,
                                   typename Graph<T>::Value image) {
  if (g.shape(image)[1] != extractor.config().input_channels)
    throw ShapeError("perceptual_features expects a 3-channel image");
  auto conv = [&](typename Graph<T>::Value x, int i, int stride) {
    auto w = g.frozen(extractor.param("stage" + std::to_string(i) + ".w"));
    auto b = g.frozen(extractor.param("stage" + std::to_string(i) + ".b"));
    return g.relu(g.conv2d(x, w, b, stride, 1));
  };
  auto s1 = conv(image, 0, 1);
  auto s2 = conv(s1, 1, 2);
  auto s4 = conv(s2, 2, 2);
  return {s1, s2, s4};
}

template <typename T>
typename Graph<T>::Value pixel_disc_logits(Graph<T>& g, Model<T>& disc, const Model<T>& extractor,
                                           typename Graph<T>::Value image, const ForwardOptions& o) {
  FeatureTaps<T> taps = perceptual_features(g, extractor, image);
  const typename Graph<T>::Value tap[3] = {taps.scale1, taps.scale2, taps.scale4};
  auto h = image;
  for (int i = 0; i < 3; ++i) {
    std::string prefix = "blk" + std::to_string(i);
    auto cat = g.concat_channels({h, tap[i]});
    h = g.conv2d(cat, bind_param(g, disc, prefix + ".conv.w", o), bind_param(g, disc, prefix + ".conv.b", o), 2, 1);
    h = g.batch_norm(h, bind_param(g, disc, prefix + ".bn.gamma", o), bind_param(g, disc, prefix + ".bn.beta", o),
                     disc.stats(prefix + ".bn"), o.bn_mode, o.update_stats);
    h = g.leaky_relu(h, T(0.2));
  }
  return g.conv2d(h, bind_param(g, disc, "final.w", o), bind_param(g, disc, "final.b", o), 1, 0);
}

#define DIPNET_INSTANTIATE(T)                                                                      \
  template Model<T> build_transform_net<T>(const ModelConfig&, uint64_t);                          \
  template Model<T> build_feature_discriminator<T>(const ModelConfig&, uint64_t);                  \
  template Model<T> build_feature_extractor<T>(const ModelConfig&, uint64_t);                      \
  template Model<T> build_pixel_discriminator<T>(const ModelConfig&, const Model<T>&, uint64_t);   \
  template Graph<T>::Value residual_block_preact<T>(Graph<T>&, Model<T>&, const std::string&,      \
                                                    Graph<T>::Value, const ForwardOptions&);       \
  template Graph<T>::Value fuse_local_global<T>(Graph<T>&, Model<T>&, Graph<T>::Value,             \
                                                Graph<T>::Value, const ForwardOptions&);           \
  template DenoiseOutput<T> forward_denoise<T>(Graph<T>&, Model<T>&, Graph<T>::Value,              \
                                               const ForwardOptions&);                             \
  template Graph<T>::Value feature_disc_logits<T>(Graph<T>&, Model<T>&, Graph<T>::Value, double,   \
                                                  bool, const ForwardOptions&);                    \
  template FeatureTaps<T> perceptual_features<T>(Graph<T>&, const Model<T>&, Graph<T>::Value);     \
  template Graph<T>::Value pixel_disc_logits<T>(Graph<T>&, Model<T>&, const Model<T>&,             \
                                                Graph<T>::Value, const ForwardOptions&);

DIPNET_INSTANTIATE(float)
DIPNET_INSTANTIATE(double)

}  // namespace dipnet
