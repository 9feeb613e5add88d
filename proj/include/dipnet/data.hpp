#pragma once

#include <string>
#include <vector>

#include "dipnet/rng.hpp"
#include "dipnet/tensor.hpp"

namespace dipnet {

// Planar CHW float image in the normalized [0,1] domain for clean data.
// Noisy data may leave the range; nothing in this module ever clamps it.
struct ImageBuffer {
  int64_t height = 0, width = 0, channels = 0;
  std::vector<float> data;  // index (c*height + y)*width + x
  std::string source_id;

  ImageBuffer() = default;
  ImageBuffer(int64_t h, int64_t w, int64_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(size_t(h * w * c), fill) {}

  float& at(int64_t c, int64_t y, int64_t x) { return data[size_t((c * height + y) * width + x)]; }
  const float& at(int64_t c, int64_t y, int64_t x) const { return data[size_t((c * height + y) * width + x)]; }
  int64_t numel() const { return height * width * channels; }
};

// Lossless formats only: PNG (8-bit gray/RGB) and binary PPM/PGM.  Decoded
// bytes map to [0,1] via v/255.
ImageBuffer load_image(const std::string& path);
// Quantizes by round(v*255).  clip_for_display clamps into [0,1] first;
// without it, out-of-range values are an error rather than silent loss.
void save_image(const ImageBuffer& img, const std::string& path, bool clip_for_display = false);

// y = x + v, v ~ N(0, (sigma/255)^2) i.i.d., never clipped.  sigma is quoted
// on the 0-255 scale.  sigma == 0 returns the input untouched.
ImageBuffer add_awgn(const ImageBuffer& clean, double sigma, Rng& rng);

// Uniformly random top-left corner (row drawn before column); the window is a
// bit-exact copy, no resampling.
ImageBuffer sample_patch(const ImageBuffer& img, int64_t size, Rng& rng);

// Deterministic procedural training images: a base gradient plus random
// rectangles and low-frequency sinusoids, values in [0,1], mean pinned near
// one half.  Desk-scale stand-in for a real photo corpus.
std::vector<ImageBuffer> synth_corpus(uint64_t seed, int count, int64_t size);

struct DatasetSpec {
  std::string root;        // directory of images; empty selects the synthetic corpus
  uint64_t synth_seed = 1;
  int synth_count = 64;
  int64_t synth_size = 96;
  int64_t patch_size = 64;
  std::vector<double> sigma_set{15, 25, 35, 50, 75};  // blind_set classes, ascending
  double sigma_lo = 15, sigma_hi = 75;                // blind_range bounds
  uint64_t seed = 0;  // master seed for sampling; step-derived streams hang off it

  void validate() const;
};

enum class NoiseMode { FixedSigma, BlindSet, BlindRange };

NoiseMode noise_mode_from_name(const std::string& name);
std::string noise_mode_name(NoiseMode m);

struct Batch {
  Tensor<float> noisy;  // (B, 3, p, p)
  Tensor<float> clean;  // (B, 3, p, p)
  std::vector<double> sigmas;       // per sample, 0-255 scale
  std::vector<int> class_indices;   // filled only in blind_set mode
};

// Loads every source image once; batches are cut on demand.  All sampling for
// step k comes from an Rng derived as mix(spec.seed, k), so any step can be
// re-materialized bitwise without replaying the stream before it.
class Dataset {
 public:
  static Dataset open(const DatasetSpec& spec);

  Batch make_batch(int batch_size, NoiseMode mode, double fixed_sigma, int64_t step) const;

  const std::vector<ImageBuffer>& images() const { return images_; }
  const DatasetSpec& spec() const { return spec_; }

 private:
  DatasetSpec spec_;
  std::vector<ImageBuffer> images_;
};

}  // namespace dipnet
