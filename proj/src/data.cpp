#include "dipnet/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dipnet/error.hpp"

namespace dipnet {

namespace {

// --- 8-bit quantization ----------------------------------------------------

std::vector<unsigned char> quantize(const ImageBuffer& img, bool clip) {
  std::vector<unsigned char> bytes(size_t(img.numel()));
  size_t k = 0;
  // interleaved pixel order for the encoders
  for (int64_t y = 0; y < img.height; ++y)
    for (int64_t x = 0; x < img.width; ++x)
      for (int64_t c = 0; c < img.channels; ++c) {
        double v = img.at(c, y, x);
        if (clip) v = std::min(1.0, std::max(0.0, v));
        else if (v < 0.0 || v > 1.0)
          throw Error("save_image: value outside [0,1]; pass clip_for_display to clamp");
        bytes[k++] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  return bytes;
}

ImageBuffer from_bytes(int64_t h, int64_t w, int64_t c, const unsigned char* bytes,
                       std::string source_id) {
  ImageBuffer img(h, w, c);
  img.source_id = std::move(source_id);
  size_t k = 0;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t ch = 0; ch < c; ++ch) img.at(ch, y, x) = float(bytes[k++]) / 255.0f;
  return img;
}

// --- PNG -------------------------------------------------------------------

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

ImageBuffer load_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> bytes;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt or truncated png: " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);
  if (w == 0 || h == 0) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png with zero dimension: " + path);
  }
  if (depth != 8 || (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_RGB)) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported png variant (need 8-bit gray or rgb): " + path);
  }
  int64_t ch = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
  bytes.resize(size_t(w) * h * size_t(ch));
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = bytes.data() + size_t(y) * w * size_t(ch);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_bytes(h, w, ch, bytes.data(), path);
}

void save_png(const ImageBuffer& img, const std::string& path, bool clip) {
  std::vector<unsigned char> bytes = quantize(img, clip);
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  int color = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(size_t(img.height));
  for (int64_t y = 0; y < img.height; ++y)
    rows[size_t(y)] = bytes.data() + size_t(y) * size_t(img.width) * size_t(img.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// --- binary PPM / PGM --------------------------------------------------------

int pnm_token(std::istream& in) {
  // skips whitespace and '#' comments, returns a non-negative integer
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int v = -1;
  in >> v;
  if (!in || v < 0) throw IoError("malformed pnm header");
  return v;
}

ImageBuffer load_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  int64_t ch = magic[1] == '6' ? 3 : 1;
  int w = pnm_token(in), h = pnm_token(in), maxval = pnm_token(in);
  if (w == 0 || h == 0) throw IoError("pnm with zero dimension: " + path);
  if (maxval != 255) throw IoError("unsupported pnm depth (need maxval 255): " + path);
  in.get();  // single whitespace byte before raster
  std::vector<unsigned char> bytes(size_t(w) * size_t(h) * size_t(ch));
  in.read(reinterpret_cast<char*>(bytes.data()), std::streamsize(bytes.size()));
  if (size_t(in.gcount()) != bytes.size()) throw IoError("truncated pnm raster: " + path);
  return from_bytes(h, w, ch, bytes.data(), path);
}

void save_pnm(const ImageBuffer& img, const std::string& path, bool clip) {
  std::vector<unsigned char> bytes = quantize(img, clip);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("short write: " + path);
}

bool ends_with_ci(const std::string& s, const std::string& suffix) {
  if (s.size() < suffix.size()) return false;
  for (size_t i = 0; i < suffix.size(); ++i)
    if (std::tolower(s[s.size() - suffix.size() + i]) != suffix[i]) return false;
  return true;
}

}  // namespace

ImageBuffer load_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path);
  unsigned char sig[8] = {};
  probe.read(reinterpret_cast<char*>(sig), 8);
  probe.close();
  static const unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (std::memcmp(sig, png_sig, 8) == 0) return load_png(path);
  if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) return load_pnm(path);
  throw IoError("unsupported image format (need png or binary ppm/pgm): " + path);
}

void save_image(const ImageBuffer& img, const std::string& path, bool clip_for_display) {
  if (img.height <= 0 || img.width <= 0) throw IoError("save_image: empty image");
  if (img.channels != 1 && img.channels != 3)
    throw IoError("save_image: need 1 or 3 channels");
  if (ends_with_ci(path, ".png")) save_png(img, path, clip_for_display);
  else if (ends_with_ci(path, ".ppm") || ends_with_ci(path, ".pgm")) save_pnm(img, path, clip_for_display);
  else throw IoError("unsupported output format (use .png/.ppm/.pgm): " + path);
}

ImageBuffer add_awgn(const ImageBuffer& clean, double sigma, Rng& rng) {
  if (sigma < 0) throw Error("add_awgn: negative sigma");
  ImageBuffer noisy = clean;
  if (sigma == 0) return noisy;  // exact copy, rng untouched
  const double s = sigma / 255.0;
  for (float& v : noisy.data) v = float(double(v) + rng.normal(0.0, s));
  return noisy;
}

ImageBuffer sample_patch(const ImageBuffer& img, int64_t size, Rng& rng) {
  if (size <= 0 || size > img.height || size > img.width)
    throw ShapeError("sample_patch: size " + std::to_string(size) + " exceeds image " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  int64_t y0 = int64_t(rng.uniform_int(uint64_t(img.height - size + 1)));
  int64_t x0 = int64_t(rng.uniform_int(uint64_t(img.width - size + 1)));
  ImageBuffer out(size, size, img.channels);
  out.source_id = img.source_id;
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t y = 0; y < size; ++y)
      std::memcpy(&out.at(c, y, 0), &img.at(c, y0 + y, x0), size_t(size) * sizeof(float));
  return out;
}

std::vector<ImageBuffer> synth_corpus(uint64_t seed, int count, int64_t size) {
  if (count <= 0 || size <= 0) throw Error("synth_corpus: count and size must be positive");
  std::vector<ImageBuffer> out;
  out.reserve(size_t(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::mix(seed, uint64_t(i)));
    ImageBuffer img(size, size, 3);
    img.source_id = "synth:" + std::to_string(i);

    // base: oriented linear gradient around one half, lightly tinted
    double theta = rng.uniform(0.0, 2.0 * M_PI);
    double gx = std::cos(theta), gy = std::sin(theta);
    double slope = rng.uniform(0.15, 0.35);
    double tint[3];
    for (double& t : tint) t = rng.uniform(-0.05, 0.05);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        double u = (gx * (x - size / 2.0) + gy * (y - size / 2.0)) / double(size);
        for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) = float(0.5 + slope * u + tint[c]);
      }

    // hard-edged rectangles give the denoiser edges to preserve
    int nrect = 2 + int(rng.uniform_int(5));
    for (int r = 0; r < nrect; ++r) {
      int64_t w = size / 8 + int64_t(rng.uniform_int(uint64_t(size / 2)));
      int64_t h = size / 8 + int64_t(rng.uniform_int(uint64_t(size / 2)));
      int64_t x0 = int64_t(rng.uniform_int(uint64_t(size - w + 1)));
      int64_t y0 = int64_t(rng.uniform_int(uint64_t(size - h + 1)));
      double base = rng.uniform(-0.22, 0.22);
      double jitter[3];
      for (double& j : jitter) j = base + rng.uniform(-0.05, 0.05);
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = y0; y < y0 + h; ++y)
          for (int64_t x = x0; x < x0 + w; ++x) img.at(c, y, x) += float(jitter[c]);
    }

    // one band-limited sinusoid as texture
    double fx = 1.0 + double(rng.uniform_int(4));
    double fy = 1.0 + double(rng.uniform_int(4));
    double phase = rng.uniform(0.0, 2.0 * M_PI);
    double amp = rng.uniform(0.03, 0.12);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        float v = float(amp * std::sin(2.0 * M_PI * (fx * x + fy * y) / double(size) + phase));
        for (int64_t c = 0; c < 3; ++c) img.at(c, y, x) += v;
      }

    for (float& v : img.data) v = std::min(1.0f, std::max(0.0f, v));
    out.push_back(std::move(img));
  }
  return out;
}

void DatasetSpec::validate() const {
  if (patch_size < 1) throw ConfigError("dataset: patch_size must be positive");
  if (root.empty() && (synth_count < 1 || synth_size < 1))
    throw ConfigError("dataset: synthetic corpus needs positive count and size");
  if (sigma_set.empty()) throw ConfigError("dataset: sigma_set is empty");
  for (double s : sigma_set)
    if (s <= 0) throw ConfigError("dataset: sigma values must be positive");
  if (!(sigma_lo > 0) || !(sigma_hi >= sigma_lo))
    throw ConfigError("dataset: need 0 < sigma_lo <= sigma_hi");
}

NoiseMode noise_mode_from_name(const std::string& name) {
  if (name == "fixed_sigma") return NoiseMode::FixedSigma;
  if (name == "blind_set") return NoiseMode::BlindSet;
  if (name == "blind_range") return NoiseMode::BlindRange;
  throw ConfigError("unknown noise mode: " + name);
}

std::string noise_mode_name(NoiseMode m) {
  switch (m) {
    case NoiseMode::FixedSigma: return "fixed_sigma";
    case NoiseMode::BlindSet: return "blind_set";
    case NoiseMode::BlindRange: return "blind_range";
  }
  return "?";
}

Dataset Dataset::open(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec_ = spec;
  if (spec.root.empty()) {
    ds.images_ = synth_corpus(spec.synth_seed, spec.synth_count, spec.synth_size);
  } else {
    namespace fs = std::filesystem;
    std::vector<std::string> paths;
    for (const auto& e : fs::directory_iterator(spec.root)) {
      if (!e.is_regular_file()) continue;
      std::string p = e.path().string();
      if (ends_with_ci(p, ".png") || ends_with_ci(p, ".ppm") || ends_with_ci(p, ".pgm"))
        paths.push_back(p);
    }
    std::sort(paths.begin(), paths.end());
    for (const std::string& p : paths) {
      ImageBuffer img = load_image(p);
      if (img.channels == 1) {  // replicate gray to the 3-channel training layout
        ImageBuffer rgb(img.height, img.width, 3);
        rgb.source_id = img.source_id;
        for (int64_t c = 0; c < 3; ++c)
          std::memcpy(&rgb.at(c, 0, 0), img.data.data(), img.data.size() * sizeof(float));
        img = std::move(rgb);
      }
      ds.images_.push_back(std::move(img));
    }
  }
  if (ds.images_.empty()) throw IoError("dataset: no usable images under " + spec.root);
  for (const ImageBuffer& img : ds.images_)
    if (spec.patch_size > img.height || spec.patch_size > img.width)
      throw ConfigError("dataset: patch_size " + std::to_string(spec.patch_size) +
                        " exceeds image " + img.source_id);
  return ds;
}

Batch Dataset::make_batch(int batch_size, NoiseMode mode, double fixed_sigma, int64_t step) const {
  if (batch_size < 1) throw ConfigError("make_batch: batch_size must be positive");
  if (mode == NoiseMode::FixedSigma && fixed_sigma <= 0)
    throw ConfigError("make_batch: fixed_sigma must be positive");
  const int64_t p = spec_.patch_size;
  Rng rng(Rng::mix(spec_.seed, uint64_t(step)));
  Batch b;
  b.noisy = Tensor<float>(Shape{batch_size, 3, p, p});
  b.clean = Tensor<float>(Shape{batch_size, 3, p, p});
  for (int i = 0; i < batch_size; ++i) {
    const ImageBuffer& src = images_[rng.uniform_int(images_.size())];
    ImageBuffer clean = sample_patch(src, p, rng);
    double sigma = fixed_sigma;
    if (mode == NoiseMode::BlindSet) {
      int cls = int(rng.uniform_int(spec_.sigma_set.size()));
      sigma = spec_.sigma_set[size_t(cls)];
      b.class_indices.push_back(cls);
    } else if (mode == NoiseMode::BlindRange) {
      sigma = rng.uniform(spec_.sigma_lo, spec_.sigma_hi);
    }
    ImageBuffer noisy = add_awgn(clean, sigma, rng);
    b.sigmas.push_back(sigma);
    float* cdst = b.clean.data() + int64_t(i) * 3 * p * p;
    float* ndst = b.noisy.data() + int64_t(i) * 3 * p * p;
    std::memcpy(cdst, clean.data.data(), clean.data.size() * sizeof(float));
    std::memcpy(ndst, noisy.data.data(), noisy.data.size() * sizeof(float));
  }
  return b;
}

}  // namespace dipnet
