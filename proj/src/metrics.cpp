#include "dipnet/metrics.hpp"

#include <cmath>
#include <limits>

#include "dipnet/error.hpp"

namespace dipnet {

namespace {

void require_same_shape(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw ShapeError("metric inputs differ in shape");
}

constexpr int kWin = 11;

// normalized 11-tap Gaussian, sigma 1.5
const double* gauss11() {
  static double w[kWin];
  static bool init = [] {
    double sum = 0;
    for (int i = 0; i < kWin; ++i) {
      double d = i - (kWin - 1) / 2.0;
      w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
      sum += w[i];
    }
    for (double& v : w) v /= sum;
    return true;
  }();
  (void)init;
  return w;
}

// separable Gaussian filter over one channel, valid region only; input is
// (h, w), output (h-10, w-10), double precision throughout
void gauss_filter_valid(const std::vector<double>& in, int64_t h, int64_t w,
                        std::vector<double>& tmp, std::vector<double>& out) {
  const double* g = gauss11();
  const int64_t ow = w - kWin + 1, oh = h - kWin + 1;
  tmp.assign(size_t(h * ow), 0.0);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kWin; ++k) acc += g[k] * in[size_t(y * w + x + k)];
      tmp[size_t(y * ow + x)] = acc;
    }
  out.assign(size_t(oh * ow), 0.0);
  for (int64_t y = 0; y < oh; ++y)
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (int k = 0; k < kWin; ++k) acc += g[k] * tmp[size_t((y + k) * ow + x)];
      out[size_t(y * ow + x)] = acc;
    }
}

}  // namespace

double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak) {
  require_same_shape(a, b);
  if (a.numel() == 0) throw ShapeError("psnr: empty image");
  double mse = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = double(a.data[i]) - double(b.data[i]);
    mse += d * d;
  }
  mse /= double(a.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const ImageBuffer& a, const ImageBuffer& b) {
  require_same_shape(a, b);
  if (a.height < kWin || a.width < kWin)
    throw ShapeError("ssim: image smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;  // peak 1.0
  const int64_t h = a.height, w = a.width;
  const int64_t oh = h - kWin + 1, ow = w - kWin + 1;

  std::vector<double> pa(size_t(h * w)), pb(size_t(h * w)), paa(size_t(h * w)),
      pbb(size_t(h * w)), pab(size_t(h * w));
  std::vector<double> tmp, mu_a, mu_b, m_aa, m_bb, m_ab;

  double total = 0;
  for (int64_t c = 0; c < a.channels; ++c) {
    const float* ca = &a.at(c, 0, 0);
    const float* cb = &b.at(c, 0, 0);
    for (int64_t i = 0; i < h * w; ++i) {
      double va = ca[i], vb = cb[i];
      pa[size_t(i)] = va;
      pb[size_t(i)] = vb;
      paa[size_t(i)] = va * va;
      pbb[size_t(i)] = vb * vb;
      pab[size_t(i)] = va * vb;
    }
    gauss_filter_valid(pa, h, w, tmp, mu_a);
    gauss_filter_valid(pb, h, w, tmp, mu_b);
    gauss_filter_valid(paa, h, w, tmp, m_aa);
    gauss_filter_valid(pbb, h, w, tmp, m_bb);
    gauss_filter_valid(pab, h, w, tmp, m_ab);

    double acc = 0;
    for (int64_t i = 0; i < oh * ow; ++i) {
      double ma = mu_a[size_t(i)], mb = mu_b[size_t(i)];
      double cov = m_ab[size_t(i)] - ma * mb;
      // Each denominator factor is written as numerator + nonnegative gap
      // (algebraically the textbook grouping: ma^2+mb^2 = 2*ma*mb + (ma-mb)^2
      // and va+vb = 2*cov + [(maa+mbb-2*mab) - (ma-mb)^2]), so identical
      // inputs give num == den bitwise and ssim(a,a) is exactly 1.0 no matter
      // how the compiler contracts the FP expressions.
      double dm = ma - mb;
      double n1 = 2 * ma * mb + c1;
      double n2 = 2 * cov + c2;
      double gap1 = dm * dm;
      double gap2 = (m_aa[size_t(i)] + m_bb[size_t(i)] - 2 * m_ab[size_t(i)]) - gap1;
      acc += (n1 * n2) / ((n1 + gap1) * (n2 + gap2));
    }
    total += acc / double(oh * ow);
  }
  return total / double(a.channels);
}

ImageBuffer image_from_batch(const Tensor<float>& t, int64_t n) {
  const Shape& s = t.shape();
  if (s.rank() != 4 || n < 0 || n >= s[0]) throw ShapeError("image_from_batch: bad slice");
  ImageBuffer img(s[2], s[3], s[1]);
  const float* src = t.data() + n * s[1] * s[2] * s[3];
  std::copy(src, src + img.numel(), img.data.begin());
  return img;
}

Tensor<float> batch_from_image(const ImageBuffer& img) {
  Tensor<float> t(Shape{1, img.channels, img.height, img.width});
  std::copy(img.data.begin(), img.data.end(), t.data());
  return t;
}

ImageBuffer clamp01(ImageBuffer img) {
  for (float& v : img.data) v = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return img;
}

}  // namespace dipnet
