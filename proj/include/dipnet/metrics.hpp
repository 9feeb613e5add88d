#pragma once

#include "dipnet/data.hpp"

namespace dipnet {

// 10*log10(peak^2 / MSE) over every channel and pixel; equal inputs return
// +infinity.  Exactly symmetric in its arguments.
double psnr(const ImageBuffer& a, const ImageBuffer& b, double peak = 1.0);

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// peak 1.0, valid window positions only, channels averaged.
double ssim(const ImageBuffer& a, const ImageBuffer& b);

// Batch slice (N,C,H,W) -> planar image, and back.  Used by evaluation and
// the command-line denoiser.
ImageBuffer image_from_batch(const Tensor<float>& t, int64_t n);
Tensor<float> batch_from_image(const ImageBuffer& img);

// Display convention for evaluation: clamp into [0,1] before scoring.
ImageBuffer clamp01(ImageBuffer img);

}  // namespace dipnet
