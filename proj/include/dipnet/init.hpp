#pragma once

#include "dipnet/rng.hpp"
#include "dipnet/tensor.hpp"

namespace dipnet {

template <typename T>
Tensor<T> rand_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
Tensor<T> rand_normal(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

// Uniform in [-1,1] with |x| >= margin, for finite-difference probes of ops
// with kinks at zero.
template <typename T>
Tensor<T> rand_uniform_away_from_zero(Shape s, Rng& rng, double margin) {
  Tensor<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = rng.uniform(-1.0, 1.0);
    if (v >= 0.0) v = margin + v * (1.0 - margin);
    else v = -margin + v * (1.0 - margin);
    t[i] = static_cast<T>(v);
  }
  return t;
}

// He fan-in initialization: N(0, sqrt(2/fan_in)).
template <typename T>
Tensor<T> he_normal(Shape s, int64_t fan_in, Rng& rng) {
  return rand_normal<T>(s, rng, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

}  // namespace dipnet
