#pragma once

#include <vector>

#include "dipnet/graph.hpp"

namespace dipnet {

// lr = 0.5 * lr0 * (1 + cos(pi * step / total)); single cycle, floor at zero.
double cosine_lr(int64_t step, int64_t total_steps, double lr0);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction: p -= lr * m_hat / (sqrt(v_hat) + eps).
// One instance owns the moment buffers for a fixed parameter list; training
// modes with two optimized sets (generator/discriminator) use two instances.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Parameter<T>*> params, AdamConfig cfg = {});

  // grads must cover exactly the optimized parameters: a missing or extra
  // gradient indicates the caller differentiated the wrong subgraph.
  void step(const GradientMap<T>& grads, double lr);

  int64_t step_count() const { return step_; }
  const std::vector<Parameter<T>*>& params() const { return params_; }

  // checkpoint plumbing: moment buffers in parameter-list order
  std::vector<Tensor<T>>& moments1() { return m_; }
  std::vector<Tensor<T>>& moments2() { return v_; }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  AdamConfig cfg_;
  int64_t step_ = 0;
};

}  // namespace dipnet
