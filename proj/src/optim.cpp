#include "dipnet/optim.hpp"

#include <cmath>

#include "dipnet/error.hpp"

namespace dipnet {

double cosine_lr(int64_t step, int64_t total_steps, double lr0) {
  if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw Error("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                std::to_string(total_steps) + "]");
  return 0.5 * lr0 * (1.0 + std::cos(M_PI * double(step) / double(total_steps)));
}

template <typename T>
Adam<T>::Adam(std::vector<Parameter<T>*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter<T>* p : params_) {
    if (!p->requires_grad) throw Error("adam: frozen parameter " + p->name + " in optimizer");
    m_.emplace_back(p->value.shape(), T(0));
    v_.emplace_back(p->value.shape(), T(0));
  }
}

template <typename T>
void Adam<T>::step(const GradientMap<T>& grads, double lr) {
  if (grads.size() != params_.size())
    throw Error("adam: gradient map covers " + std::to_string(grads.size()) +
                " parameters, optimizer owns " + std::to_string(params_.size()));
  // validate coverage before touching any state so a bad call is a no-op
  for (Parameter<T>* p : params_) {
    const Tensor<T>* g = grads.find(p);
    if (!g) throw Error("adam: no gradient for " + p->name);
    if (!(g->shape() == p->value.shape()))
      throw ShapeError("adam: gradient shape mismatch for " + p->name);
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter<T>* p = params_[i];
    const Tensor<T>* g = grads.find(p);
    T* m = m_[i].data();
    T* v = v_[i].data();
    T* w = p->value.data();
    const T* gd = g->data();
    for (int64_t k = 0, n = p->value.numel(); k < n; ++k) {
      double gk = double(gd[k]);
      double mk = cfg_.beta1 * double(m[k]) + (1.0 - cfg_.beta1) * gk;
      double vk = cfg_.beta2 * double(v[k]) + (1.0 - cfg_.beta2) * gk * gk;
      m[k] = T(mk);
      v[k] = T(vk);
      double update = lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg_.eps);
      w[k] = T(double(w[k]) - update);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace dipnet
