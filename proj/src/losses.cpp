#include "dipnet/losses.hpp"

#include <algorithm>

namespace dipnet {

template <typename T>
typename Graph<T>::Value l1_loss(Graph<T>& g, typename Graph<T>::Value pred,
                                 typename Graph<T>::Value target) {
  if (g.shape(pred) != g.shape(target))
    throw ShapeError("l1_loss: shape mismatch " + g.shape(pred).str() + " vs " + g.shape(target).str());
  return g.mean_all(g.abs(g.sub(pred, target)));
}

template <typename T>
typename Graph<T>::Value multiclass_ce_loss(Graph<T>& g, typename Graph<T>::Value logits,
                                            const std::vector<int>& labels) {
  return g.softmax_cross_entropy(logits, labels);
}

template <typename T>
typename Graph<T>::Value patch_bce_loss(Graph<T>& g, typename Graph<T>::Value logit_map,
                                        int label_d) {
  const Shape& s = g.shape(logit_map);
  if (s.rank() != 4 || s[1] != 1)
    throw ShapeError("patch_bce_loss expects (N,1,h,w) logit map, got " + s.str());
  if (label_d != 0 && label_d != 1) throw Error("patch_bce_loss: label must be 0 or 1");
  return g.bce_with_logits(logit_map, static_cast<T>(label_d));
}

template <typename T>
typename Graph<T>::Value combined_feat_loss(Graph<T>& g, typename Graph<T>::Value l1,
                                            typename Graph<T>::Value prior, T lambda1) {
  return g.add(l1, g.scale(prior, lambda1));
}

template <typename T>
typename Graph<T>::Value combined_pix_loss(Graph<T>& g, typename Graph<T>::Value l1,
                                           typename Graph<T>::Value adv, T lambda2) {
  return g.add(l1, g.scale(adv, lambda2));
}

template <typename T>
AdversarialObjectives<T> adversarial_objectives(Graph<T>& g,
                                                typename Graph<T>::Value disc_logits_on_denoised,
                                                typename Graph<T>::Value disc_logits_on_clear) {
  AdversarialObjectives<T> out;
  out.disc_loss = g.add(patch_bce_loss(g, disc_logits_on_denoised, 1),
                        patch_bce_loss(g, disc_logits_on_clear, 0));
  out.gen_loss = patch_bce_loss(g, disc_logits_on_denoised, 0);
  return out;
}

HDivEstimate h_divergence_estimate(const std::vector<double>& per_domain_mean_losses) {
  if (per_domain_mean_losses.empty()) throw Error("h_divergence_estimate: no domains");
  double sum = 0.0;
  for (double v : per_domain_mean_losses) sum += v;
  HDivEstimate e;
  e.raw = 2.0 * (1.0 - sum);
  e.clamped = std::clamp(e.raw, -2.0, 2.0);
  return e;
}

#define DIPNET_LOSS_INSTANTIATE(T)                                                              \
  template Graph<T>::Value l1_loss<T>(Graph<T>&, Graph<T>::Value, Graph<T>::Value);             \
  template Graph<T>::Value multiclass_ce_loss<T>(Graph<T>&, Graph<T>::Value,                    \
                                                 const std::vector<int>&);                      \
  template Graph<T>::Value patch_bce_loss<T>(Graph<T>&, Graph<T>::Value, int);                  \
  template Graph<T>::Value combined_feat_loss<T>(Graph<T>&, Graph<T>::Value, Graph<T>::Value,   \
                                                 T);                                            \
  template Graph<T>::Value combined_pix_loss<T>(Graph<T>&, Graph<T>::Value, Graph<T>::Value, T);\
  template AdversarialObjectives<T> adversarial_objectives<T>(Graph<T>&, Graph<T>::Value,       \
                                                              Graph<T>::Value);

DIPNET_LOSS_INSTANTIATE(float)
DIPNET_LOSS_INSTANTIATE(double)

}  // namespace dipnet
