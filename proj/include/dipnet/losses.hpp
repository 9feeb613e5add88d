#pragma once

#include <vector>

#include "dipnet/graph.hpp"

namespace dipnet {

// Samples from one or more noise-level domains plus their domain indices;
// assembled by the trainer for the domain-alignment diagnostics.
template <typename T>
struct DomainBatch {
  Tensor<T> samples;             // stacked along axis 0
  std::vector<int> domain_labels;  // one per sample, in [0, m)
};

// Mean absolute difference over every entry (batch included).
template <typename T>
typename Graph<T>::Value l1_loss(Graph<T>& g, typename Graph<T>::Value pred,
                                 typename Graph<T>::Value target);

// -(1/N) sum_i log softmax(logits_i)[label_i], stabilized by max-shift.
template <typename T>
typename Graph<T>::Value multiclass_ce_loss(Graph<T>& g, typename Graph<T>::Value logits,
                                            const std::vector<int>& labels);

// Mean binary cross entropy of a single-channel patch logit map against a
// uniform label (1 = denoised, 0 = clear), in stable logit form.
template <typename T>
typename Graph<T>::Value patch_bce_loss(Graph<T>& g, typename Graph<T>::Value logit_map,
                                        int label_d);

template <typename T>
typename Graph<T>::Value combined_feat_loss(Graph<T>& g, typename Graph<T>::Value l1,
                                            typename Graph<T>::Value prior, T lambda1);

template <typename T>
typename Graph<T>::Value combined_pix_loss(Graph<T>& g, typename Graph<T>::Value l1,
                                           typename Graph<T>::Value adv, T lambda2);

template <typename T>
struct AdversarialObjectives {
  typename Graph<T>::Value disc_loss;  // bce(denoised, 1) + bce(clear, 0)
  typename Graph<T>::Value gen_loss;   // bce(denoised, 0) -- label-flipped, non-saturating
};

// The two sides of the patch-GAN game.  Parameter isolation (generator steps
// never touching discriminator weights and vice versa) is achieved by how the
// caller binds parameters (frozen vs live) in the graphs that produced the
// logits; the training loop asserts it by auditing the gradient maps.
template <typename T>
AdversarialObjectives<T> adversarial_objectives(Graph<T>& g,
                                                typename Graph<T>::Value disc_logits_on_denoised,
                                                typename Graph<T>::Value disc_logits_on_clear);

struct HDivEstimate {
  double raw = 0.0;
  double clamped = 0.0;  // raw limited to [-2, 2]
};

// 2 * (1 - sum of per-domain mean 0-1 losses of the trained domain
// classifier on held-out samples).
HDivEstimate h_divergence_estimate(const std::vector<double>& per_domain_mean_losses);

}  // namespace dipnet
