#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "beal/adversary.hpp"
#include "beal/tensor.hpp"

namespace beal::objectives {

// Clamp applied inside every logarithm.
inline constexpr double kProbEps = 1e-7;

template <typename T>
struct LossReport {
  T l_mask = 0;      // L_m, source supervision
  T l_boundary = 0;  // L_b, source supervision
  T l_adv_b = 0;     // boundary adversarial term (target)
  T l_adv_e = 0;     // entropy adversarial term (target)
  T l_db = 0;        // boundary discriminator objective
  T l_de = 0;        // entropy discriminator objective
  T total_seg = 0;   // l_mask + l_boundary + lambda*(l_adv_b + l_adv_e)

  bool all_finite() const {
    for (T v : {l_mask, l_boundary, l_adv_b, l_adv_e, l_db, l_de, total_seg})
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename T>
T clamp_prob(T p) {
  const T lo = static_cast<T>(kProbEps), hi = T(1) - static_cast<T>(kProbEps);
  return p < lo ? lo : (p > hi ? hi : p);
}

// Per-pixel self-information of the mask probabilities, -p*log(p) in nats.
// With include_complement the full Bernoulli entropy -p log p - (1-p) log(1-p)
// is used instead.
template <typename T>
Tensor<T> entropy_map(const Tensor<T>& mask_prob,
                      bool include_complement = false) {
  Tensor<T> e(mask_prob.shape());
  for (std::int64_t i = 0; i < mask_prob.numel(); ++i) {
    const T p = clamp_prob(mask_prob[i]);
    T v = -p * std::log(p);
    if (include_complement) {
      const T q = T(1) - p;
      v -= q * std::log(q);
    }
    e[i] = v;
  }
  return e;
}

// d(entropy)/d(p), chained with an upstream gradient. The clamp zeroes the
// derivative outside (eps, 1-eps).
template <typename T>
Tensor<T> entropy_map_backward(const Tensor<T>& mask_prob,
                               const Tensor<T>& d_entropy,
                               bool include_complement = false) {
  Tensor<T> d(mask_prob.shape());
  const T lo = static_cast<T>(kProbEps), hi = T(1) - static_cast<T>(kProbEps);
  for (std::int64_t i = 0; i < mask_prob.numel(); ++i) {
    const T p = mask_prob[i];
    if (p <= lo || p >= hi) {
      d[i] = T(0);
      continue;
    }
    T g = -(std::log(p) + T(1));
    if (include_complement) g += std::log(T(1) - p) + T(1);
    d[i] = g * d_entropy[i];
  }
  return d;
}

// Mean binary cross-entropy between sigmoid(logits) and a constant domain
// label, computed in the numerically stable softplus form.
template <typename T>
T domain_bce(const Tensor<T>& logits, T label, Tensor<T>* d_logits = nullptr) {
  if (logits.empty()) throw ValidationError("domain_bce: empty logit map");
  if (!logits.all_finite())
    throw ValidationError("domain_bce: non-finite logits");
  const T inv_n = T(1) / static_cast<T>(logits.numel());
  T loss = 0;
  if (d_logits) *d_logits = Tensor<T>(logits.shape());
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const T x = logits[i];
    // max(x,0) - x*label + log(1 + exp(-|x|))
    const T ax = std::abs(x);
    loss += std::max(x, T(0)) - x * label + std::log1p(std::exp(-ax));
    if (d_logits) {
      const T s = T(1) / (T(1) + std::exp(-x));
      (*d_logits)[i] = (s - label) * inv_n;
    }
  }
  return loss * inv_n;
}

// L_m: mean binary cross-entropy of the two mask channels against the
// OD and OC labels (multi-label formulation; probabilities, not logits).
template <typename T>
T mask_loss(const Tensor<T>& mask_prob, const Tensor<T>& od_mask,
            const Tensor<T>& oc_mask, Tensor<T>* d_mask_prob = nullptr) {
  if (mask_prob.rank() != 4 || mask_prob.dim(1) != 2)
    throw ValidationError("mask_loss: expected (N,2,H,W) probabilities");
  if (od_mask.empty() || oc_mask.empty())
    throw ValidationError("mask_loss: missing source labels");
  const std::int64_t n = mask_prob.dim(0), h = mask_prob.dim(2),
                     w = mask_prob.dim(3);
  if (od_mask.numel() != n * h * w || oc_mask.numel() != n * h * w)
    throw ValidationError("mask_loss: label shape mismatch");
  const T inv = T(1) / static_cast<T>(mask_prob.numel());
  if (d_mask_prob) *d_mask_prob = Tensor<T>(mask_prob.shape());
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < 2; ++c) {
      const Tensor<T>& label = c == 0 ? od_mask : oc_mask;
      const T* yp = label.data() + i * h * w;
      const T* pp = mask_prob.data() + (i * 2 + c) * h * w;
      for (std::int64_t j = 0; j < h * w; ++j) {
        const T p = clamp_prob(pp[j]);
        const T y = yp[j];
        loss -= y * std::log(p) + (T(1) - y) * std::log(T(1) - p);
        if (d_mask_prob) {
          T g = T(0);
          if (pp[j] > static_cast<T>(kProbEps) &&
              pp[j] < T(1) - static_cast<T>(kProbEps))
            g = (-y / p + (T(1) - y) / (T(1) - p)) * inv;
          (*d_mask_prob)[(i * 2 + c) * h * w + j] = g;
        }
      }
    }
  return loss * inv;
}

// L_b: mean squared error between predicted and target boundary maps.
template <typename T>
T boundary_loss(const Tensor<T>& boundary_pred, const Tensor<T>& boundary_target,
                Tensor<T>* d_pred = nullptr) {
  if (!boundary_pred.same_shape(boundary_target))
    throw ValidationError("boundary_loss: shape mismatch " +
                          boundary_pred.shape_string() + " vs " +
                          boundary_target.shape_string());
  const T inv = T(1) / static_cast<T>(boundary_pred.numel());
  if (d_pred) *d_pred = Tensor<T>(boundary_pred.shape());
  T loss = 0;
  for (std::int64_t i = 0; i < boundary_pred.numel(); ++i) {
    const T d = boundary_pred[i] - boundary_target[i];
    loss += d * d;
    if (d_pred) (*d_pred)[i] = T(2) * d * inv;
  }
  return loss * inv;
}

// Discriminator training objective (Eq. 1 form for D_b, Eq. 4 for D_e):
// source maps labelled 1, target maps labelled 0, means over each batch.
// Inputs are detached values; gradients only reach the discriminator, and
// only when accumulate_grads is set.
template <typename T>
T discriminator_objective(adversary::PatchDiscriminator<T>& disc,
                          const Tensor<T>& source_maps,
                          const Tensor<T>& target_maps,
                          bool accumulate_grads = true) {
  if (source_maps.empty() || target_maps.empty() || source_maps.dim(0) == 0 ||
      target_maps.dim(0) == 0)
    throw ValidationError("discriminator_objective: empty batch");
  Tensor<T> d_logits;
  auto src_score = disc.forward(source_maps);
  const T l_src = domain_bce(src_score.logits, T(1), &d_logits);
  if (accumulate_grads) disc.backward(d_logits, true);
  auto tgt_score = disc.forward(target_maps);
  const T l_tgt = domain_bce(tgt_score.logits, T(0), &d_logits);
  if (accumulate_grads) disc.backward(d_logits, true);
  return l_src + l_tgt;
}

// Adversarial objective (Eqs. 2 and 5): target maps pushed toward the source
// label through a frozen discriminator. Writes d(loss)/d(maps) so the caller
// can continue backpropagation into the segmentation network.
template <typename T>
T adversarial_objective(adversary::PatchDiscriminator<T>& disc,
                        const Tensor<T>& target_maps,
                        Tensor<T>* d_maps = nullptr) {
  if (target_maps.empty() || target_maps.dim(0) == 0)
    throw ValidationError("adversarial_objective: empty batch");
  auto score = disc.forward(target_maps);
  Tensor<T> d_logits;
  const T loss =
      domain_bce(score.logits, T(1), d_maps ? &d_logits : nullptr);
  if (d_maps) *d_maps = disc.backward(d_logits, /*accumulate_param_grads=*/false);
  return loss;
}

// Eq. 6: assembles the combined segmentation objective from its parts.
template <typename T>
LossReport<T> total_seg_objective(T l_mask, T l_boundary, T l_adv_b, T l_adv_e,
                                  T lambda, T l_db = T(0), T l_de = T(0)) {
  LossReport<T> r;
  r.l_mask = l_mask;
  r.l_boundary = l_boundary;
  r.l_adv_b = l_adv_b;
  r.l_adv_e = l_adv_e;
  r.l_db = l_db;
  r.l_de = l_de;
  r.total_seg = l_mask + l_boundary + lambda * (l_adv_b + l_adv_e);
  return r;
}

}  // namespace beal::objectives
