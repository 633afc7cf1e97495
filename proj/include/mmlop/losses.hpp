#pragma once

#include <cstddef>
#include <string>

#include "mmlop/tensor.hpp"

namespace mmlop::losses {

enum class KlVariant { kSymmetric, kAsymmetric };

std::string to_string(KlVariant v);
KlVariant kl_variant_from_string(const std::string& s);

// Raw (unweighted) loss components plus the weighted total:
// total = ce + lambda1 * scl_text + lambda2 * scl_image + scl_logits.
struct LossBreakdown {
  double ce = 0.0;
  double scl_text = 0.0;
  double scl_image = 0.0;
  double scl_logits = 0.0;
  double total = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
};

// -log softmax(<f_p, class_feats> / tau) at `label`. Differentiable through
// both the image feature and the class features.
Var cross_entropy(const Var& f_p, const Var& class_feats, std::size_t label, double tau);
double cross_entropy_value(const Tensor& f_p, const Tensor& class_feats,
                           std::size_t label, double tau);

// Sum of absolute coordinate differences. The anchor side is passed as a
// tape constant by callers, so no gradient reaches it.
Var scl_feature_l1(const Var& a, const Var& b);
double scl_feature_l1_value(const Tensor& a, const Tensor& b);

// KL between the tau-softmaxed logit rows. Symmetric variant is
// (KL(P||Q) + KL(Q||P)) / 2; asymmetric is KL(P||Q) with P the prompted side.
Var scl_logits(const Var& p_logits, const Var& q_logits, double tau, KlVariant variant);
double scl_logits_value(const Tensor& p_logits, const Tensor& q_logits, double tau,
                        KlVariant variant);

// Weighted composition on the tape; parts must be scalars.
Var total_loss(const Var& ce, const Var& scl_text, const Var& scl_image,
               const Var& scl_logits_term, double lambda1, double lambda2);

// Value-level breakdown; validates weights and the component signs.
LossBreakdown total_loss(double ce, double scl_text, double scl_image,
                         double scl_logits_term, double lambda1, double lambda2);

}  // namespace mmlop::losses
