#include "mmlop/losses.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace mmlop::losses {

std::string to_string(KlVariant v) {
  return v == KlVariant::kSymmetric ? "symmetric" : "asymmetric";
}

KlVariant kl_variant_from_string(const std::string& s) {
  if (s == "symmetric") return KlVariant::kSymmetric;
  if (s == "asymmetric") return KlVariant::kAsymmetric;
  throw std::invalid_argument("unknown KL variant '" + s +
                              "' (expected symmetric|asymmetric)");
}

Var cross_entropy(const Var& f_p, const Var& class_feats, std::size_t label, double tau) {
  if (f_p.rows() != 1) {
    throw std::invalid_argument("cross_entropy: feature must be a row vector");
  }
  if (label >= class_feats.rows()) {
    throw std::invalid_argument("cross_entropy: label " + std::to_string(label) +
                                " out of range for " + std::to_string(class_feats.rows()) +
                                " classes");
  }
  Var logits = matmul_nt(f_p, class_feats);  // 1 x C cosine similarities
  Var probs = softmax(logits, tau);
  Var p_label = slice_cols(probs, label, label + 1);
  return scale(elem_log(p_label), -1.0);
}

double cross_entropy_value(const Tensor& f_p, const Tensor& class_feats,
                           std::size_t label, double tau) {
  Tape tape;
  return cross_entropy(tape.constant(f_p), tape.constant(class_feats), label, tau)
      .scalar();
}

Var scl_feature_l1(const Var& a, const Var& b) { return l1_distance(a, b); }

double scl_feature_l1_value(const Tensor& a, const Tensor& b) {
  Tape tape;
  return scl_feature_l1(tape.constant(a), tape.constant(b)).scalar();
}

namespace {

// KL(P||Q) = sum_i P_i (log P_i - log Q_i); softmax outputs are strictly
// positive for finite logits, so the 0*log(0) convention never triggers.
Var kl_divergence(const Var& p, const Var& q) {
  return sum(mul(p, sub(elem_log(p), elem_log(q))));
}

}  // namespace

Var scl_logits(const Var& p_logits, const Var& q_logits, double tau, KlVariant variant) {
  if (tau <= 0.0) {
    throw std::domain_error("scl_logits: tau must be positive, got " + std::to_string(tau));
  }
  if (p_logits.size() != q_logits.size()) {
    throw std::invalid_argument("scl_logits: logit length mismatch");
  }
  Var p = softmax(p_logits, tau);
  Var q = softmax(q_logits, tau);
  if (variant == KlVariant::kAsymmetric) return kl_divergence(p, q);
  return add(scale(kl_divergence(p, q), 0.5), scale(kl_divergence(q, p), 0.5));
}

double scl_logits_value(const Tensor& p_logits, const Tensor& q_logits, double tau,
                        KlVariant variant) {
  Tape tape;
  return scl_logits(tape.constant(p_logits), tape.constant(q_logits), tau, variant)
      .scalar();
}

Var total_loss(const Var& ce, const Var& scl_text, const Var& scl_image,
               const Var& scl_logits_term, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw std::invalid_argument("total_loss: weights must be nonnegative");
  }
  Var weighted = add(ce, scale(scl_text, lambda1));
  weighted = add(weighted, scale(scl_image, lambda2));
  return add(weighted, scl_logits_term);
}

LossBreakdown total_loss(double ce, double scl_text, double scl_image,
                         double scl_logits_term, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw std::invalid_argument("total_loss: weights must be nonnegative");
  }
  std::array<double*, 4> parts = {&ce, &scl_text, &scl_image, &scl_logits_term};
  for (double* p : parts) {
    if (!std::isfinite(*p)) throw std::invalid_argument("total_loss: non-finite component");
    if (*p < 0.0) {
      if (*p < -1e-12) {
        throw std::invalid_argument("total_loss: negative component " + std::to_string(*p));
      }
      *p = 0.0;  // rounding guard
    }
  }
  LossBreakdown b;
  b.ce = ce;
  b.scl_text = scl_text;
  b.scl_image = scl_image;
  b.scl_logits = scl_logits_term;
  b.lambda1 = lambda1;
  b.lambda2 = lambda2;
  b.total = ce + lambda1 * scl_text + lambda2 * scl_image + scl_logits_term;
  return b;
}

}  // namespace mmlop::losses
