#pragma once

#include "mmlop/tensor.hpp"

namespace mmlop::udc {

struct DriftReport {
  Tensor residuals;       // C x d, r_k = prompted_k - anchor_k
  Tensor mean_residual;   // 1 x d
  Tensor corrected;       // C x d, unit-norm rows
  double drift_magnitude = 0.0;  // ||mean residual||_2
};

// Removes the class-shared component of the prompted-feature shift:
// corrected_k = normalize(anchor_k + (r_k - mean(r))). Differentiable
// through the prompted side; the anchor is expected to be a tape constant.
Var apply_udc(const Var& prompted, const Var& anchor);

// Value-level variant with the full report. Anchors must be unit-norm.
DriftReport apply_udc(const Tensor& prompted, const Tensor& anchor);

}  // namespace mmlop::udc
