#include "mmlop/udc.hpp"

#include <cmath>
#include <stdexcept>

namespace mmlop::udc {

namespace {

void check_shapes(std::size_t pr, std::size_t pc, std::size_t ar, std::size_t ac) {
  if (pr == 0) throw std::invalid_argument("udc: class count must be >= 1");
  if (pr != ar || pc != ac) {
    throw std::invalid_argument("udc: prompted features are " + std::to_string(pr) + "x" +
                                std::to_string(pc) + ", anchors are " + std::to_string(ar) +
                                "x" + std::to_string(ac));
  }
}

}  // namespace

Var apply_udc(const Var& prompted, const Var& anchor) {
  check_shapes(prompted.rows(), prompted.cols(), anchor.rows(), anchor.cols());
  Var residuals = sub(prompted, anchor);
  Var mean_residual = mean_rows(residuals);
  Var centered = sub_rowvec(residuals, mean_residual);
  Var corrected_pre = add(anchor, centered);
  try {
    return l2_normalize(corrected_pre);
  } catch (const std::domain_error&) {
    throw std::domain_error("udc: degenerate corrected feature (norm below 1e-12)");
  }
}

DriftReport apply_udc(const Tensor& prompted, const Tensor& anchor) {
  prompted.validate();
  anchor.validate();
  check_shapes(prompted.rows(), prompted.cols(), anchor.rows(), anchor.cols());
  for (std::size_t k = 0; k < anchor.rows(); ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < anchor.cols(); ++j) s += anchor.at(k, j) * anchor.at(k, j);
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw std::invalid_argument("udc: anchor row " + std::to_string(k) +
                                  " is not unit-norm");
    }
  }

  Tape tape;
  Var p = tape.constant(prompted);
  Var a = tape.constant(anchor);
  Var residuals = sub(p, a);
  Var mean_residual = mean_rows(residuals);
  Var corrected = apply_udc(p, a);

  DriftReport report;
  report.residuals = Tensor({residuals.rows(), residuals.cols()}, residuals.value());
  report.mean_residual =
      Tensor({mean_residual.rows(), mean_residual.cols()}, mean_residual.value());
  report.corrected = Tensor({corrected.rows(), corrected.cols()}, corrected.value());
  double s = 0.0;
  for (double x : report.mean_residual.data) s += x * x;
  report.drift_magnitude = std::sqrt(s);
  return report;
}

}  // namespace mmlop::udc
