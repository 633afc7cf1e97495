#include <cmath>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "mmlop/udc.hpp"
#include "support/test_support.hpp"

using namespace mmlop;
using mmlop::testing::random_tensor;

TEST_SUITE_BEGIN("udc");

namespace {

Tensor unit_rows(Tensor t) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double n = 0.0;
    for (std::size_t j = 0; j < t.cols(); ++j) n += t.at(i, j) * t.at(i, j);
    n = std::sqrt(n);
    for (std::size_t j = 0; j < t.cols(); ++j) t.at(i, j) /= n;
  }
  return t;
}

Tensor random_anchor(std::size_t c, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return unit_rows(random_tensor(c, d, rng));
}

}  // namespace

TEST_CASE("uniform drift cancels exactly") {
  Tensor anchor = random_anchor(5, 8, 31);
  std::vector<double> drift = {0.3, -0.2, 0.05, 0.4, -0.1, 0.0, 0.25, -0.3};
  Tensor prompted = anchor;
  for (std::size_t k = 0; k < prompted.rows(); ++k) {
    for (std::size_t j = 0; j < prompted.cols(); ++j) prompted.at(k, j) += drift[j];
  }
  udc::DriftReport r = udc::apply_udc(prompted, anchor);
  for (std::size_t i = 0; i < anchor.size(); ++i) {
    CHECK(std::abs(r.corrected.data[i] - anchor.data[i]) < 1e-12);
  }
  CHECK(r.drift_magnitude == doctest::Approx(testing::l2_norm(drift)).epsilon(1e-9));
}

TEST_CASE("single class reduces to the anchor") {
  Tensor anchor = random_anchor(1, 6, 7);
  std::mt19937_64 rng(8);
  Tensor prompted = random_tensor(1, 6, rng);
  udc::DriftReport r = udc::apply_udc(prompted, anchor);
  // r_bar == r_1, so the correction vanishes and normalize(anchor) = anchor.
  for (std::size_t i = 0; i < anchor.size(); ++i) {
    CHECK(r.corrected.data[i] == doctest::Approx(anchor.data[i]).epsilon(1e-12));
  }
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(r.mean_residual.data[j] == doctest::Approx(r.residuals.data[j]).epsilon(1e-12));
  }
}

TEST_CASE("hand-computed correction") {
  Tensor anchor = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  Tensor prompted = Tensor::matrix(2, 2, {1.2, 0.0, 0.0, 1.2});
  udc::DriftReport r = udc::apply_udc(prompted, anchor);
  CHECK(r.mean_residual.data[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.mean_residual.data[1] == doctest::Approx(0.1).epsilon(1e-12));
  // corrected_1 = normalize(1.1, -0.1), norm sqrt(1.22)
  CHECK(r.corrected.at(0, 0) == doctest::Approx(0.99589).epsilon(1e-5));
  CHECK(r.corrected.at(0, 1) == doctest::Approx(-0.09054).epsilon(1e-4));
  CHECK(r.corrected.at(1, 0) == doctest::Approx(-0.09054).epsilon(1e-4));
  CHECK(r.corrected.at(1, 1) == doctest::Approx(0.99589).epsilon(1e-5));
}

TEST_CASE("centered residuals sum to zero") {
  std::mt19937_64 rng(13);
  Tensor anchor = random_anchor(7, 10, 77);
  Tensor prompted = random_tensor(7, 10, rng);
  udc::DriftReport r = udc::apply_udc(prompted, anchor);
  for (std::size_t j = 0; j < 10; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) {
      s += r.residuals.at(k, j) - r.mean_residual.data[j];
    }
    CHECK(std::abs(s) < 1e-12);
  }
  // corrected features are unit-norm
  for (std::size_t k = 0; k < 7; ++k) {
    double n = 0.0;
    for (std::size_t j = 0; j < 10; ++j) n += r.corrected.at(k, j) * r.corrected.at(k, j);
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-9);
  }
}

TEST_CASE("idempotence when corrected vectors are already unit") {
  // anchors +/- e1; residual deviations u and -u chosen so that
  // ||anchor + u|| = 1 exactly; add a shared drift on top.
  double theta = 0.3;
  Tensor anchor = Tensor::matrix(2, 2, {1.0, 0.0, -1.0, 0.0});
  std::vector<double> u1 = {std::cos(theta) - 1.0, std::sin(theta)};
  std::vector<double> v = {0.4, -0.7};  // shared drift
  Tensor prompted = Tensor::matrix(
      2, 2,
      {1.0 + u1[0] + v[0], 0.0 + u1[1] + v[1], -1.0 - u1[0] + v[0], 0.0 - u1[1] + v[1]});
  udc::DriftReport first = udc::apply_udc(prompted, anchor);
  udc::DriftReport second = udc::apply_udc(first.corrected, anchor);
  CHECK(second.drift_magnitude < 1e-9);
}

TEST_CASE("argmax preserved under pure uniform drift") {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 100; ++trial) {
    std::size_t c = 2 + static_cast<std::size_t>(rng() % 6);
    std::size_t d = 4 + static_cast<std::size_t>(rng() % 8);
    Tensor anchor = unit_rows(random_tensor(c, d, rng));
    Tensor drift = random_tensor(1, d, rng, 0.5);
    Tensor prompted = anchor;
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t j = 0; j < d; ++j) prompted.at(k, j) += drift.data[j];
    }
    Tensor f = unit_rows(random_tensor(1, d, rng));
    udc::DriftReport r = udc::apply_udc(prompted, anchor);
    auto argmax = [&](const Tensor& feats) {
      std::size_t best = 0;
      double best_sim = -1e300;
      for (std::size_t k = 0; k < c; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += f.data[j] * feats.at(k, j);
        if (s > best_sim) {
          best_sim = s;
          best = k;
        }
      }
      return best;
    };
    CHECK(argmax(r.corrected) == argmax(anchor));
  }
}

TEST_CASE("translation invariance of the correction") {
  std::mt19937_64 rng(91);
  Tensor anchor = random_anchor(4, 6, 18);
  Tensor prompted = random_tensor(4, 6, rng);
  Tensor shift = random_tensor(1, 6, rng);
  Tensor shifted = prompted;
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t j = 0; j < 6; ++j) shifted.at(k, j) += shift.data[j];
  }
  udc::DriftReport a = udc::apply_udc(prompted, anchor);
  udc::DriftReport b = udc::apply_udc(shifted, anchor);
  for (std::size_t i = 0; i < a.corrected.size(); ++i) {
    CHECK(std::abs(a.corrected.data[i] - b.corrected.data[i]) < 1e-12);
  }
}

TEST_CASE("error paths") {
  Tensor anchor = random_anchor(2, 4, 3);
  std::mt19937_64 rng(4);
  CHECK_THROWS_AS(udc::apply_udc(random_tensor(3, 4, rng), anchor), std::invalid_argument);
  Tensor not_unit = anchor;
  not_unit.at(0, 0) *= 2.0;
  CHECK_THROWS_AS(udc::apply_udc(random_tensor(2, 4, rng), not_unit),
                  std::invalid_argument);

  // Degenerate corrected feature: with anchors e1, e2 and residuals
  // r = [(-1.7,0), (0.3,0)], the centered residual for class 0 is (-1,0),
  // which cancels its anchor exactly.
  Tensor a2 = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  Tensor p2 = Tensor::matrix(2, 2, {-0.7, 0.0, 0.3, 1.0});
  CHECK_THROWS_AS(udc::apply_udc(p2, a2), std::domain_error);
}

TEST_CASE("in-graph correction matches the report and is differentiable") {
  std::mt19937_64 rng(123);
  Tensor anchor = random_anchor(3, 5, 9);
  Tensor prompted0 = random_tensor(3, 5, rng);
  udc::DriftReport report = udc::apply_udc(prompted0, anchor);

  ScalarFn value = [&](std::span<const Tensor> p) {
    Tape tape;
    Var corrected = udc::apply_udc(tape.constant(p[0]), tape.constant(anchor));
    return sum(mul(corrected, corrected)).scalar() +
           mean(slice_rows(corrected, 0, 1)).scalar();
  };
  GradFn analytic = [&](std::span<const Tensor> p) {
    Tape tape;
    Var prompted = tape.leaf(p[0], true);
    Var corrected = udc::apply_udc(prompted, tape.constant(anchor));
    Var loss = add(sum(mul(corrected, corrected)), mean(slice_rows(corrected, 0, 1)));
    tape.backward(loss);
    return std::vector<Tensor>{prompted.grad_tensor()};
  };
  auto fd = grad_check(value, analytic, {prompted0}, {"prompted"});
  CHECK(fd.all_finite());
  CHECK(fd.max_rel_err() < 1e-5);

  Tape tape;
  Var corrected = udc::apply_udc(tape.constant(prompted0), tape.constant(anchor));
  CHECK(testing::max_abs_diff(corrected.value(), report.corrected.data) == 0.0);
}

TEST_SUITE_END();
