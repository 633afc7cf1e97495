#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>

#include "doctest.h"
#include "mmlop/tensor.hpp"
#include "support/test_support.hpp"

using namespace mmlop;
using mmlop::testing::max_abs_diff;
using mmlop::testing::naive_matmul;
using mmlop::testing::random_tensor;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
  Tensor t = Tensor::matrix(2, 2, {1, 2, 3, 4});
  t.grad = std::vector<double>{1, 2, 3};
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
  t.grad = std::vector<double>{1, 2, 3, 4};
  CHECK_NOTHROW(t.validate());
  t.data[0] = std::nan("");
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("matmul identity") {
  Tape tape;
  Var i2 = tape.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  Var b = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  Var c = matmul(i2, b);
  CHECK(c.value() == b.value());
}

TEST_CASE("matmul rank-1 outer product") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix(2, 1, {1, 2}));
  Var b = tape.constant(Tensor::matrix(1, 2, {3, 4}));
  Var c = matmul(a, b);
  CHECK(c.value() == std::vector<double>{3, 4, 6, 8});
}

TEST_CASE("matmul against triple-loop oracle") {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor(3, 4, rng);
  Tensor b = random_tensor(4, 2, rng);
  Tape tape;
  Var c = matmul(tape.constant(a), tape.constant(b));
  Tensor expect = naive_matmul(a, b);
  CHECK(max_abs_diff(c.value(), expect.data) < 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
  Tape tape;
  Var a = tape.constant(Tensor::zeros(2, 3));
  Var b = tape.constant(Tensor::zeros(4, 5));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
}

TEST_CASE("softmax symmetry") {
  Tape tape;
  Var v = tape.constant(Tensor::vec({2.5, 2.5, 2.5}));
  Var p = softmax(v, 0.7);
  for (double x : p.value()) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax hand value") {
  Tape tape;
  Var p = softmax(tape.constant(Tensor::vec({1.0, 0.0})), 1.0);
  CHECK(p.value()[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(p.value()[1] == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("softmax sharpens monotonically as tau decreases") {
  double prev = 0.0;
  for (double tau : {1.0, 0.5, 0.25, 0.1}) {
    Tape tape;
    Var p = softmax(tape.constant(Tensor::vec({1.0, 0.0})), tau);
    CHECK(p.value()[0] > prev);
    prev = p.value()[0];
  }
  CHECK(prev > 0.9999);  // approaching [1, 0]
}

TEST_CASE("softmax output is a probability vector") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor v = random_tensor(1, 7, rng, 30.0);  // include large-magnitude logits
    Tape tape;
    Var p = softmax(tape.constant(v), 0.37);
    double s = 0.0;
    for (double x : p.value()) {
      CHECK(x >= 0.0);
      s += x;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax rejects non-positive tau") {
  Tape tape;
  Var v = tape.constant(Tensor::vec({1.0, 2.0}));
  CHECK_THROWS_AS(softmax(v, 0.0), std::domain_error);
  CHECK_THROWS_AS(softmax(v, -1.0), std::domain_error);
}

TEST_CASE("backward of sum is all-ones") {
  Tape tape;
  Var x = tape.leaf(Tensor::vec({1.0, -2.0, 3.0}), true);
  tape.backward(sum(x));
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("backward of l1 norm is sign(x)") {
  Tape tape;
  Var x = tape.leaf(Tensor::vec({1.5, -2.0, 0.25}), true);
  Var zero = tape.constant(Tensor::vec({0.0, 0.0, 0.0}));
  tape.backward(l1_distance(x, zero));
  CHECK(x.grad() == std::vector<double>{1, -1, 1});
}

TEST_CASE("backward accumulation is additive") {
  Tape tape;
  Var x = tape.leaf(Tensor::vec({4.0}), true);
  Var y = add(x, x);
  tape.backward(sum(y));
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("repeated backward without reset is rejected") {
  Tape tape;
  Var x = tape.leaf(Tensor::vec({1.0}), true);
  Var y = sum(x);
  tape.backward(y);
  CHECK_THROWS_AS(tape.backward(y), std::logic_error);
  tape.zero_grad();
  CHECK_NOTHROW(tape.backward(y));
  CHECK(x.grad()[0] == 1.0);
}

TEST_CASE("backward requires a scalar root") {
  Tape tape;
  Var x = tape.leaf(Tensor::vec({1.0, 2.0}), true);
  Var y = scale(x, 2.0);
  CHECK_THROWS_AS(tape.backward(y), std::logic_error);
}

TEST_CASE("grad_check on a quadratic") {
  ScalarFn f = [](std::span<const Tensor> p) {
    double s = 0.0;
    for (double x : p[0].data) s += x * x;
    return s;
  };
  GradFn analytic = [](std::span<const Tensor> p) {
    Tensor g = p[0];
    for (double& x : g.data) x *= 2.0;
    return std::vector<Tensor>{g};
  };
  auto report = grad_check(f, analytic, {Tensor::vec({1.0, 2.0})}, {"x"});
  REQUIRE(report.blocks.size() == 1);
  CHECK(report.all_finite());
  CHECK(report.blocks[0].max_abs_err < 1e-9);
}

TEST_CASE("grad_check on a constant function") {
  ScalarFn f = [](std::span<const Tensor>) { return 42.0; };
  GradFn analytic = [](std::span<const Tensor> p) {
    Tensor g = p[0];
    for (double& x : g.data) x = 0.0;
    return std::vector<Tensor>{g};
  };
  auto report = grad_check(f, analytic, {Tensor::vec({1.0, -3.0, 2.0})}, {"x"});
  CHECK(report.max_rel_err() < 1e-9);
}

TEST_CASE("grad_check flags non-finite probes instead of aborting") {
  ScalarFn f = [](std::span<const Tensor> p) { return std::sqrt(p[0].data[0]); };
  GradFn analytic = [](std::span<const Tensor> p) {
    Tensor g = p[0];
    g.data[0] = 0.5 / std::sqrt(p[0].data[0]);
    return std::vector<Tensor>{g};
  };
  auto report = grad_check(f, analytic, {Tensor::vec({1e-7})}, {"x"}, 1e-6);
  REQUIRE(report.blocks.size() == 1);
  CHECK(report.blocks[0].non_finite);
  CHECK_FALSE(report.all_finite());
}

// Master gradient property: every differentiable primitive agrees with
// central finite differences on random small tensors.
namespace {

using Builder = std::function<Var(Tape&, std::vector<Var>&)>;

void check_op_gradient(const std::string& op, const Builder& build,
                       std::vector<Tensor> point, double tol = 1e-5) {
  CAPTURE(op);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < point.size(); ++i) names.push_back("arg" + std::to_string(i));
  ScalarFn f = [&](std::span<const Tensor> p) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : p) vars.push_back(tape.leaf(t, false));
    return build(tape, vars).scalar();
  };
  GradFn analytic = [&](std::span<const Tensor> p) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : p) vars.push_back(tape.leaf(t, true));
    tape.backward(build(tape, vars));
    std::vector<Tensor> grads;
    for (const Var& v : vars) grads.push_back(v.grad_tensor());
    return grads;
  };
  auto report = grad_check(f, analytic, std::move(point), std::move(names), 1e-6);
  CHECK(report.all_finite());
  CHECK(report.max_rel_err() < tol);
}

Var weighted(Tape& tape, const Var& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(v.rows(), v.cols(), rng);
  return sum(mul(v, tape.constant(w)));
}

}  // namespace

TEST_CASE("finite differences agree for every primitive") {
  std::mt19937_64 rng(99);

  check_op_gradient("add", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, add(v[0], v[1]), 1); },
      {random_tensor(3, 4, rng), random_tensor(3, 4, rng)});
  check_op_gradient("sub", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, sub(v[0], v[1]), 2); },
      {random_tensor(3, 4, rng), random_tensor(3, 4, rng)});
  check_op_gradient("mul", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, mul(v[0], v[1]), 3); },
      {random_tensor(3, 4, rng), random_tensor(3, 4, rng)});
  check_op_gradient("scale", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, scale(v[0], -1.7), 4); },
      {random_tensor(2, 5, rng)});
  check_op_gradient("add_rowvec", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, add_rowvec(v[0], v[1]), 5); },
      {random_tensor(3, 4, rng), random_tensor(1, 4, rng)});
  check_op_gradient("sub_rowvec", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, sub_rowvec(v[0], v[1]), 6); },
      {random_tensor(3, 4, rng), random_tensor(1, 4, rng)});
  check_op_gradient("matmul", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, matmul(v[0], v[1]), 7); },
      {random_tensor(3, 4, rng), random_tensor(4, 2, rng)});
  check_op_gradient("matmul_nt", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, matmul_nt(v[0], v[1]), 8); },
      {random_tensor(3, 4, rng), random_tensor(2, 4, rng)});
  check_op_gradient("slice_rows", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, slice_rows(v[0], 1, 3), 9); },
      {random_tensor(4, 3, rng)});
  check_op_gradient("slice_cols", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, slice_cols(v[0], 1, 4), 10); },
      {random_tensor(3, 5, rng)});
  check_op_gradient("concat_rows", 
      [](Tape& t, std::vector<Var>& v) {
        std::vector<Var> parts = {v[0], v[1]};
        return weighted(t, concat_rows(parts), 11);
      },
      {random_tensor(2, 3, rng), random_tensor(3, 3, rng)});
  check_op_gradient("concat_cols", 
      [](Tape& t, std::vector<Var>& v) {
        std::vector<Var> parts = {v[0], v[1]};
        return weighted(t, concat_cols(parts), 12);
      },
      {random_tensor(3, 2, rng), random_tensor(3, 4, rng)});
  check_op_gradient("softmax", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, softmax(v[0], 0.7), 13); },
      {random_tensor(2, 5, rng)});
  check_op_gradient("layer_norm", 
      [](Tape& t, std::vector<Var>& v) {
        return weighted(t, layer_norm(v[0], v[1], v[2]), 14);
      },
      {random_tensor(3, 6, rng), random_tensor(1, 6, rng, 0.3),
       random_tensor(1, 6, rng, 0.3)});
  check_op_gradient("gelu", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, gelu(v[0]), 15); },
      {random_tensor(3, 4, rng)});
  check_op_gradient("l2_normalize", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, l2_normalize(v[0]), 16); },
      {random_tensor(3, 5, rng)});
  check_op_gradient("l1_distance", 
      [](Tape& t, std::vector<Var>& v) { return l1_distance(v[0], v[1]); },
      {random_tensor(2, 4, rng), random_tensor(2, 4, rng)});
  check_op_gradient("sum", [](Tape& t, std::vector<Var>& v) { return sum(mul(v[0], v[0])); },
                    {random_tensor(3, 3, rng)});
  check_op_gradient("mean", [](Tape& t, std::vector<Var>& v) { return mean(mul(v[0], v[0])); },
                    {random_tensor(3, 3, rng)});
  check_op_gradient("mean_rows", 
      [](Tape& t, std::vector<Var>& v) { return weighted(t, mean_rows(v[0]), 17); },
      {random_tensor(4, 3, rng)});
  {
    Tensor pos = random_tensor(2, 4, rng);
    for (double& x : pos.data) x = std::abs(x) + 0.5;
    check_op_gradient("elem_log", 
        [](Tape& t, std::vector<Var>& v) { return weighted(t, elem_log(v[0]), 18); },
        {pos});
  }
}

TEST_CASE("forward passes are deterministic") {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor(4, 4, rng);
  Tensor g = random_tensor(1, 4, rng);
  Tensor b = random_tensor(1, 4, rng);
  auto run = [&]() {
    Tape tape;
    Var x = layer_norm(tape.constant(a), tape.constant(g), tape.constant(b));
    Var y = softmax(matmul_nt(gelu(x), x), 0.9);
    return mean(y).scalar();
  };
  double r1 = run();
  double r2 = run();
  CHECK(std::memcmp(&r1, &r2, sizeof(double)) == 0);
}

TEST_CASE("constants receive no gradient storage") {
  Tape tape;
  Var c = tape.constant(Tensor::vec({1.0, 2.0}));
  Var x = tape.leaf(Tensor::vec({3.0, 4.0}), true);
  tape.backward(sum(mul(c, x)));
  CHECK(x.has_grad());
  CHECK_FALSE(c.has_grad());
  CHECK_FALSE(tape.trainable(c));
  CHECK(tape.trainable(x));
}

TEST_SUITE_END();
