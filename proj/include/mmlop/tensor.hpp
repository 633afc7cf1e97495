#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mmlop {

// Dense row-major tensor of 64-bit floats with an optional gradient slot.
// 1-D shapes are treated as row vectors (1 x n) by all matrix operations.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in);

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor vec(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor scalar(double v);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;

  // Checks shape/data/grad consistency and that every value is finite.
  void validate() const;
};

// Fills a tensor with i.i.d. N(0, stddev^2) draws in row-major order.
void fill_normal(Tensor& t, std::mt19937_64& rng, double stddev);

class Tape;

// Handle to a node of a Tape's computation graph.
class Var {
 public:
  Var() = default;

  std::size_t rows() const;
  std::size_t cols() const;
  std::size_t size() const;
  const std::vector<double>& value() const;
  double scalar() const;  // requires size() == 1

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // valid after backward()
  Tensor grad_tensor() const;               // grad with this node's shape

  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

// Reverse-mode tape. Nodes are recorded in construction order, which is a
// valid topological order; backward() walks it once in reverse and
// accumulates gradients additively into every node that needs them.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(const Tensor& value, bool trainable);
  Var constant(const Tensor& value);

  // Runs exactly one backward pass from a scalar root. A second call without
  // zero_grad() is rejected.
  void backward(const Var& root);
  void zero_grad();

  std::size_t node_count() const { return nodes_.size(); }
  bool trainable(const Var& v) const;

 private:
  struct Node {
    std::size_t rows = 0, cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool trainable = false;
    std::function<void(Tape&)> backprop;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;

  Var make_node(std::size_t rows, std::size_t cols, std::vector<double> value,
                std::span<const std::size_t> parents);
  Node& node(std::size_t i) { return nodes_[i]; }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  std::vector<double>* grad_of(std::size_t i);

  friend class Var;

  friend Var add(const Var& a, const Var& b);
  friend Var sub(const Var& a, const Var& b);
  friend Var mul(const Var& a, const Var& b);
  friend Var scale(const Var& a, double c);
  friend Var add_rowvec(const Var& a, const Var& v);
  friend Var sub_rowvec(const Var& a, const Var& v);
  friend Var matmul(const Var& a, const Var& b);
  friend Var matmul_nt(const Var& a, const Var& b);
  friend Var slice_rows(const Var& a, std::size_t lo, std::size_t hi);
  friend Var slice_cols(const Var& a, std::size_t lo, std::size_t hi);
  friend Var concat_rows(std::span<const Var> parts);
  friend Var concat_cols(std::span<const Var> parts);
  friend Var softmax(const Var& a, double tau);
  friend Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);
  friend Var gelu(const Var& x);
  friend Var l2_normalize(const Var& x);
  friend Var l1_distance(const Var& a, const Var& b);
  friend Var sum(const Var& a);
  friend Var mean(const Var& a);
  friend Var mean_rows(const Var& a);
  friend Var elem_log(const Var& a);
};

// Elementwise / matrix operations. All deterministic with left-to-right
// row-major reduction order.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_rowvec(const Var& a, const Var& v);   // a: m x n, v: 1 x n
Var sub_rowvec(const Var& a, const Var& v);
Var matmul(const Var& a, const Var& b);       // (m x k)(k x n)
Var matmul_nt(const Var& a, const Var& b);    // (m x k)(n x k)^T -> m x n
Var slice_rows(const Var& a, std::size_t lo, std::size_t hi);
Var slice_cols(const Var& a, std::size_t lo, std::size_t hi);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var softmax(const Var& a, double tau);        // row-wise, max-subtracted
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var gelu(const Var& x);                       // exact erf form
Var l2_normalize(const Var& x);               // row-wise x / ||x||
Var l1_distance(const Var& a, const Var& b);  // scalar, subgradient 0 at ties
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);                  // column means, m x n -> 1 x n
Var elem_log(const Var& a);                   // domain: strictly positive

// Value-level softmax convenience used by inference paths.
Tensor softmax_value(const Tensor& v, double tau);

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.

struct GradCheckBlock {
  std::string name;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;  // |analytic - numeric| / max(1, |numeric|)
  bool non_finite = false;   // a probe or analytic value was not finite
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double max_rel_err() const;
  bool all_finite() const;
  bool pass(double tol) const { return all_finite() && max_rel_err() < tol; }
};

using ScalarFn = std::function<double(std::span<const Tensor>)>;
using GradFn = std::function<std::vector<Tensor>(std::span<const Tensor>)>;

// Compares `analytic(point)` against central finite differences of `f`
// block by block. Non-finite evaluations are flagged per block instead of
// aborting the whole check.
GradCheckReport grad_check(const ScalarFn& f, const GradFn& analytic,
                           std::vector<Tensor> point,
                           std::vector<std::string> names, double eps = 1e-6);

}  // namespace mmlop
