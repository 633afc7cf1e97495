#include "mmlop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mmlop {

namespace {

std::string shape_str(std::size_t r, std::size_t c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

void check_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) {
    throw std::logic_error("operands belong to different tapes");
  }
}

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::invalid_argument(std::string(what) + ": non-finite value");
    }
  }
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  std::size_t expect = 1;
  for (std::size_t d : shape) expect *= d;
  if (shape.empty() || expect != data.size()) {
    throw std::invalid_argument("tensor: shape does not match data length");
  }
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) {
  return Tensor({rows, cols}, std::vector<double>(rows * cols, 0.0));
}

Tensor Tensor::vec(std::vector<double> values) {
  std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  if (values.size() != rows * cols) {
    throw std::invalid_argument("tensor: matrix data length mismatch");
  }
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, {v}); }

std::size_t Tensor::rows() const { return shape.size() == 1 ? 1 : shape.at(0); }

std::size_t Tensor::cols() const {
  return shape.size() == 1 ? shape.at(0) : shape.at(1);
}

double& Tensor::at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }

double Tensor::at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

void Tensor::validate() const {
  std::size_t expect = 1;
  for (std::size_t d : shape) expect *= d;
  if (shape.empty() || expect != data.size()) {
    throw std::invalid_argument("tensor: shape does not match data length");
  }
  if (shape.size() > 2) {
    throw std::invalid_argument("tensor: rank > 2 is not supported");
  }
  if (grad && grad->size() != data.size()) {
    throw std::invalid_argument("tensor: gradient shape differs from value shape");
  }
  check_finite(data, "tensor");
  if (grad) check_finite(*grad, "tensor gradient");
}

void fill_normal(Tensor& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& x : t.data) x = stddev * dist(rng);
}

// ---------------------------------------------------------------------------
// Tape plumbing

Var Tape::make_node(std::size_t rows, std::size_t cols, std::vector<double> value,
                    std::span<const std::size_t> parents) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  for (std::size_t p : parents) {
    if (nodes_[p].requires_grad) n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

std::vector<double>* Tape::grad_of(std::size_t i) {
  return nodes_[i].requires_grad ? &nodes_[i].grad : nullptr;
}

Var Tape::leaf(const Tensor& value, bool trainable) {
  value.validate();
  Var v = make_node(value.rows(), value.cols(), value.data, {});
  nodes_[v.index()].requires_grad = trainable;
  nodes_[v.index()].trainable = trainable;
  return v;
}

Var Tape::constant(const Tensor& value) { return leaf(value, false); }

bool Tape::trainable(const Var& v) const { return node(v.index()).trainable; }

void Tape::backward(const Var& root) {
  if (root.tape() != this) {
    throw std::logic_error("backward: root belongs to a different tape");
  }
  if (backward_done_) {
    throw std::logic_error(
        "backward: gradients already accumulated on this tape; call zero_grad() first");
  }
  Node& r = nodes_[root.index()];
  if (r.rows * r.cols != 1) {
    throw std::logic_error("backward: root must be scalar, got " +
                           shape_str(r.rows, r.cols));
  }
  backward_done_ = true;
  if (!r.requires_grad) return;  // constant graph, nothing to fill
  for (std::size_t i = 0; i <= root.index(); ++i) {
    if (nodes_[i].requires_grad) nodes_[i].grad.assign(nodes_[i].value.size(), 0.0);
  }
  r.grad[0] = 1.0;
  for (std::size_t i = root.index() + 1; i-- > 0;) {
    if (nodes_[i].requires_grad && nodes_[i].backprop) nodes_[i].backprop(*this);
  }
}

void Tape::zero_grad() {
  for (Node& n : nodes_) n.grad.clear();
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Var accessors

std::size_t Var::rows() const { return tape_->node(index_).rows; }
std::size_t Var::cols() const { return tape_->node(index_).cols; }
std::size_t Var::size() const { return value().size(); }

const std::vector<double>& Var::value() const { return tape_->node(index_).value; }

double Var::scalar() const {
  if (size() != 1) {
    throw std::logic_error("scalar(): node is " + shape_str(rows(), cols()));
  }
  return value()[0];
}

bool Var::requires_grad() const { return tape_->node(index_).requires_grad; }

bool Var::has_grad() const { return !tape_->node(index_).grad.empty(); }

const std::vector<double>& Var::grad() const {
  const auto& g = tape_->node(index_).grad;
  if (g.empty()) {
    throw std::logic_error("grad(): no gradient on this node; run backward() first");
  }
  return g;
}

Tensor Var::grad_tensor() const { return Tensor({rows(), cols()}, grad()); }

// ---------------------------------------------------------------------------
// Operations

Var add(const Var& a, const Var& b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.rows(), a.cols()) +
                                " vs " + shape_str(b.rows(), b.cols()));
  }
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  std::size_t parents[] = {a.index(), b.index()};
  Var c = t.make_node(a.rows(), a.cols(), std::move(out), parents);
  std::size_t self = c.index(), pa = a.index(), pb = b.index();
  t.node(self).backprop = [self, pa, pb](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gb = tp.grad_of(pb)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
    }
  };
  return c;
}

Var sub(const Var& a, const Var& b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.rows(), a.cols()) +
                                " vs " + shape_str(b.rows(), b.cols()));
  }
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  std::size_t parents[] = {a.index(), b.index()};
  Var c = t.make_node(a.rows(), a.cols(), std::move(out), parents);
  std::size_t self = c.index(), pa = a.index(), pb = b.index();
  t.node(self).backprop = [self, pa, pb](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gb = tp.grad_of(pb)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  };
  return c;
}

Var mul(const Var& a, const Var& b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.rows(), a.cols()) +
                                " vs " + shape_str(b.rows(), b.cols()));
  }
  std::vector<double> out(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  std::size_t parents[] = {a.index(), b.index()};
  Var c = t.make_node(a.rows(), a.cols(), std::move(out), parents);
  std::size_t self = c.index(), pa = a.index(), pb = b.index();
  t.node(self).backprop = [self, pa, pb](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& av2 = tp.node(pa).value;
    const auto& bv2 = tp.node(pb).value;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv2[i];
    }
    if (auto* gb = tp.grad_of(pb)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av2[i];
    }
  };
  return c;
}

Var scale(const Var& a, double c) {
  Tape& t = *a.tape();
  std::vector<double> out(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  std::size_t parents[] = {a.index()};
  Var r = t.make_node(a.rows(), a.cols(), std::move(out), parents);
  std::size_t self = r.index(), pa = a.index();
  t.node(self).backprop = [self, pa, c](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += c * g[i];
    }
  };
  return r;
}

Var add_rowvec(const Var& a, const Var& v) {
  check_same_tape(a, v);
  Tape& t = *a.tape();
  if (v.rows() != 1 || v.cols() != a.cols()) {
    throw std::invalid_argument("add_rowvec: shape mismatch " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(v.rows(), v.cols()));
  }
  std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto& av = a.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + vv[j];
  }
  std::size_t parents[] = {a.index(), v.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index(), pv = v.index();
  t.node(self).backprop = [self, pa, pv, m, n](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gv = tp.grad_of(pv)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*gv)[j] += g[i * n + j];
      }
    }
  };
  return c;
}

Var sub_rowvec(const Var& a, const Var& v) {
  check_same_tape(a, v);
  Tape& t = *a.tape();
  if (v.rows() != 1 || v.cols() != a.cols()) {
    throw std::invalid_argument("sub_rowvec: shape mismatch " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(v.rows(), v.cols()));
  }
  std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  const auto& av = a.value();
  const auto& vv = v.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] - vv[j];
  }
  std::size_t parents[] = {a.index(), v.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index(), pv = v.index();
  t.node(self).backprop = [self, pa, pv, m, n](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    }
    if (auto* gv = tp.grad_of(pv)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*gv)[j] -= g[i * n + j];
      }
    }
  };
  return c;
}

Var matmul(const Var& a, const Var& b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()));
  }
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[p * n + j];
      out[i * n + j] = acc;
    }
  }
  std::size_t parents[] = {a.index(), b.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index(), pb = b.index();
  t.node(self).backprop = [self, pa, pb, m, k, n](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& av2 = tp.node(pa).value;
    const auto& bv2 = tp.node(pb).value;
    if (auto* ga = tp.grad_of(pa)) {  // dA += G B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv2[p * n + j];
          (*ga)[i * k + p] += acc;
        }
      }
    }
    if (auto* gb = tp.grad_of(pb)) {  // dB += A^T G
      for (std::size_t p = 0; p < k; ++p) {
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += av2[i * k + p] * g[i * n + j];
          (*gb)[p * n + j] += acc;
        }
      }
    }
  };
  return c;
}

Var matmul_nt(const Var& a, const Var& b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: inner dimensions disagree, " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()) + "^T");
  }
  std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      out[i * n + j] = acc;
    }
  }
  std::size_t parents[] = {a.index(), b.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index(), pb = b.index();
  t.node(self).backprop = [self, pa, pb, m, k, n](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& av2 = tp.node(pa).value;
    const auto& bv2 = tp.node(pb).value;
    if (auto* ga = tp.grad_of(pa)) {  // dA += G B
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv2[j * k + p];
          (*ga)[i * k + p] += acc;
        }
      }
    }
    if (auto* gb = tp.grad_of(pb)) {  // dB += G^T A
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += g[i * n + j] * av2[i * k + p];
          (*gb)[j * k + p] += acc;
        }
      }
    }
  };
  return c;
}

Var slice_rows(const Var& a, std::size_t lo, std::size_t hi) {
  Tape& t = *a.tape();
  if (lo > hi || hi > a.rows()) {
    throw std::out_of_range("slice_rows: range out of bounds");
  }
  std::size_t n = a.cols(), m = hi - lo;
  std::vector<double> out(a.value().begin() + lo * n, a.value().begin() + hi * n);
  std::size_t parents[] = {a.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index();
  t.node(self).backprop = [self, pa, lo, n](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[lo * n + i] += g[i];
    }
  };
  return c;
}

Var slice_cols(const Var& a, std::size_t lo, std::size_t hi) {
  Tape& t = *a.tape();
  if (lo > hi || hi > a.cols()) {
    throw std::out_of_range("slice_cols: range out of bounds");
  }
  std::size_t m = a.rows(), n = a.cols(), w = hi - lo;
  std::vector<double> out(m * w);
  const auto& av = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * n + lo + j];
  }
  std::size_t parents[] = {a.index()};
  Var c = t.make_node(m, w, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index();
  t.node(self).backprop = [self, pa, lo, m, n, w](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) (*ga)[i * n + lo + j] += g[i * w + j];
      }
    }
  };
  return c;
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Tape& t = *parts[0].tape();
  std::size_t n = parts[0].cols(), m = 0;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p);
    if (p.cols() != n) {
      throw std::invalid_argument("concat_rows: column mismatch " +
                                  shape_str(p.rows(), p.cols()) + " vs 1x" +
                                  std::to_string(n));
    }
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  std::vector<std::size_t> idx, offs;
  for (const Var& p : parts) {
    idx.push_back(p.index());
    offs.push_back(out.size());
    out.insert(out.end(), p.value().begin(), p.value().end());
  }
  Var c = t.make_node(m, n, std::move(out), idx);
  std::size_t self = c.index();
  t.node(self).backprop = [self, idx, offs](Tape& tp) {
    const auto& g = tp.node(self).grad;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (auto* gp = tp.grad_of(idx[k])) {
        for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += g[offs[k] + i];
      }
    }
  };
  return c;
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Tape& t = *parts[0].tape();
  std::size_t m = parts[0].rows(), n = 0;
  for (const Var& p : parts) {
    check_same_tape(parts[0], p);
    if (p.rows() != m) {
      throw std::invalid_argument("concat_cols: row mismatch " +
                                  shape_str(p.rows(), p.cols()) + " vs " +
                                  std::to_string(m) + " rows");
    }
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::vector<std::size_t> idx, offs, widths;
  std::size_t off = 0;
  for (const Var& p : parts) {
    idx.push_back(p.index());
    offs.push_back(off);
    widths.push_back(p.cols());
    const auto& pv = p.value();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * n + off + j] = pv[i * p.cols() + j];
    }
    off += p.cols();
  }
  Var c = t.make_node(m, n, std::move(out), idx);
  std::size_t self = c.index();
  t.node(self).backprop = [self, idx, offs, widths, m, n](Tape& tp) {
    const auto& g = tp.node(self).grad;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (auto* gp = tp.grad_of(idx[k])) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) {
            (*gp)[i * widths[k] + j] += g[i * n + offs[k] + j];
          }
        }
      }
    }
  };
  return c;
}

Var softmax(const Var& a, double tau) {
  if (tau <= 0.0) {
    throw std::domain_error("softmax: tau must be positive, got " + std::to_string(tau));
  }
  Tape& t = *a.tape();
  std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw std::invalid_argument("softmax: empty input");
  std::vector<double> out(m * n);
  const auto& av = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = av[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp((av[i * n + j] - mx) / tau);
      s += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  std::size_t parents[] = {a.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index();
  t.node(self).backprop = [self, pa, m, n, tau](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& p = tp.node(self).value;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * p[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          (*ga)[i * n + j] += p[i * n + j] * (g[i * n + j] - dot) / tau;
        }
      }
    }
  };
  return c;
}

Tensor softmax_value(const Tensor& v, double tau) {
  Tape t;
  Var out = softmax(t.constant(v), tau);
  return Tensor({out.rows(), out.cols()}, out.value());
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  Tape& t = *x.tape();
  std::size_t m = x.rows(), n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw std::invalid_argument("layer_norm: parameter shape mismatch for width " +
                                std::to_string(n));
  }
  std::vector<double> out(m * n), xhat(m * n), inv_sigma(m);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = xv[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xv[i * n + j] - mu) * is;
      out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  std::size_t parents[] = {x.index(), gain.index(), bias.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), px = x.index(), pg = gain.index(), pb = bias.index();
  t.node(self).backprop = [self, px, pg, pb, m, n, xhat = std::move(xhat),
                           inv_sigma = std::move(inv_sigma)](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& gv2 = tp.node(pg).value;
    if (auto* gg = tp.grad_of(pg)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g[i * n + j] * xhat[i * n + j];
      }
    }
    if (auto* gb = tp.grad_of(pb)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
      }
    }
    if (auto* gx = tp.grad_of(px)) {
      for (std::size_t i = 0; i < m; ++i) {
        double mean_h = 0.0, mean_hx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double h = g[i * n + j] * gv2[j];
          mean_h += h;
          mean_hx += h * xhat[i * n + j];
        }
        mean_h /= static_cast<double>(n);
        mean_hx /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j) {
          double h = g[i * n + j] * gv2[j];
          (*gx)[i * n + j] +=
              inv_sigma[i] * (h - mean_h - xhat[i * n + j] * mean_hx);
        }
      }
    }
  };
  return c;
}

Var gelu(const Var& x) {
  Tape& t = *x.tape();
  std::vector<double> out(x.size());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * norm_cdf(xv[i]);
  std::size_t parents[] = {x.index()};
  Var c = t.make_node(x.rows(), x.cols(), std::move(out), parents);
  std::size_t self = c.index(), px = x.index();
  t.node(self).backprop = [self, px](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& xv2 = tp.node(px).value;
    if (auto* gx = tp.grad_of(px)) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        (*gx)[i] += g[i] * (norm_cdf(xv2[i]) + xv2[i] * norm_pdf(xv2[i]));
      }
    }
  };
  return c;
}

Var l2_normalize(const Var& x) {
  Tape& t = *x.tape();
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n), norms(m);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += xv[i * n + j] * xv[i * n + j];
    double norm = std::sqrt(s);
    if (norm < 1e-12) {
      throw std::domain_error("l2_normalize: row " + std::to_string(i) +
                              " has norm below 1e-12");
    }
    norms[i] = norm;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] / norm;
  }
  std::size_t parents[] = {x.index()};
  Var c = t.make_node(m, n, std::move(out), parents);
  std::size_t self = c.index(), px = x.index();
  t.node(self).backprop = [self, px, m, n, norms = std::move(norms)](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& y = tp.node(self).value;
    if (auto* gx = tp.grad_of(px)) {
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          (*gx)[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / norms[i];
        }
      }
    }
  };
  return c;
}

Var l1_distance(const Var& a, const Var& b) {
  check_same_tape(a, b);
  Tape& t = *a.tape();
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("l1_distance: shape mismatch " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()));
  }
  const auto& av = a.value();
  const auto& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
  std::size_t parents[] = {a.index(), b.index()};
  Var c = t.make_node(1, 1, {s}, parents);
  std::size_t self = c.index(), pa = a.index(), pb = b.index();
  t.node(self).backprop = [self, pa, pb](Tape& tp) {
    double g = tp.node(self).grad[0];
    const auto& av2 = tp.node(pa).value;
    const auto& bv2 = tp.node(pb).value;
    auto* ga = tp.grad_of(pa);
    auto* gb = tp.grad_of(pb);
    for (std::size_t i = 0; i < av2.size(); ++i) {
      double d = av2[i] - bv2[i];
      double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (ga) (*ga)[i] += g * sgn;
      if (gb) (*gb)[i] -= g * sgn;
    }
  };
  return c;
}

Var sum(const Var& a) {
  Tape& t = *a.tape();
  const auto& av = a.value();
  double s = 0.0;
  for (double x : av) s += x;
  std::size_t parents[] = {a.index()};
  Var c = t.make_node(1, 1, {s}, parents);
  std::size_t self = c.index(), pa = a.index();
  t.node(self).backprop = [self, pa](Tape& tp) {
    double g = tp.node(self).grad[0];
    if (auto* ga = tp.grad_of(pa)) {
      for (double& x : *ga) x += g;
    }
  };
  return c;
}

Var mean(const Var& a) {
  Tape& t = *a.tape();
  std::size_t n = a.size();
  double s = 0.0;
  for (double x : a.value()) s += x;
  double m = s / static_cast<double>(n);
  double inv = 1.0 / static_cast<double>(n);
  std::size_t parents[] = {a.index()};
  Var c = t.make_node(1, 1, {m}, parents);
  std::size_t self = c.index(), pa = a.index();
  t.node(self).backprop = [self, pa, inv](Tape& tp) {
    double g = tp.node(self).grad[0] * inv;
    if (auto* ga = tp.grad_of(pa)) {
      for (double& x : *ga) x += g;
    }
  };
  return c;
}

Var mean_rows(const Var& a) {
  Tape& t = *a.tape();
  std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  const auto& av = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
  std::size_t parents[] = {a.index()};
  Var c = t.make_node(1, n, std::move(out), parents);
  std::size_t self = c.index(), pa = a.index();
  double inv = 1.0 / static_cast<double>(m);
  t.node(self).backprop = [self, pa, m, n, inv](Tape& tp) {
    const auto& g = tp.node(self).grad;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*ga)[i * n + j] += g[j] * inv;
      }
    }
  };
  return c;
}

Var elem_log(const Var& a) {
  Tape& t = *a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] <= 0.0) {
      throw std::domain_error("log: non-positive input " + std::to_string(av[i]));
    }
    out[i] = std::log(av[i]);
  }
  std::size_t parents[] = {a.index()};
  Var c = t.make_node(a.rows(), a.cols(), std::move(out), parents);
  std::size_t self = c.index(), pa = a.index();
  t.node(self).backprop = [self, pa](Tape& tp) {
    const auto& g = tp.node(self).grad;
    const auto& av2 = tp.node(pa).value;
    if (auto* ga = tp.grad_of(pa)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / av2[i];
    }
  };
  return c;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

double GradCheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& b : blocks) m = std::max(m, b.max_rel_err);
  return m;
}

bool GradCheckReport::all_finite() const {
  for (const auto& b : blocks) {
    if (b.non_finite) return false;
  }
  return true;
}

GradCheckReport grad_check(const ScalarFn& f, const GradFn& analytic,
                           std::vector<Tensor> point, std::vector<std::string> names,
                           double eps) {
  if (names.size() != point.size()) {
    throw std::invalid_argument("grad_check: one name required per block");
  }
  if (eps <= 0.0) throw std::domain_error("grad_check: eps must be positive");

  GradCheckReport report;
  std::vector<Tensor> analytic_grads = analytic(point);
  if (analytic_grads.size() != point.size()) {
    throw std::invalid_argument("grad_check: analytic gradient block count mismatch");
  }

  for (std::size_t b = 0; b < point.size(); ++b) {
    GradCheckBlock blk;
    blk.name = names[b];
    const Tensor& ag = analytic_grads[b];
    if (ag.size() != point[b].size()) {
      throw std::invalid_argument("grad_check: analytic gradient shape mismatch in block " +
                                  blk.name);
    }
    for (std::size_t i = 0; i < point[b].size(); ++i) {
      if (!std::isfinite(ag.data[i])) {
        blk.non_finite = true;
        continue;
      }
      double saved = point[b].data[i];
      point[b].data[i] = saved + eps;
      double fp = f(point);
      point[b].data[i] = saved - eps;
      double fm = f(point);
      point[b].data[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        blk.non_finite = true;
        continue;
      }
      double numeric = (fp - fm) / (2.0 * eps);
      double abs_err = std::abs(ag.data[i] - numeric);
      double rel_err = abs_err / std::max(1.0, std::abs(numeric));
      blk.max_abs_err = std::max(blk.max_abs_err, abs_err);
      blk.max_rel_err = std::max(blk.max_rel_err, rel_err);
    }
    report.blocks.push_back(std::move(blk));
  }
  return report;
}

}  // namespace mmlop
