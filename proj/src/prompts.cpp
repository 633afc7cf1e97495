#include "mmlop/prompts.hpp"

#include <cmath>
#include <iomanip>
#include <stdexcept>

namespace mmlop::prompts {

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::kShared: return "shared";
    case Mode::kIndependent: return "independent";
    case Mode::kFullRank: return "full-rank";
  }
  throw std::logic_error("unknown prompt mode");
}

Mode mode_from_string(const std::string& s) {
  if (s == "shared") return Mode::kShared;
  if (s == "independent") return Mode::kIndependent;
  if (s == "full-rank" || s == "full_rank") return Mode::kFullRank;
  throw std::invalid_argument("unknown prompt mode '" + s +
                              "' (expected shared|independent|full-rank)");
}

void PromptConfig::validate() const {
  if (length == 0) throw std::invalid_argument("prompt config: length must be >= 1");
  if (v_length == 0) throw std::invalid_argument("prompt config: v_length must be >= 1");
  if (d_v == 0 || d_t == 0) {
    throw std::invalid_argument("prompt config: embedding widths must be >= 1");
  }
  if (rank == 0) throw std::invalid_argument("prompt config: rank must be >= 1");
  if (rank > std::min(d_v, d_t)) {
    throw std::invalid_argument("prompt config: rank " + std::to_string(rank) +
                                " exceeds min(d_v, d_t) = " +
                                std::to_string(std::min(d_v, d_t)));
  }
  if (mode == Mode::kShared && length != v_length) {
    throw std::invalid_argument("prompt config: shared mode requires T = V, got T=" +
                                std::to_string(length) + " V=" + std::to_string(v_length));
  }
  if (!(init_std >= 0.0) || !std::isfinite(init_std)) {
    throw std::invalid_argument("prompt config: init_std must be finite and >= 0");
  }
}

std::vector<PromptStack::BlockRef> PromptStack::blocks() {
  std::vector<BlockRef> out;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    std::string suffix = "[" + std::to_string(l + 1) + "]";
    switch (cfg.mode) {
      case Mode::kShared:
        out.push_back({"U" + suffix, &u[l]});
        out.push_back({"V_v" + suffix, &v_v[l]});
        out.push_back({"V_t" + suffix, &v_t[l]});
        break;
      case Mode::kIndependent:
        out.push_back({"U_v" + suffix, &u_v[l]});
        out.push_back({"U_t" + suffix, &u_t[l]});
        out.push_back({"V_v" + suffix, &v_v[l]});
        out.push_back({"V_t" + suffix, &v_t[l]});
        break;
      case Mode::kFullRank:
        out.push_back({"P_v" + suffix, &p_v[l]});
        out.push_back({"P_t" + suffix, &p_t[l]});
        break;
    }
  }
  return out;
}

std::vector<PromptStack::ConstBlockRef> PromptStack::blocks() const {
  auto mutable_blocks = const_cast<PromptStack*>(this)->blocks();
  std::vector<ConstBlockRef> out;
  out.reserve(mutable_blocks.size());
  for (auto& b : mutable_blocks) out.push_back({b.name, b.tensor});
  return out;
}

PromptStack init_stack(const PromptConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PromptStack stack;
  stack.cfg = cfg;
  std::mt19937_64 rng(seed);
  auto draw = [&](std::size_t rows, std::size_t cols) {
    Tensor t = Tensor::zeros(rows, cols);
    fill_normal(t, rng, cfg.init_std);
    return t;
  };
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    switch (cfg.mode) {
      case Mode::kShared:
        stack.u.push_back(draw(cfg.length, cfg.rank));
        stack.v_v.push_back(draw(cfg.rank, cfg.d_v));
        stack.v_t.push_back(draw(cfg.rank, cfg.d_t));
        break;
      case Mode::kIndependent:
        stack.u_v.push_back(draw(cfg.v_length, cfg.rank));
        stack.u_t.push_back(draw(cfg.length, cfg.rank));
        stack.v_v.push_back(draw(cfg.rank, cfg.d_v));
        stack.v_t.push_back(draw(cfg.rank, cfg.d_t));
        break;
      case Mode::kFullRank:
        stack.p_v.push_back(draw(cfg.v_length, cfg.d_v));
        stack.p_t.push_back(draw(cfg.length, cfg.d_t));
        break;
    }
  }
  return stack;
}

namespace {

void check_layer(const PromptConfig& cfg, std::size_t layer) {
  if (layer < 1 || layer > cfg.depth) {
    throw std::out_of_range("prompt layer " + std::to_string(layer) +
                            " out of range [1, " + std::to_string(cfg.depth) + "]");
  }
}

Tensor matmul_plain(const Tensor& a, const Tensor& b) {
  Tape t;
  Var c = matmul(t.constant(a), t.constant(b));
  return Tensor({c.rows(), c.cols()}, c.value());
}

}  // namespace

std::pair<Tensor, Tensor> materialize(const PromptStack& stack, std::size_t layer) {
  check_layer(stack.cfg, layer);
  std::size_t l = layer - 1;
  switch (stack.cfg.mode) {
    case Mode::kShared:
      return {matmul_plain(stack.u[l], stack.v_v[l]),
              matmul_plain(stack.u[l], stack.v_t[l])};
    case Mode::kIndependent:
      return {matmul_plain(stack.u_v[l], stack.v_v[l]),
              matmul_plain(stack.u_t[l], stack.v_t[l])};
    case Mode::kFullRank:
      return {stack.p_v[l], stack.p_t[l]};
  }
  throw std::logic_error("unknown prompt mode");
}

std::size_t count_params(const PromptConfig& cfg) {
  cfg.validate();
  switch (cfg.mode) {
    case Mode::kShared:
      return cfg.depth * (cfg.length * cfg.rank + cfg.rank * cfg.d_v + cfg.rank * cfg.d_t);
    case Mode::kIndependent:
      return cfg.depth * (cfg.v_length * cfg.rank + cfg.rank * cfg.d_v +
                          cfg.length * cfg.rank + cfg.rank * cfg.d_t);
    case Mode::kFullRank:
      return cfg.depth * (cfg.v_length * cfg.d_v + cfg.length * cfg.d_t);
  }
  throw std::logic_error("unknown prompt mode");
}

std::vector<Var> StackVars::ordered() const {
  std::vector<Var> out;
  for (std::size_t l = 0; l < depth; ++l) {
    switch (mode) {
      case Mode::kShared:
        out.push_back(u[l]);
        out.push_back(v_v[l]);
        out.push_back(v_t[l]);
        break;
      case Mode::kIndependent:
        out.push_back(u_v[l]);
        out.push_back(u_t[l]);
        out.push_back(v_v[l]);
        out.push_back(v_t[l]);
        break;
      case Mode::kFullRank:
        out.push_back(p_v[l]);
        out.push_back(p_t[l]);
        break;
    }
  }
  return out;
}

StackVars lift(Tape& tape, const PromptStack& stack, bool trainable) {
  StackVars vars;
  vars.mode = stack.cfg.mode;
  vars.depth = stack.cfg.depth;
  for (std::size_t l = 0; l < stack.cfg.depth; ++l) {
    switch (stack.cfg.mode) {
      case Mode::kShared:
        vars.u.push_back(tape.leaf(stack.u[l], trainable));
        vars.v_v.push_back(tape.leaf(stack.v_v[l], trainable));
        vars.v_t.push_back(tape.leaf(stack.v_t[l], trainable));
        break;
      case Mode::kIndependent:
        vars.u_v.push_back(tape.leaf(stack.u_v[l], trainable));
        vars.u_t.push_back(tape.leaf(stack.u_t[l], trainable));
        vars.v_v.push_back(tape.leaf(stack.v_v[l], trainable));
        vars.v_t.push_back(tape.leaf(stack.v_t[l], trainable));
        break;
      case Mode::kFullRank:
        vars.p_v.push_back(tape.leaf(stack.p_v[l], trainable));
        vars.p_t.push_back(tape.leaf(stack.p_t[l], trainable));
        break;
    }
  }
  return vars;
}

Var materialize_vision(const StackVars& vars, std::size_t layer) {
  if (layer < 1 || layer > vars.depth) {
    throw std::out_of_range("prompt layer " + std::to_string(layer) +
                            " out of range [1, " + std::to_string(vars.depth) + "]");
  }
  std::size_t l = layer - 1;
  switch (vars.mode) {
    case Mode::kShared: return matmul(vars.u[l], vars.v_v[l]);
    case Mode::kIndependent: return matmul(vars.u_v[l], vars.v_v[l]);
    case Mode::kFullRank: return vars.p_v[l];
  }
  throw std::logic_error("unknown prompt mode");
}

Var materialize_text(const StackVars& vars, std::size_t layer) {
  if (layer < 1 || layer > vars.depth) {
    throw std::out_of_range("prompt layer " + std::to_string(layer) +
                            " out of range [1, " + std::to_string(vars.depth) + "]");
  }
  std::size_t l = layer - 1;
  switch (vars.mode) {
    case Mode::kShared: return matmul(vars.u[l], vars.v_t[l]);
    case Mode::kIndependent: return matmul(vars.u_t[l], vars.v_t[l]);
    case Mode::kFullRank: return vars.p_t[l];
  }
  throw std::logic_error("unknown prompt mode");
}

void write_u_csv(const PromptStack& stack, std::ostream& os) {
  if (stack.cfg.mode != Mode::kShared) {
    throw std::invalid_argument("export-u requires a shared-mode stack, got mode " +
                                to_string(stack.cfg.mode));
  }
  os << "layer,token,rank_index,value\n";
  os << std::setprecision(17);
  for (std::size_t l = 0; l < stack.cfg.depth; ++l) {
    const Tensor& u = stack.u[l];
    for (std::size_t t = 0; t < u.rows(); ++t) {
      for (std::size_t r = 0; r < u.cols(); ++r) {
        os << (l + 1) << "," << (t + 1) << "," << (r + 1) << "," << u.at(t, r) << "\n";
      }
    }
  }
}

}  // namespace mmlop::prompts
