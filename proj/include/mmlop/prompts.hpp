#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mmlop/tensor.hpp"

namespace mmlop::prompts {

// shared:      P_v = U V_v, P_t = U V_t with one up-projection per layer
// independent: P_v = U_v V_v, P_t = U_t V_t
// full_rank:   P_v, P_t stored directly (the unfactorized baseline)
enum class Mode { kShared, kIndependent, kFullRank };

std::string to_string(Mode mode);
Mode mode_from_string(const std::string& s);

struct PromptConfig {
  Mode mode = Mode::kShared;
  std::size_t depth = 2;     // layers carrying fresh prompts; 0 disables prompting
  std::size_t length = 4;    // text tokens T
  std::size_t v_length = 4;  // vision tokens V (= T in shared mode)
  std::size_t rank = 1;
  std::size_t d_v = 32;
  std::size_t d_t = 24;
  double init_std = 0.05;

  void validate() const;  // throws std::invalid_argument naming the violated constraint
};

struct PromptStack {
  PromptConfig cfg;
  // Factors by mode; unused vectors stay empty. All indexed by layer (0-based).
  std::vector<Tensor> u;          // shared: T x r
  std::vector<Tensor> u_v, u_t;   // independent: V x r, T x r
  std::vector<Tensor> v_v, v_t;   // low-rank modes: r x d_v, r x d_t
  std::vector<Tensor> p_v, p_t;   // full-rank: V x d_v, T x d_t

  struct BlockRef {
    std::string name;
    Tensor* tensor;
  };
  struct ConstBlockRef {
    std::string name;
    const Tensor* tensor;
  };
  // Trainable factors in a fixed, documented order (layer-major).
  std::vector<BlockRef> blocks();
  std::vector<ConstBlockRef> blocks() const;
};

// Draws every factor entry i.i.d. from N(0, cfg.init_std^2). Identical
// (cfg, seed) pairs produce bitwise-identical stacks.
PromptStack init_stack(const PromptConfig& cfg, std::uint64_t seed);

// Materializes (P_v, P_t) for 1-based layer l, outside any tape.
std::pair<Tensor, Tensor> materialize(const PromptStack& stack, std::size_t layer);

// Closed-form trainable-parameter count; no model is constructed.
std::size_t count_params(const PromptConfig& cfg);

// Tape handles to every factor, for in-graph materialization.
struct StackVars {
  Mode mode = Mode::kShared;
  std::size_t depth = 0;
  std::vector<Var> u, u_v, u_t, v_v, v_t, p_v, p_t;

  std::vector<Var> ordered() const;  // same order as PromptStack::blocks()
};

StackVars lift(Tape& tape, const PromptStack& stack, bool trainable = true);

Var materialize_vision(const StackVars& vars, std::size_t layer);  // 1-based
Var materialize_text(const StackVars& vars, std::size_t layer);

// Writes shared-mode up-projection entries as CSV rows
// (layer, token, rank_index, value); layers and tokens are 1-based.
void write_u_csv(const PromptStack& stack, std::ostream& os);

}  // namespace mmlop::prompts
