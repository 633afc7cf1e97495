#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mmlop/data.hpp"
#include "mmlop/encoder.hpp"
#include "mmlop/losses.hpp"
#include "mmlop/prompts.hpp"
#include "mmlop/tensor.hpp"
#include "mmlop/udc.hpp"

namespace mmlop::trainer {

struct TrainConfig {
  prompts::PromptConfig prompt;
  double lambda1 = 25.0;
  double lambda2 = 10.0;
  double tau = 0.01;
  double learning_rate = 0.0025;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool use_scl = true;
  bool use_udc = true;
  losses::KlVariant kl_variant = losses::KlVariant::kSymmetric;
  std::size_t anchor_templates = 60;

  void validate() const;
};

struct EvalResult {
  double base_acc = 0.0;   // percent
  double novel_acc = 0.0;  // percent
  double hm = 0.0;
  struct PerClass {
    int class_id = 0;
    std::size_t correct = 0;
    std::size_t total = 0;
  };
  std::vector<PerClass> per_class;
};

struct TrainResult {
  prompts::PromptStack stack;
  std::vector<losses::LossBreakdown> epoch_history;
};

double harmonic_mean(double a, double b);

// Frozen context for one training run: prepared base-class text sequences,
// the base anchor, prepared train images with precomputed frozen features
// and remapped labels.
struct TrainContext {
  std::vector<encoder::TokenSequence> class_texts;
  Tensor anchor;                               // C_b x d_out
  std::vector<encoder::TokenSequence> images;  // base-split train samples
  Tensor frozen_feats;                         // N x d_out
  std::vector<std::size_t> labels;             // remapped to [0, C_b)
};

TrainContext make_train_context(const TrainConfig& cfg, const encoder::FrozenBackbone& bb,
                                const encoder::ZeroShotAnchor& base_anchor,
                                const data::SyntheticTask& task);

// One iteration's loss graph over a batch of context sample indices.
struct LossGraph {
  Var total, ce, scl_text, scl_image, scl_logits;
  losses::LossBreakdown values(double lambda1, double lambda2) const;
};

LossGraph build_loss(Tape& tape, const encoder::FrozenBackbone& bb,
                     const prompts::StackVars& stack, const TrainContext& ctx,
                     std::span<const std::size_t> batch, const TrainConfig& cfg);

// Runs the training loop: materialize prompts, encode the batch, apply drift
// correction when toggled, backpropagate, plain SGD step. The backbone is
// never touched.
TrainResult train(const TrainConfig& cfg, const encoder::FrozenBackbone& bb,
                  const encoder::ZeroShotAnchor& base_anchor,
                  const data::SyntheticTask& task);

// Classifies each held-out sample by argmax cosine similarity against the
// drift-corrected class features of its own split.
EvalResult evaluate(const prompts::PromptStack& stack, const encoder::FrozenBackbone& bb,
                    const TrainConfig& cfg, const data::SyntheticTask& task);

// One row of a metrics table.
struct RunRow {
  std::string run_id;
  std::string value;  // ablation row label or swept value
  std::uint64_t seed = 0;
  double base_acc = 0.0;
  double novel_acc = 0.0;
  double hm = 0.0;
  std::size_t params = 0;
  std::size_t epochs = 0;
  std::string status = "ok";
};

struct SummaryRow {
  std::string value;
  double base_acc = 0.0, novel_acc = 0.0, hm = 0.0;
  std::size_t params = 0;
  std::size_t runs = 0;
};

extern const std::vector<std::string> kAblationRowLabels;

// Row configs of the cumulative ablation: full-rank baseline, + low-rank,
// + SCL, + UDC, + shared up-projection.
TrainConfig ablation_config(const TrainConfig& base_cfg, std::size_t row);

// One train/evaluate per ablation row per seed.
std::vector<RunRow> ablate(const TrainConfig& base_cfg, const data::SyntheticTask& task,
                           std::span<const std::uint64_t> seeds);

enum class SweepAxis { kDepth, kLength, kRank };

std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& s);

// One train/evaluate per (value, seed); invalid values are recorded per cell
// and the sweep continues.
std::vector<RunRow> sweep(const TrainConfig& base_cfg, SweepAxis axis,
                          std::span<const int> values, const data::SyntheticTask& task,
                          std::span<const std::uint64_t> seeds);

std::vector<SummaryRow> summarize(std::span<const RunRow> rows);

void write_metrics_csv(std::span<const RunRow> rows, std::ostream& os);
void write_summary_csv(std::span<const SummaryRow> rows, std::ostream& os);
void write_history_csv(std::span<const losses::LossBreakdown> history, std::ostream& os);

// Finite-difference check of the full training loss on the given task,
// batching the first `batch` context samples.
GradCheckReport check_gradients(const TrainConfig& cfg, const encoder::FrozenBackbone& bb,
                                const data::SyntheticTask& task, std::size_t batch,
                                double eps = 1e-6);

}  // namespace mmlop::trainer
