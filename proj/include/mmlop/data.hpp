#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmlop/encoder.hpp"
#include "mmlop/prompts.hpp"
#include "mmlop/tensor.hpp"

namespace mmlop::data {

// Generator parameters for a synthetic few-shot vision-language task. The
// backbone config and seed are part of the spec so a task is a pure function
// of (spec, seed).
struct TaskSpec {
  std::size_t classes = 8;
  std::size_t shots = 16;           // train samples per class
  std::size_t eval_per_class = 25;  // held-out samples per class
  std::size_t patches = 4;
  double sigma_data = 0.5;   // input-space noise scale
  double novel_shift = 0.6;   // prototype offset applied to novel classes
  std::size_t class_token_count = 2;
  std::size_t gen_templates = 60;  // ensemble size for the generator's anchor

  // Prototype construction: gradient steps on raw patches, maximizing the
  // image feature's alignment with the class anchor's deviation from the
  // anchor mean, until the nearest-anchor margin reaches `target_margin`.
  double target_margin = 0.10;
  std::size_t align_iters = 400;
  double align_step = 0.5;

  encoder::BackboneConfig backbone;
  std::uint64_t backbone_seed = 1234;

  void validate() const;
};

struct Sample {
  Tensor patches;  // patches x patch_dim
  int label = 0;
};

struct SyntheticTask {
  TaskSpec spec;
  std::uint64_t seed = 0;
  std::vector<Tensor> prototypes;               // per class, patches x patch_dim
  std::vector<std::vector<int>> class_tokens;   // per class text token ids
  std::vector<Sample> train_samples;            // shots per class, all classes
  std::vector<Sample> eval_samples;             // eval_per_class per class

  std::size_t class_count() const { return spec.classes; }
  std::vector<int> base_classes() const;   // first ceil(C/2) class ids
  std::vector<int> novel_classes() const;
  encoder::FrozenBackbone make_backbone() const;

  void validate() const;
};

struct SplitView {
  std::vector<int> class_ids;
  std::vector<const Sample*> train;
  std::vector<const Sample*> eval;
};

// Deterministic per (spec, seed). Class text tokens are distinct per class;
// vision prototypes are constructed to land near their class text anchor
// under the task's frozen backbone, and novel-class prototypes are then
// offset by novel_shift.
SyntheticTask gen_synthetic(const TaskSpec& spec, std::uint64_t seed);

// First ceil(C/2) sorted class ids are base, the rest novel.
std::pair<SplitView, SplitView> split_base_novel(const SyntheticTask& task);

// Token ids reserved for class vocabularies (past the template range).
std::vector<int> class_token_ids(std::size_t class_id, std::size_t count);

// ---------------------------------------------------------------------------
// Embedding interchange files (JSON).

enum class EmbeddingKind { kAnchor, kPrompted, kImage };

std::string to_string(EmbeddingKind k);
EmbeddingKind embedding_kind_from_string(const std::string& s);

struct EmbeddingFile {
  EmbeddingKind kind = EmbeddingKind::kAnchor;
  std::size_t dim = 0;
  std::size_t count = 0;
  std::vector<int> labels;
  Tensor values;  // count x dim

  void validate() const;  // anchor kind additionally requires unit rows (1e-6)
};

void save_embeddings(const EmbeddingFile& e, const std::filesystem::path& path);
EmbeddingFile load_embeddings(const std::filesystem::path& path);

// Task and prompt-stack files share the same JSON wrapper style.
void save_task(const SyntheticTask& task, const std::filesystem::path& path);
SyntheticTask load_task(const std::filesystem::path& path);

void save_stack(const prompts::PromptStack& stack, const std::filesystem::path& path);
prompts::PromptStack load_stack(const std::filesystem::path& path);

}  // namespace mmlop::data
