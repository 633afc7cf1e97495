#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mmlop/prompts.hpp"
#include "mmlop/tensor.hpp"

namespace mmlop::encoder {

enum class Modality { kVision, kText };

// A prepared encoder input: embedded content tokens with positional
// embeddings already added. Prompt tokens are injected later by the encoder
// and never appear here.
struct TokenSequence {
  Modality modality = Modality::kVision;
  Tensor embeddings;            // tokens x width
  std::size_t cls_index = 0;    // vision readout token
  std::size_t sos_index = 0;    // text start token
  std::size_t eos_index = 0;    // text readout token

  void validate() const;
};

struct BackboneConfig {
  std::size_t blocks = 4;
  std::size_t d_v = 32;
  std::size_t d_t = 24;
  std::size_t d_out = 16;
  std::size_t heads = 2;
  std::size_t patch_dim = 8;
  std::size_t vocab = 256;
  std::size_t max_vision_tokens = 16;
  std::size_t max_text_tokens = 16;
  std::size_t mlp_ratio = 4;
  double tau = 0.01;
  double ln_eps = 1e-5;

  void validate() const;
};

struct BlockWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
};

struct TowerWeights {
  std::vector<BlockWeights> blocks;
  Tensor ln_post_g, ln_post_b;
  Tensor out_proj;  // width x d_out
};

struct BackboneWeights {
  Tensor patch_proj;   // patch_dim x d_v
  Tensor patch_bias;   // 1 x d_v
  Tensor cls_token;    // 1 x d_v
  Tensor pos_vision;   // max_vision_tokens x d_v
  Tensor token_table;  // vocab x d_t
  Tensor pos_text;     // max_text_tokens x d_t
  TowerWeights vision, text;
};

// Special token ids in every text sequence.
constexpr int kSosId = 0;
constexpr int kEosId = 1;

// Miniature dual encoder. Weights are fixed at construction and never
// mutated afterwards; checksum() distills them for the frozen contract.
class FrozenBackbone {
 public:
  FrozenBackbone(BackboneConfig cfg, BackboneWeights weights);
  static FrozenBackbone random(const BackboneConfig& cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  const BackboneWeights& weights() const { return w_; }
  double tau() const { return cfg_.tau; }

  // FNV-1a over every weight byte in declared order.
  std::uint64_t checksum() const;

  TokenSequence prepare_image(const Tensor& patches) const;  // patches x patch_dim
  TokenSequence prepare_text(std::span<const int> content_ids) const;

  void save(const std::filesystem::path& path) const;
  static FrozenBackbone load(const std::filesystem::path& path);

 private:
  BackboneConfig cfg_;
  BackboneWeights w_;
};

// Prompted encoders. At every layer l <= stack depth the prompt slots
// entering the block are replaced by the layer's materialized prompts;
// beyond that depth the slots flow through untouched. The feature is the
// readout token after the final layer norm, projected to d_out and
// L2-normalized. Passing stack = nullptr (or a depth-0 stack) runs the plain
// frozen forward.
Var encode_image(Tape& tape, const FrozenBackbone& bb, const prompts::StackVars* stack,
                 const TokenSequence& x);
Var encode_text(Tape& tape, const FrozenBackbone& bb, const prompts::StackVars* stack,
                const TokenSequence& y);

// Same computation with the raw patches on the tape, so gradients reach the
// input. Used to construct synthetic data by feature matching.
Var encode_image_from_patches(Tape& tape, const FrozenBackbone& bb,
                              const prompts::StackVars* stack, const Var& patches);

// Value-level wrappers around scratch tapes.
Tensor encode_image_value(const FrozenBackbone& bb, const prompts::PromptStack* stack,
                          const TokenSequence& x);
Tensor encode_text_value(const FrozenBackbone& bb, const prompts::PromptStack* stack,
                         const TokenSequence& y);

struct ZeroShotAnchor {
  Tensor class_feats;              // C x d_out, unit-norm rows
  std::size_t template_count = 0;

  std::size_t class_count() const { return class_feats.rows(); }
  void validate() const;  // every row unit-norm within 1e-9
};

// g_k = normalize(mean over templates of encode_text(template ++ class_k)).
ZeroShotAnchor build_anchor(const FrozenBackbone& bb,
                            const std::vector<std::vector<int>>& classes,
                            const std::vector<std::vector<int>>& templates);

// Softmax over cosine similarities / tau; f must be unit-norm.
Tensor zero_shot_predict(const Tensor& f, const ZeroShotAnchor& anchor, double tau);

// Deterministic synthetic template prefixes: template j covers ids
// [first_id + j*len, first_id + (j+1)*len).
std::vector<std::vector<int>> make_templates(std::size_t count, std::size_t len = 3,
                                             int first_id = 2);

// First token id available for class vocabularies, past the template range.
constexpr int kFirstClassId = 2 + 60 * 3;

}  // namespace mmlop::encoder
