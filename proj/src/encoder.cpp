#include "mmlop/encoder.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mmlop::encoder {

namespace {

constexpr char kMagic[5] = {'M', 'M', 'B', 'B', '1'};

void check_positive(std::size_t v, const char* name) {
  if (v == 0) {
    throw std::invalid_argument(std::string("backbone config: ") + name + " must be >= 1");
  }
}

// Visits every weight tensor with its expected shape, in the declared
// serialization order. Shared by shape validation, save/load and checksum.
template <typename Weights, typename Fn>
void for_each_weight(Weights& w, const BackboneConfig& cfg, Fn&& fn) {
  fn(w.patch_proj, cfg.patch_dim, cfg.d_v);
  fn(w.patch_bias, std::size_t{1}, cfg.d_v);
  fn(w.cls_token, std::size_t{1}, cfg.d_v);
  fn(w.pos_vision, cfg.max_vision_tokens, cfg.d_v);
  fn(w.token_table, cfg.vocab, cfg.d_t);
  fn(w.pos_text, cfg.max_text_tokens, cfg.d_t);
  auto tower = [&](auto& tw, std::size_t d) {
    for (auto& b : tw.blocks) {
      fn(b.wq, d, d);
      fn(b.bq, std::size_t{1}, d);
      fn(b.wk, d, d);
      fn(b.bk, std::size_t{1}, d);
      fn(b.wv, d, d);
      fn(b.bv, std::size_t{1}, d);
      fn(b.wo, d, d);
      fn(b.bo, std::size_t{1}, d);
      fn(b.ln1_g, std::size_t{1}, d);
      fn(b.ln1_b, std::size_t{1}, d);
      fn(b.ln2_g, std::size_t{1}, d);
      fn(b.ln2_b, std::size_t{1}, d);
      fn(b.w1, d, d * cfg.mlp_ratio);
      fn(b.b1, std::size_t{1}, d * cfg.mlp_ratio);
      fn(b.w2, d * cfg.mlp_ratio, d);
      fn(b.b2, std::size_t{1}, d);
    }
    fn(tw.ln_post_g, std::size_t{1}, d);
    fn(tw.ln_post_b, std::size_t{1}, d);
    fn(tw.out_proj, d, cfg.d_out);
  };
  tower(w.vision, cfg.d_v);
  tower(w.text, cfg.d_t);
}

std::uint64_t fnv1a(std::uint64_t hash, const void* bytes, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    hash ^= p[i];
    hash *= 1099511628211ULL;
  }
  return hash;
}

struct BlockConsts {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln1_g, ln1_b, ln2_g, ln2_b;
  Var w1, b1, w2, b2;
};

BlockConsts lift_block(Tape& tape, const BlockWeights& b) {
  return {tape.constant(b.wq), tape.constant(b.bq), tape.constant(b.wk),
          tape.constant(b.bk), tape.constant(b.wv), tape.constant(b.bv),
          tape.constant(b.wo), tape.constant(b.bo), tape.constant(b.ln1_g),
          tape.constant(b.ln1_b), tape.constant(b.ln2_g), tape.constant(b.ln2_b),
          tape.constant(b.w1), tape.constant(b.b1), tape.constant(b.w2),
          tape.constant(b.b2)};
}

Var attention(const BackboneConfig& cfg, const BlockConsts& b, const Var& x,
              std::size_t width) {
  std::size_t dh = width / cfg.heads;
  Var q = add_rowvec(matmul(x, b.wq), b.bq);
  Var k = add_rowvec(matmul(x, b.wk), b.bk);
  Var v = add_rowvec(matmul(x, b.wv), b.bv);
  std::vector<Var> head_outs;
  double scale_tau = std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var qh = slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = slice_cols(v, h * dh, (h + 1) * dh);
    Var att = softmax(matmul_nt(qh, kh), scale_tau);
    head_outs.push_back(matmul(att, vh));
  }
  Var o = concat_cols(head_outs);
  return add_rowvec(matmul(o, b.wo), b.bo);
}

Var transformer_block(const BackboneConfig& cfg, const BlockConsts& b, Var x,
                      std::size_t width) {
  Var a = layer_norm(x, b.ln1_g, b.ln1_b, cfg.ln_eps);
  x = add(x, attention(cfg, b, a, width));
  Var m = layer_norm(x, b.ln2_g, b.ln2_b, cfg.ln_eps);
  Var hidden = gelu(add_rowvec(matmul(m, b.w1), b.b1));
  Var mlp_out = add_rowvec(matmul(hidden, b.w2), b.b2);
  return add(x, mlp_out);
}

Var replace_rows(const Var& x, const Var& rows, std::size_t lo, std::size_t hi) {
  std::vector<Var> parts;
  if (lo > 0) parts.push_back(slice_rows(x, 0, lo));
  parts.push_back(rows);
  if (hi < x.rows()) parts.push_back(slice_rows(x, hi, x.rows()));
  return concat_rows(parts);
}

// Shared tower driver. `tokens` holds the prepared content; prompt slots are
// inserted (zero-initialized) ahead of the loop and replaced at every layer
// l <= stack depth.
Var run_tower(Tape& tape, const BackboneConfig& cfg, const TowerWeights& tw,
              Var tokens, std::size_t readout, Modality mod,
              const prompts::StackVars* stack) {
  std::size_t width = tokens.cols();
  bool prompted = stack != nullptr && stack->depth > 0;
  std::size_t slot_lo = 0, slot_hi = 0;
  if (prompted) {
    if (stack->depth > cfg.blocks) {
      throw std::invalid_argument("prompt depth " + std::to_string(stack->depth) +
                                  " exceeds backbone blocks " +
                                  std::to_string(cfg.blocks));
    }
    Var first = mod == Modality::kVision ? prompts::materialize_vision(*stack, 1)
                                         : prompts::materialize_text(*stack, 1);
    if (first.cols() != width) {
      throw std::invalid_argument("prompt width mismatch: prompts are " +
                                  std::to_string(first.cols()) + ", encoder width is " +
                                  std::to_string(width));
    }
    std::size_t count = first.rows();
    Var zeros = tape.constant(Tensor::zeros(count, width));
    if (mod == Modality::kVision) {
      slot_lo = 0;
      slot_hi = count;
    } else {
      slot_lo = 1;  // immediately after SOS
      slot_hi = 1 + count;
    }
    tokens = mod == Modality::kVision
                 ? concat_rows(std::array<Var, 2>{zeros, tokens})
                 : concat_rows(std::array<Var, 3>{slice_rows(tokens, 0, 1), zeros,
                                                  slice_rows(tokens, 1, tokens.rows())});
    if (readout >= slot_lo) readout += count;
  }
  for (std::size_t l = 1; l <= cfg.blocks; ++l) {
    if (prompted && l <= stack->depth) {
      Var p = mod == Modality::kVision ? prompts::materialize_vision(*stack, l)
                                       : prompts::materialize_text(*stack, l);
      tokens = replace_rows(tokens, p, slot_lo, slot_hi);
    }
    tokens = transformer_block(cfg, lift_block(tape, tw.blocks[l - 1]), tokens, width);
  }
  Var h = layer_norm(tokens, tape.constant(tw.ln_post_g), tape.constant(tw.ln_post_b),
                     cfg.ln_eps);
  Var row = slice_rows(h, readout, readout + 1);
  return l2_normalize(matmul(row, tape.constant(tw.out_proj)));
}

Var front_end_vision(Tape& tape, const FrozenBackbone& bb, const Var& patches) {
  const BackboneConfig& cfg = bb.config();
  const BackboneWeights& w = bb.weights();
  if (patches.cols() != cfg.patch_dim) {
    throw std::invalid_argument("patch width mismatch: got " +
                                std::to_string(patches.cols()) + ", expected " +
                                std::to_string(cfg.patch_dim));
  }
  std::size_t m = patches.rows();
  if (1 + m > cfg.max_vision_tokens) {
    throw std::invalid_argument("vision sequence too long for positional table");
  }
  Tensor cls_row = Tensor::zeros(1, cfg.d_v);
  for (std::size_t j = 0; j < cfg.d_v; ++j) {
    cls_row.data[j] = w.cls_token.data[j] + w.pos_vision.at(0, j);
  }
  Tensor pos_rows = Tensor::zeros(m, cfg.d_v);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < cfg.d_v; ++j) pos_rows.at(i, j) = w.pos_vision.at(1 + i, j);
  }
  Var projected = add_rowvec(matmul(patches, tape.constant(w.patch_proj)),
                             tape.constant(w.patch_bias));
  Var content = add(projected, tape.constant(pos_rows));
  return concat_rows(std::array<Var, 2>{tape.constant(cls_row), content});
}

}  // namespace

// ---------------------------------------------------------------------------

void TokenSequence::validate() const {
  embeddings.validate();
  if (embeddings.shape.size() != 2) {
    throw std::invalid_argument("token sequence: embeddings must be tokens x width");
  }
  std::size_t s = embeddings.rows();
  if (modality == Modality::kVision) {
    if (cls_index >= s) throw std::invalid_argument("token sequence: cls index out of bounds");
  } else {
    if (sos_index >= s || eos_index >= s) {
      throw std::invalid_argument("token sequence: SOS/EOS index out of bounds");
    }
  }
}

void BackboneConfig::validate() const {
  check_positive(blocks, "blocks");
  check_positive(d_v, "d_v");
  check_positive(d_t, "d_t");
  check_positive(d_out, "d_out");
  check_positive(heads, "heads");
  check_positive(patch_dim, "patch_dim");
  check_positive(vocab, "vocab");
  check_positive(max_vision_tokens, "max_vision_tokens");
  check_positive(max_text_tokens, "max_text_tokens");
  check_positive(mlp_ratio, "mlp_ratio");
  if (d_v % heads != 0 || d_t % heads != 0) {
    throw std::invalid_argument("backbone config: widths must be divisible by heads");
  }
  if (vocab <= static_cast<std::size_t>(kEosId)) {
    throw std::invalid_argument("backbone config: vocab must cover SOS/EOS");
  }
  if (tau <= 0.0) throw std::invalid_argument("backbone config: tau must be positive");
  if (ln_eps <= 0.0) throw std::invalid_argument("backbone config: ln_eps must be positive");
}

FrozenBackbone::FrozenBackbone(BackboneConfig cfg, BackboneWeights weights)
    : cfg_(cfg), w_(std::move(weights)) {
  cfg_.validate();
  for_each_weight(w_, cfg_, [](const Tensor& t, std::size_t rows, std::size_t cols) {
    t.validate();
    if (t.rows() != rows || t.cols() != cols) {
      throw std::invalid_argument("backbone weights: tensor is " +
                                  std::to_string(t.rows()) + "x" + std::to_string(t.cols()) +
                                  ", expected " + std::to_string(rows) + "x" +
                                  std::to_string(cols));
    }
  });
}

FrozenBackbone FrozenBackbone::random(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto draw = [&](std::size_t rows, std::size_t cols, double std) {
    Tensor t = Tensor::zeros(rows, cols);
    fill_normal(t, rng, std);
    return t;
  };
  auto draw_gain = [&](std::size_t n) {
    Tensor t = Tensor::zeros(1, n);
    fill_normal(t, rng, 0.05);
    for (double& x : t.data) x += 1.0;
    return t;
  };

  BackboneWeights w;
  w.patch_proj = draw(cfg.patch_dim, cfg.d_v, 1.0 / std::sqrt(double(cfg.patch_dim)));
  w.patch_bias = draw(1, cfg.d_v, 0.02);
  w.cls_token = draw(1, cfg.d_v, 1.0);
  w.pos_vision = draw(cfg.max_vision_tokens, cfg.d_v, 0.5);
  w.token_table = draw(cfg.vocab, cfg.d_t, 1.0);
  w.pos_text = draw(cfg.max_text_tokens, cfg.d_t, 0.5);

  auto make_tower = [&](std::size_t d) {
    TowerWeights tw;
    double ws = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
      BlockWeights b;
      b.wq = draw(d, d, ws);
      b.bq = draw(1, d, 0.02);
      b.wk = draw(d, d, ws);
      b.bk = draw(1, d, 0.02);
      b.wv = draw(d, d, ws);
      b.bv = draw(1, d, 0.02);
      b.wo = draw(d, d, ws);
      b.bo = draw(1, d, 0.02);
      b.ln1_g = draw_gain(d);
      b.ln1_b = draw(1, d, 0.02);
      b.ln2_g = draw_gain(d);
      b.ln2_b = draw(1, d, 0.02);
      b.w1 = draw(d, d * cfg.mlp_ratio, ws);
      b.b1 = draw(1, d * cfg.mlp_ratio, 0.02);
      b.w2 = draw(d * cfg.mlp_ratio, d, 1.0 / std::sqrt(double(d * cfg.mlp_ratio)));
      b.b2 = draw(1, d, 0.02);
      tw.blocks.push_back(std::move(b));
    }
    tw.ln_post_g = draw_gain(d);
    tw.ln_post_b = draw(1, d, 0.02);
    tw.out_proj = draw(d, cfg.d_out, 1.0 / std::sqrt(static_cast<double>(d)));
    return tw;
  };
  w.vision = make_tower(cfg.d_v);
  w.text = make_tower(cfg.d_t);
  return FrozenBackbone(cfg, std::move(w));
}

std::uint64_t FrozenBackbone::checksum() const {
  std::uint64_t hash = 14695981039346656037ULL;
  for_each_weight(w_, cfg_, [&](const Tensor& t, std::size_t, std::size_t) {
    hash = fnv1a(hash, t.data.data(), t.data.size() * sizeof(double));
  });
  return hash;
}

TokenSequence FrozenBackbone::prepare_image(const Tensor& patches) const {
  patches.validate();
  Tape scratch;
  Var tokens = front_end_vision(scratch, *this, scratch.constant(patches));
  TokenSequence ts;
  ts.modality = Modality::kVision;
  ts.embeddings = Tensor({tokens.rows(), tokens.cols()}, tokens.value());
  ts.cls_index = 0;
  return ts;
}

TokenSequence FrozenBackbone::prepare_text(std::span<const int> content_ids) const {
  std::size_t s = content_ids.size() + 2;
  if (s > cfg_.max_text_tokens) {
    throw std::invalid_argument("text sequence too long for positional table");
  }
  Tensor rows = Tensor::zeros(s, cfg_.d_t);
  auto emit = [&](std::size_t row, int id) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocab " +
                              std::to_string(cfg_.vocab));
    }
    for (std::size_t j = 0; j < cfg_.d_t; ++j) {
      rows.at(row, j) = w_.token_table.at(static_cast<std::size_t>(id), j) +
                        w_.pos_text.at(row, j);
    }
  };
  emit(0, kSosId);
  for (std::size_t i = 0; i < content_ids.size(); ++i) emit(1 + i, content_ids[i]);
  emit(s - 1, kEosId);
  TokenSequence ts;
  ts.modality = Modality::kText;
  ts.embeddings = std::move(rows);
  ts.sos_index = 0;
  ts.eos_index = s - 1;
  return ts;
}

// ---------------------------------------------------------------------------

Var encode_image(Tape& tape, const FrozenBackbone& bb, const prompts::StackVars* stack,
                 const TokenSequence& x) {
  x.validate();
  if (x.modality != Modality::kVision) {
    throw std::invalid_argument("encode_image: expected a vision sequence");
  }
  if (x.embeddings.cols() != bb.config().d_v) {
    throw std::invalid_argument("encode_image: width mismatch, sequence is " +
                                std::to_string(x.embeddings.cols()) + ", encoder is " +
                                std::to_string(bb.config().d_v));
  }
  Var tokens = tape.constant(x.embeddings);
  return run_tower(tape, bb.config(), bb.weights().vision, tokens, x.cls_index,
                   Modality::kVision, stack);
}

Var encode_text(Tape& tape, const FrozenBackbone& bb, const prompts::StackVars* stack,
                const TokenSequence& y) {
  y.validate();
  if (y.modality != Modality::kText) {
    throw std::invalid_argument("encode_text: expected a text sequence");
  }
  if (y.embeddings.cols() != bb.config().d_t) {
    throw std::invalid_argument("encode_text: width mismatch, sequence is " +
                                std::to_string(y.embeddings.cols()) + ", encoder is " +
                                std::to_string(bb.config().d_t));
  }
  Var tokens = tape.constant(y.embeddings);
  return run_tower(tape, bb.config(), bb.weights().text, tokens, y.eos_index,
                   Modality::kText, stack);
}

Var encode_image_from_patches(Tape& tape, const FrozenBackbone& bb,
                              const prompts::StackVars* stack, const Var& patches) {
  Var tokens = front_end_vision(tape, bb, patches);
  return run_tower(tape, bb.config(), bb.weights().vision, tokens, 0, Modality::kVision,
                   stack);
}

namespace {

template <typename EncodeFn>
Tensor encode_value(const FrozenBackbone& bb, const prompts::PromptStack* stack,
                    const TokenSequence& ts, EncodeFn&& encode) {
  Tape tape;
  prompts::StackVars vars;
  const prompts::StackVars* vp = nullptr;
  if (stack != nullptr) {
    vars = prompts::lift(tape, *stack, /*trainable=*/false);
    vp = &vars;
  }
  Var f = encode(tape, bb, vp, ts);
  return Tensor({f.rows(), f.cols()}, f.value());
}

}  // namespace

Tensor encode_image_value(const FrozenBackbone& bb, const prompts::PromptStack* stack,
                          const TokenSequence& x) {
  return encode_value(bb, stack, x,
                      [](Tape& t, const FrozenBackbone& b, const prompts::StackVars* s,
                         const TokenSequence& ts) { return encode_image(t, b, s, ts); });
}

Tensor encode_text_value(const FrozenBackbone& bb, const prompts::PromptStack* stack,
                         const TokenSequence& y) {
  return encode_value(bb, stack, y,
                      [](Tape& t, const FrozenBackbone& b, const prompts::StackVars* s,
                         const TokenSequence& ts) { return encode_text(t, b, s, ts); });
}

// ---------------------------------------------------------------------------

void ZeroShotAnchor::validate() const {
  class_feats.validate();
  for (std::size_t k = 0; k < class_feats.rows(); ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < class_feats.cols(); ++j) {
      s += class_feats.at(k, j) * class_feats.at(k, j);
    }
    if (std::abs(std::sqrt(s) - 1.0) > 1e-9) {
      throw std::invalid_argument("anchor: class feature " + std::to_string(k) +
                                  " is not unit-norm");
    }
  }
}

ZeroShotAnchor build_anchor(const FrozenBackbone& bb,
                            const std::vector<std::vector<int>>& classes,
                            const std::vector<std::vector<int>>& templates) {
  if (templates.empty()) {
    throw std::invalid_argument("build_anchor: at least one template is required");
  }
  if (classes.empty()) {
    throw std::invalid_argument("build_anchor: at least one class is required");
  }
  std::size_t d = bb.config().d_out;
  Tensor feats = Tensor::zeros(classes.size(), d);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<double> acc(d, 0.0);
    for (const auto& tpl : templates) {
      std::vector<int> ids = tpl;
      ids.insert(ids.end(), classes[k].begin(), classes[k].end());
      Tensor f = encode_text_value(bb, nullptr, bb.prepare_text(ids));
      for (std::size_t j = 0; j < d; ++j) acc[j] += f.data[j];
    }
    for (std::size_t j = 0; j < d; ++j) acc[j] /= static_cast<double>(templates.size());
    Tape scratch;
    Var g = l2_normalize(scratch.constant(Tensor({1, d}, acc)));
    for (std::size_t j = 0; j < d; ++j) feats.at(k, j) = g.value()[j];
  }
  ZeroShotAnchor anchor{std::move(feats), templates.size()};
  anchor.validate();
  return anchor;
}

Tensor zero_shot_predict(const Tensor& f, const ZeroShotAnchor& anchor, double tau) {
  if (anchor.class_count() == 0) {
    throw std::invalid_argument("zero_shot_predict: no classes");
  }
  if (tau <= 0.0) throw std::domain_error("zero_shot_predict: tau must be positive");
  f.validate();
  if (f.size() != anchor.class_feats.cols()) {
    throw std::invalid_argument("zero_shot_predict: feature dim mismatch");
  }
  double norm = 0.0;
  for (double x : f.data) norm += x * x;
  if (std::abs(std::sqrt(norm) - 1.0) > 1e-6) {
    throw std::invalid_argument("zero_shot_predict: feature must be unit-norm");
  }
  std::size_t c = anchor.class_count();
  Tensor logits = Tensor::zeros(1, c);
  for (std::size_t k = 0; k < c; ++k) {
    double dot = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) dot += f.data[j] * anchor.class_feats.at(k, j);
    logits.data[k] = dot;
  }
  return softmax_value(logits, tau);
}

std::vector<std::vector<int>> make_templates(std::size_t count, std::size_t len,
                                             int first_id) {
  if (count == 0) throw std::invalid_argument("make_templates: count must be >= 1");
  std::vector<std::vector<int>> out;
  for (std::size_t j = 0; j < count; ++j) {
    std::vector<int> tpl;
    for (std::size_t i = 0; i < len; ++i) {
      tpl.push_back(first_id + static_cast<int>(j * len + i));
    }
    out.push_back(std::move(tpl));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary save/load: magic, dimension header, little-endian payload, FNV-1a
// trailer. Assumes a little-endian host.

void FrozenBackbone::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("backbone save: cannot open " + path.string());
  os.write(kMagic, sizeof(kMagic));
  std::array<std::uint64_t, 10> header = {cfg_.blocks, cfg_.d_v,   cfg_.d_t,
                                          cfg_.d_out,  cfg_.heads, cfg_.patch_dim,
                                          cfg_.vocab,  cfg_.max_vision_tokens,
                                          cfg_.max_text_tokens, cfg_.mlp_ratio};
  os.write(reinterpret_cast<const char*>(header.data()), sizeof(header));
  os.write(reinterpret_cast<const char*>(&cfg_.tau), sizeof(double));
  os.write(reinterpret_cast<const char*>(&cfg_.ln_eps), sizeof(double));
  for_each_weight(w_, cfg_, [&](const Tensor& t, std::size_t, std::size_t) {
    os.write(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  });
  std::uint64_t sum = checksum();
  os.write(reinterpret_cast<const char*>(&sum), sizeof(sum));
  if (!os) throw std::runtime_error("backbone save: write failed for " + path.string());
}

FrozenBackbone FrozenBackbone::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("backbone load: cannot open " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("backbone load: bad magic in " + path.string());
  }
  std::array<std::uint64_t, 10> header{};
  is.read(reinterpret_cast<char*>(header.data()), sizeof(header));
  BackboneConfig cfg;
  cfg.blocks = header[0];
  cfg.d_v = header[1];
  cfg.d_t = header[2];
  cfg.d_out = header[3];
  cfg.heads = header[4];
  cfg.patch_dim = header[5];
  cfg.vocab = header[6];
  cfg.max_vision_tokens = header[7];
  cfg.max_text_tokens = header[8];
  cfg.mlp_ratio = header[9];
  is.read(reinterpret_cast<char*>(&cfg.tau), sizeof(double));
  is.read(reinterpret_cast<char*>(&cfg.ln_eps), sizeof(double));
  if (!is) throw std::runtime_error("backbone load: truncated header in " + path.string());
  cfg.validate();

  BackboneWeights w;
  w.vision.blocks.resize(cfg.blocks);
  w.text.blocks.resize(cfg.blocks);
  for_each_weight(w, cfg, [&](Tensor& t, std::size_t rows, std::size_t cols) {
    t = Tensor::zeros(rows, cols);
    is.read(reinterpret_cast<char*>(t.data.data()), t.data.size() * sizeof(double));
  });
  std::uint64_t stored = 0;
  is.read(reinterpret_cast<char*>(&stored), sizeof(stored));
  if (!is) throw std::runtime_error("backbone load: truncated payload in " + path.string());

  FrozenBackbone bb(cfg, std::move(w));
  if (bb.checksum() != stored) {
    throw std::runtime_error("backbone load: checksum mismatch in " + path.string());
  }
  return bb;
}

}  // namespace mmlop::encoder
