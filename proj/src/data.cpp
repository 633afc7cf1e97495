#include "mmlop/data.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mmlop::data {

using nlohmann::json;

namespace {

json tensor_to_json(const Tensor& t) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < t.cols(); ++j) row.push_back(t.at(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor tensor_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) {
    throw std::runtime_error("load: " + what + " must be a non-empty array of rows");
  }
  std::size_t rows = j.size(), cols = j[0].size();
  Tensor t = Tensor::zeros(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (!j[i].is_array() || j[i].size() != cols) {
      throw std::runtime_error("load: " + what + " row " + std::to_string(i) +
                               " has inconsistent width");
    }
    for (std::size_t c = 0; c < cols; ++c) t.at(i, c) = j[i][c].get<double>();
  }
  return t;
}

json backbone_to_json(const encoder::BackboneConfig& cfg) {
  return json{{"blocks", cfg.blocks},
              {"d_v", cfg.d_v},
              {"d_t", cfg.d_t},
              {"d_out", cfg.d_out},
              {"heads", cfg.heads},
              {"patch_dim", cfg.patch_dim},
              {"vocab", cfg.vocab},
              {"max_vision_tokens", cfg.max_vision_tokens},
              {"max_text_tokens", cfg.max_text_tokens},
              {"mlp_ratio", cfg.mlp_ratio},
              {"tau", cfg.tau},
              {"ln_eps", cfg.ln_eps}};
}

encoder::BackboneConfig backbone_from_json(const json& j) {
  encoder::BackboneConfig cfg;
  cfg.blocks = j.at("blocks").get<std::size_t>();
  cfg.d_v = j.at("d_v").get<std::size_t>();
  cfg.d_t = j.at("d_t").get<std::size_t>();
  cfg.d_out = j.at("d_out").get<std::size_t>();
  cfg.heads = j.at("heads").get<std::size_t>();
  cfg.patch_dim = j.at("patch_dim").get<std::size_t>();
  cfg.vocab = j.at("vocab").get<std::size_t>();
  cfg.max_vision_tokens = j.at("max_vision_tokens").get<std::size_t>();
  cfg.max_text_tokens = j.at("max_text_tokens").get<std::size_t>();
  cfg.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  cfg.tau = j.at("tau").get<double>();
  cfg.ln_eps = j.at("ln_eps").get<double>();
  cfg.validate();
  return cfg;
}

json load_json_file(const std::filesystem::path& path, const char* expected_kind) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load: cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load: malformed JSON in " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || j.value("kind", std::string{}) != expected_kind) {
    throw std::runtime_error("load: " + path.string() + " is not a '" +
                             std::string(expected_kind) + "' file");
  }
  return j;
}

void write_json_file(const json& j, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save: cannot open " + path.string());
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("save: write failed for " + path.string());
}

// Gradient steps on raw patches. The objective aligns the image feature with
// the class anchor's deviation from the anchor mean, which targets the
// class-discriminative component rather than the direction shared by every
// anchor. Steps are normalized with a linear decay; stops early once the
// nearest-anchor margin reaches target_margin.
Tensor align_prototype(const encoder::FrozenBackbone& bb, const Tensor& anchors,
                       std::size_t class_id, Tensor z, const TaskSpec& spec) {
  std::size_t c = anchors.rows(), d = anchors.cols();
  Tensor delta = Tensor::zeros(1, d);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t k = 0; k < c; ++k) mean += anchors.at(k, j);
    mean /= static_cast<double>(c);
    delta.data[j] = anchors.at(class_id, j) - mean;
  }
  Tensor best = z;
  double best_margin = -2.0;
  for (std::size_t it = 0; it < spec.align_iters; ++it) {
    Tape tape;
    Var zv = tape.leaf(z, /*trainable=*/true);
    Var f = encoder::encode_image_from_patches(tape, bb, nullptr, zv);
    Var objective = matmul_nt(f, tape.constant(delta));
    double own = 0.0, other = -2.0;
    for (std::size_t k = 0; k < c; ++k) {
      double cos = 0.0;
      for (std::size_t j = 0; j < d; ++j) cos += f.value()[j] * anchors.at(k, j);
      if (k == class_id) {
        own = cos;
      } else {
        other = std::max(other, cos);
      }
    }
    double margin = own - other;
    if (margin > best_margin) {
      best_margin = margin;
      best = z;
    }
    if (margin >= spec.target_margin) break;
    tape.backward(scale(objective, -1.0));
    const auto& g = zv.grad();
    double norm = 0.0;
    for (double x : g) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12) break;
    double step = spec.align_step * (1.0 - static_cast<double>(it) / spec.align_iters) +
                  0.02;
    for (std::size_t i = 0; i < z.data.size(); ++i) {
      z.data[i] -= step * g[i] / norm;
    }
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------

void TaskSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("task spec: classes must be >= 2");
  if (shots < 1) throw std::invalid_argument("task spec: shots must be >= 1");
  if (eval_per_class < 1) {
    throw std::invalid_argument("task spec: eval_per_class must be >= 1");
  }
  if (patches < 1) throw std::invalid_argument("task spec: patches must be >= 1");
  if (class_token_count < 1) {
    throw std::invalid_argument("task spec: class_token_count must be >= 1");
  }
  if (gen_templates < 1) throw std::invalid_argument("task spec: gen_templates must be >= 1");
  if (sigma_data < 0.0 || !std::isfinite(sigma_data)) {
    throw std::invalid_argument("task spec: sigma_data must be finite and >= 0");
  }
  if (novel_shift < 0.0 || !std::isfinite(novel_shift)) {
    throw std::invalid_argument("task spec: novel_shift must be finite and >= 0");
  }
  if (target_margin <= 0.0 || target_margin > 2.0) {
    throw std::invalid_argument("task spec: target_margin must be in (0, 2]");
  }
  backbone.validate();
  std::size_t last_id = encoder::kFirstClassId + classes * class_token_count;
  if (last_id > backbone.vocab) {
    throw std::invalid_argument("task spec: class token ids exceed vocab (" +
                                std::to_string(last_id) + " > " +
                                std::to_string(backbone.vocab) + ")");
  }
  if (1 + patches > backbone.max_vision_tokens) {
    throw std::invalid_argument("task spec: patches exceed positional table");
  }
}

std::vector<int> SyntheticTask::base_classes() const {
  std::size_t base_count = (spec.classes + 1) / 2;
  std::vector<int> out;
  for (std::size_t k = 0; k < base_count; ++k) out.push_back(static_cast<int>(k));
  return out;
}

std::vector<int> SyntheticTask::novel_classes() const {
  std::size_t base_count = (spec.classes + 1) / 2;
  std::vector<int> out;
  for (std::size_t k = base_count; k < spec.classes; ++k) {
    out.push_back(static_cast<int>(k));
  }
  return out;
}

encoder::FrozenBackbone SyntheticTask::make_backbone() const {
  return encoder::FrozenBackbone::random(spec.backbone, spec.backbone_seed);
}

void SyntheticTask::validate() const {
  spec.validate();
  if (prototypes.size() != spec.classes || class_tokens.size() != spec.classes) {
    throw std::invalid_argument("task: per-class tables must cover every class");
  }
  for (const auto& s : train_samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= spec.classes) {
      throw std::invalid_argument("task: train sample label out of range");
    }
    s.patches.validate();
  }
  for (const auto& s : eval_samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= spec.classes) {
      throw std::invalid_argument("task: eval sample label out of range");
    }
    s.patches.validate();
  }
}

std::vector<int> class_token_ids(std::size_t class_id, std::size_t count) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < count; ++i) {
    ids.push_back(encoder::kFirstClassId + static_cast<int>(class_id * count + i));
  }
  return ids;
}

SyntheticTask gen_synthetic(const TaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  SyntheticTask task;
  task.spec = spec;
  task.seed = seed;

  encoder::FrozenBackbone bb =
      encoder::FrozenBackbone::random(spec.backbone, spec.backbone_seed);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    task.class_tokens.push_back(class_token_ids(k, spec.class_token_count));
  }
  encoder::ZeroShotAnchor anchor = encoder::build_anchor(
      bb, task.class_tokens, encoder::make_templates(spec.gen_templates));

  std::mt19937_64 rng(seed);
  std::size_t base_count = (spec.classes + 1) / 2;

  for (std::size_t k = 0; k < spec.classes; ++k) {
    Tensor z0 = Tensor::zeros(spec.patches, spec.backbone.patch_dim);
    fill_normal(z0, rng, 1.0);
    Tensor z = align_prototype(bb, anchor.class_feats, k, std::move(z0), spec);
    if (k >= base_count && spec.novel_shift > 0.0) {
      Tensor dir = Tensor::zeros(spec.patches, spec.backbone.patch_dim);
      fill_normal(dir, rng, 1.0);
      double norm = 0.0;
      for (double x : dir.data) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (std::size_t i = 0; i < z.data.size(); ++i) {
          z.data[i] += spec.novel_shift * dir.data[i] / norm;
        }
      }
    }
    task.prototypes.push_back(std::move(z));
  }

  auto draw_sample = [&](std::size_t k) {
    Sample s;
    s.label = static_cast<int>(k);
    s.patches = task.prototypes[k];
    if (spec.sigma_data > 0.0) {
      Tensor noise = Tensor::zeros(spec.patches, spec.backbone.patch_dim);
      fill_normal(noise, rng, spec.sigma_data);
      for (std::size_t i = 0; i < s.patches.data.size(); ++i) {
        s.patches.data[i] += noise.data[i];
      }
    }
    return s;
  };
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (std::size_t s = 0; s < spec.shots; ++s) task.train_samples.push_back(draw_sample(k));
  }
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (std::size_t e = 0; e < spec.eval_per_class; ++e) {
      task.eval_samples.push_back(draw_sample(k));
    }
  }
  task.validate();
  return task;
}

std::pair<SplitView, SplitView> split_base_novel(const SyntheticTask& task) {
  if (task.spec.classes < 2) {
    throw std::invalid_argument("split: task must have at least two classes");
  }
  SplitView base, novel;
  base.class_ids = task.base_classes();
  novel.class_ids = task.novel_classes();
  std::size_t base_count = base.class_ids.size();
  auto in_base = [&](int label) { return static_cast<std::size_t>(label) < base_count; };
  for (const Sample& s : task.train_samples) {
    (in_base(s.label) ? base : novel).train.push_back(&s);
  }
  for (const Sample& s : task.eval_samples) {
    (in_base(s.label) ? base : novel).eval.push_back(&s);
  }
  return {std::move(base), std::move(novel)};
}

// ---------------------------------------------------------------------------
// Embedding files

std::string to_string(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::kAnchor: return "anchor";
    case EmbeddingKind::kPrompted: return "prompted";
    case EmbeddingKind::kImage: return "image";
  }
  throw std::logic_error("unknown embedding kind");
}

EmbeddingKind embedding_kind_from_string(const std::string& s) {
  if (s == "anchor") return EmbeddingKind::kAnchor;
  if (s == "prompted") return EmbeddingKind::kPrompted;
  if (s == "image") return EmbeddingKind::kImage;
  throw std::runtime_error("unknown embedding kind '" + s +
                           "' (expected anchor|prompted|image)");
}

void EmbeddingFile::validate() const {
  values.validate();
  if (values.rows() != count || values.cols() != dim) {
    throw std::runtime_error("embedding file: count/dim mismatch, payload is " +
                             std::to_string(values.rows()) + "x" +
                             std::to_string(values.cols()) + ", header says " +
                             std::to_string(count) + "x" + std::to_string(dim));
  }
  if (labels.size() != count) {
    throw std::runtime_error("embedding file: label count mismatch");
  }
  if (kind == EmbeddingKind::kAnchor) {
    for (std::size_t i = 0; i < count; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += values.at(i, j) * values.at(i, j);
      if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
        throw std::runtime_error("embedding file: norm violation at row " +
                                 std::to_string(i) + " for anchor kind");
      }
    }
  }
}

void save_embeddings(const EmbeddingFile& e, const std::filesystem::path& path) {
  e.validate();
  json j{{"kind", to_string(e.kind)},
         {"dim", e.dim},
         {"count", e.count},
         {"labels", e.labels},
         {"data", tensor_to_json(e.values)}};
  write_json_file(j, path);
}

EmbeddingFile load_embeddings(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load: cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load: malformed JSON in " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("kind") || !j.contains("data")) {
    throw std::runtime_error("load: " + path.string() + " is not an embedding file");
  }
  EmbeddingFile e;
  e.kind = embedding_kind_from_string(j.at("kind").get<std::string>());
  e.dim = j.at("dim").get<std::size_t>();
  e.count = j.at("count").get<std::size_t>();
  e.labels = j.at("labels").get<std::vector<int>>();
  e.values = tensor_from_json(j.at("data"), "data");
  e.validate();
  return e;
}

// ---------------------------------------------------------------------------
// Task files

void save_task(const SyntheticTask& task, const std::filesystem::path& path) {
  task.validate();
  json spec{{"classes", task.spec.classes},
            {"shots", task.spec.shots},
            {"eval_per_class", task.spec.eval_per_class},
            {"patches", task.spec.patches},
            {"sigma_data", task.spec.sigma_data},
            {"novel_shift", task.spec.novel_shift},
            {"class_token_count", task.spec.class_token_count},
            {"gen_templates", task.spec.gen_templates},
            {"target_margin", task.spec.target_margin},
            {"align_iters", task.spec.align_iters},
            {"align_step", task.spec.align_step},
            {"backbone", backbone_to_json(task.spec.backbone)},
            {"backbone_seed", task.spec.backbone_seed}};
  json protos = json::array();
  for (const Tensor& p : task.prototypes) protos.push_back(tensor_to_json(p));
  auto samples_to_json = [](const std::vector<Sample>& samples) {
    json arr = json::array();
    for (const Sample& s : samples) {
      arr.push_back(json{{"label", s.label}, {"patches", tensor_to_json(s.patches)}});
    }
    return arr;
  };
  json j{{"kind", "task"},
         {"spec", spec},
         {"seed", task.seed},
         {"prototypes", protos},
         {"class_tokens", task.class_tokens},
         {"train_samples", samples_to_json(task.train_samples)},
         {"eval_samples", samples_to_json(task.eval_samples)}};
  write_json_file(j, path);
}

SyntheticTask load_task(const std::filesystem::path& path) {
  json j = load_json_file(path, "task");
  SyntheticTask task;
  const json& spec = j.at("spec");
  task.spec.classes = spec.at("classes").get<std::size_t>();
  task.spec.shots = spec.at("shots").get<std::size_t>();
  task.spec.eval_per_class = spec.at("eval_per_class").get<std::size_t>();
  task.spec.patches = spec.at("patches").get<std::size_t>();
  task.spec.sigma_data = spec.at("sigma_data").get<double>();
  task.spec.novel_shift = spec.at("novel_shift").get<double>();
  task.spec.class_token_count = spec.at("class_token_count").get<std::size_t>();
  task.spec.gen_templates = spec.at("gen_templates").get<std::size_t>();
  task.spec.target_margin = spec.at("target_margin").get<double>();
  task.spec.align_iters = spec.at("align_iters").get<std::size_t>();
  task.spec.align_step = spec.at("align_step").get<double>();
  task.spec.backbone = backbone_from_json(spec.at("backbone"));
  task.spec.backbone_seed = spec.at("backbone_seed").get<std::uint64_t>();
  task.seed = j.at("seed").get<std::uint64_t>();
  for (const json& p : j.at("prototypes")) {
    task.prototypes.push_back(tensor_from_json(p, "prototype"));
  }
  task.class_tokens = j.at("class_tokens").get<std::vector<std::vector<int>>>();
  auto samples_from_json = [](const json& arr, const char* what) {
    std::vector<Sample> out;
    for (const json& e : arr) {
      Sample s;
      s.label = e.at("label").get<int>();
      s.patches = tensor_from_json(e.at("patches"), what);
      out.push_back(std::move(s));
    }
    return out;
  };
  task.train_samples = samples_from_json(j.at("train_samples"), "train sample");
  task.eval_samples = samples_from_json(j.at("eval_samples"), "eval sample");
  task.validate();
  return task;
}

// ---------------------------------------------------------------------------
// Prompt-stack files

void save_stack(const prompts::PromptStack& stack, const std::filesystem::path& path) {
  auto factor_list = [](const std::vector<Tensor>& v) {
    json arr = json::array();
    for (const Tensor& t : v) arr.push_back(tensor_to_json(t));
    return arr;
  };
  json j{{"kind", "stack"},
         {"mode", prompts::to_string(stack.cfg.mode)},
         {"depth", stack.cfg.depth},
         {"length", stack.cfg.length},
         {"v_length", stack.cfg.v_length},
         {"rank", stack.cfg.rank},
         {"d_v", stack.cfg.d_v},
         {"d_t", stack.cfg.d_t},
         {"init_std", stack.cfg.init_std},
         {"factors",
          json{{"u", factor_list(stack.u)},
               {"u_v", factor_list(stack.u_v)},
               {"u_t", factor_list(stack.u_t)},
               {"v_v", factor_list(stack.v_v)},
               {"v_t", factor_list(stack.v_t)},
               {"p_v", factor_list(stack.p_v)},
               {"p_t", factor_list(stack.p_t)}}}};
  write_json_file(j, path);
}

prompts::PromptStack load_stack(const std::filesystem::path& path) {
  json j = load_json_file(path, "stack");
  prompts::PromptStack stack;
  stack.cfg.mode = prompts::mode_from_string(j.at("mode").get<std::string>());
  stack.cfg.depth = j.at("depth").get<std::size_t>();
  stack.cfg.length = j.at("length").get<std::size_t>();
  stack.cfg.v_length = j.at("v_length").get<std::size_t>();
  stack.cfg.rank = j.at("rank").get<std::size_t>();
  stack.cfg.d_v = j.at("d_v").get<std::size_t>();
  stack.cfg.d_t = j.at("d_t").get<std::size_t>();
  stack.cfg.init_std = j.at("init_std").get<double>();
  stack.cfg.validate();
  auto factors = [&](const char* name) {
    std::vector<Tensor> out;
    for (const json& t : j.at("factors").at(name)) {
      out.push_back(tensor_from_json(t, name));
    }
    return out;
  };
  stack.u = factors("u");
  stack.u_v = factors("u_v");
  stack.u_t = factors("u_t");
  stack.v_v = factors("v_v");
  stack.v_t = factors("v_t");
  stack.p_v = factors("p_v");
  stack.p_t = factors("p_t");

  // Shape audit against the declared config.
  prompts::PromptStack expect = prompts::init_stack(stack.cfg, 0);
  auto check = [&](const std::vector<Tensor>& got, const std::vector<Tensor>& want,
                   const char* name) {
    if (got.size() != want.size()) {
      throw std::runtime_error("stack load: factor list " + std::string(name) +
                               " has wrong layer count");
    }
    for (std::size_t l = 0; l < got.size(); ++l) {
      if (got[l].rows() != want[l].rows() || got[l].cols() != want[l].cols()) {
        throw std::runtime_error("stack load: factor " + std::string(name) + "[" +
                                 std::to_string(l + 1) + "] has wrong shape");
      }
    }
  };
  check(stack.u, expect.u, "u");
  check(stack.u_v, expect.u_v, "u_v");
  check(stack.u_t, expect.u_t, "u_t");
  check(stack.v_v, expect.v_v, "v_v");
  check(stack.v_t, expect.v_t, "v_t");
  check(stack.p_v, expect.p_v, "p_v");
  check(stack.p_t, expect.p_t, "p_t");
  return stack;
}

}  // namespace mmlop::data
