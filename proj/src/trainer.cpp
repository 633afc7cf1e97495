#include "mmlop/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <stdexcept>

namespace mmlop::trainer {

void TrainConfig::validate() const {
  prompt.validate();
  if (learning_rate < 0.0 || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("train config: learning rate must be finite and >= 0");
  }
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
  if (tau <= 0.0) throw std::invalid_argument("train config: tau must be positive");
  if (lambda1 < 0.0 || lambda2 < 0.0) {
    throw std::invalid_argument("train config: loss weights must be nonnegative");
  }
  if (anchor_templates < 1) {
    throw std::invalid_argument("train config: anchor_templates must be >= 1");
  }
}

double harmonic_mean(double a, double b) {
  if (a < 0.0 || b < 0.0) throw std::invalid_argument("harmonic mean: negative input");
  if (a == 0.0 || b == 0.0) return 0.0;
  return 2.0 * a * b / (a + b);
}

// ---------------------------------------------------------------------------

TrainContext make_train_context(const TrainConfig& cfg, const encoder::FrozenBackbone& bb,
                                const encoder::ZeroShotAnchor& base_anchor,
                                const data::SyntheticTask& task) {
  auto [base, novel] = data::split_base_novel(task);
  if (base_anchor.class_count() != base.class_ids.size()) {
    throw std::invalid_argument("train: anchor classes do not cover the base split");
  }
  if (cfg.prompt.depth > bb.config().blocks) {
    throw std::invalid_argument("train: prompt depth " + std::to_string(cfg.prompt.depth) +
                                " exceeds backbone blocks " +
                                std::to_string(bb.config().blocks));
  }

  TrainContext ctx;
  for (int id : base.class_ids) {
    ctx.class_texts.push_back(bb.prepare_text(task.class_tokens[id]));
  }
  ctx.anchor = base_anchor.class_feats;

  std::size_t n = base.train.size();
  ctx.frozen_feats = Tensor::zeros(n, bb.config().d_out);
  for (std::size_t i = 0; i < n; ++i) {
    const data::Sample& s = *base.train[i];
    ctx.images.push_back(bb.prepare_image(s.patches));
    Tensor f = encoder::encode_image_value(bb, nullptr, ctx.images.back());
    for (std::size_t j = 0; j < f.size(); ++j) ctx.frozen_feats.at(i, j) = f.data[j];
    ctx.labels.push_back(static_cast<std::size_t>(s.label));  // base ids are 0..C_b-1
  }
  return ctx;
}

losses::LossBreakdown LossGraph::values(double lambda1, double lambda2) const {
  return losses::total_loss(ce.scalar(), scl_text.scalar(), scl_image.scalar(),
                            scl_logits.scalar(), lambda1, lambda2);
}

LossGraph build_loss(Tape& tape, const encoder::FrozenBackbone& bb,
                     const prompts::StackVars& stack, const TrainContext& ctx,
                     std::span<const std::size_t> batch, const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("build_loss: empty batch");
  std::size_t classes = ctx.class_texts.size();

  // Prompted text features for every class in the task, then the corrected
  // classifier features (drift correction is inside the graph).
  std::vector<Var> text_feats;
  for (const auto& ts : ctx.class_texts) {
    text_feats.push_back(encoder::encode_text(tape, bb, &stack, ts));
  }
  Var prompted = concat_rows(text_feats);  // C x d_out
  Var anchor = tape.constant(ctx.anchor);
  Var classifier = cfg.use_udc ? udc::apply_udc(prompted, anchor) : prompted;

  // scl_text compares the corrected features against the frozen anchor,
  // averaged over classes.
  Var scl_text = scale(losses::scl_feature_l1(classifier, anchor),
                       1.0 / static_cast<double>(classes));

  std::vector<Var> ce_terms, image_terms, logit_terms;
  for (std::size_t idx : batch) {
    Var f_p = encoder::encode_image(tape, bb, &stack, ctx.images[idx]);
    Var f_frozen = tape.constant(
        Tensor({1, ctx.frozen_feats.cols()},
               std::vector<double>(ctx.frozen_feats.data.begin() +
                                       idx * ctx.frozen_feats.cols(),
                                   ctx.frozen_feats.data.begin() +
                                       (idx + 1) * ctx.frozen_feats.cols())));
    ce_terms.push_back(losses::cross_entropy(f_p, classifier, ctx.labels[idx], cfg.tau));
    image_terms.push_back(losses::scl_feature_l1(f_p, f_frozen));
    Var p_logits = matmul_nt(f_p, classifier);
    Var q_logits = matmul_nt(f_frozen, anchor);
    logit_terms.push_back(losses::scl_logits(p_logits, q_logits, cfg.tau, cfg.kl_variant));
  }

  LossGraph g;
  g.ce = mean(concat_cols(ce_terms));
  if (cfg.use_scl) {
    g.scl_text = scl_text;
    g.scl_image = mean(concat_cols(image_terms));
    g.scl_logits = mean(concat_cols(logit_terms));
    g.total = losses::total_loss(g.ce, g.scl_text, g.scl_image, g.scl_logits,
                                 cfg.lambda1, cfg.lambda2);
  } else {
    Var zero = tape.constant(Tensor::scalar(0.0));
    g.scl_text = zero;
    g.scl_image = zero;
    g.scl_logits = zero;
    g.total = g.ce;
  }
  return g;
}

// ---------------------------------------------------------------------------

TrainResult train(const TrainConfig& cfg, const encoder::FrozenBackbone& bb,
                  const encoder::ZeroShotAnchor& base_anchor,
                  const data::SyntheticTask& task) {
  cfg.validate();
  TrainContext ctx = make_train_context(cfg, bb, base_anchor, task);
  std::size_t n = ctx.images.size();
  if (n == 0) throw std::invalid_argument("train: base split has no samples");

  TrainResult result;
  result.stack = prompts::init_stack(cfg.prompt, cfg.seed);

  std::mt19937_64 shuffle_rng(cfg.seed + 0x5DEECE66DULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    losses::LossBreakdown epoch_sum;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::size_t stop = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> batch(order.data() + start, stop - start);

      Tape tape;
      prompts::StackVars vars = prompts::lift(tape, result.stack, /*trainable=*/true);
      LossGraph g = build_loss(tape, bb, vars, ctx, batch, cfg);

      losses::LossBreakdown parts;
      try {
        parts = g.values(cfg.lambda1, cfg.lambda2);
      } catch (const std::invalid_argument& e) {
        throw std::runtime_error("train: aborted at epoch " + std::to_string(epoch + 1) +
                                 ": " + e.what());
      }
      std::array<std::pair<const char*, double>, 5> named = {
          std::make_pair("ce", parts.ce), std::make_pair("scl_text", parts.scl_text),
          std::make_pair("scl_image", parts.scl_image),
          std::make_pair("scl_logits", parts.scl_logits),
          std::make_pair("total", parts.total)};
      for (auto& [name, value] : named) {
        if (!std::isfinite(value)) {
          throw std::runtime_error("train: non-finite " + std::string(name) +
                                   " loss at epoch " + std::to_string(epoch + 1));
        }
      }

      tape.backward(g.total);
      auto blocks = result.stack.blocks();
      auto ordered = vars.ordered();
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto& grad = ordered[b].grad();
        for (std::size_t i = 0; i < blocks[b].tensor->data.size(); ++i) {
          blocks[b].tensor->data[i] -= cfg.learning_rate * grad[i];
        }
      }

      double w = static_cast<double>(batch.size());
      epoch_sum.ce += w * parts.ce;
      epoch_sum.scl_text += w * parts.scl_text;
      epoch_sum.scl_image += w * parts.scl_image;
      epoch_sum.scl_logits += w * parts.scl_logits;
      epoch_sum.total += w * parts.total;
    }
    double inv = 1.0 / static_cast<double>(n);
    losses::LossBreakdown mean_parts;
    mean_parts.ce = epoch_sum.ce * inv;
    mean_parts.scl_text = epoch_sum.scl_text * inv;
    mean_parts.scl_image = epoch_sum.scl_image * inv;
    mean_parts.scl_logits = epoch_sum.scl_logits * inv;
    mean_parts.total = epoch_sum.total * inv;
    mean_parts.lambda1 = cfg.lambda1;
    mean_parts.lambda2 = cfg.lambda2;
    result.epoch_history.push_back(mean_parts);
  }
  return result;
}

// ---------------------------------------------------------------------------

namespace {

// Corrected classifier features for one split under the trained stack.
Tensor split_classifier(const prompts::PromptStack& stack,
                        const encoder::FrozenBackbone& bb, const TrainConfig& cfg,
                        const data::SyntheticTask& task, std::span<const int> class_ids) {
  auto templates = encoder::make_templates(cfg.anchor_templates);
  std::vector<std::vector<int>> class_tokens;
  for (int id : class_ids) class_tokens.push_back(task.class_tokens[id]);
  encoder::ZeroShotAnchor anchor = encoder::build_anchor(bb, class_tokens, templates);

  Tensor prompted = Tensor::zeros(class_ids.size(), bb.config().d_out);
  for (std::size_t k = 0; k < class_ids.size(); ++k) {
    Tensor f = encoder::encode_text_value(bb, &stack,
                                          bb.prepare_text(task.class_tokens[class_ids[k]]));
    for (std::size_t j = 0; j < f.size(); ++j) prompted.at(k, j) = f.data[j];
  }
  if (!cfg.use_udc) return prompted;
  return udc::apply_udc(prompted, anchor.class_feats).corrected;
}

double split_accuracy(const prompts::PromptStack& stack, const encoder::FrozenBackbone& bb,
                      const TrainConfig& cfg, const data::SyntheticTask& task,
                      const data::SplitView& split, std::vector<EvalResult::PerClass>& table) {
  Tensor classifier = split_classifier(stack, bb, cfg, task, split.class_ids);
  std::vector<EvalResult::PerClass> per_class(split.class_ids.size());
  for (std::size_t k = 0; k < split.class_ids.size(); ++k) {
    per_class[k].class_id = split.class_ids[k];
  }
  std::size_t correct = 0;
  for (const data::Sample* s : split.eval) {
    Tensor f = encoder::encode_image_value(bb, &stack, bb.prepare_image(s->patches));
    std::size_t best = 0;
    double best_sim = -2.0;
    for (std::size_t k = 0; k < classifier.rows(); ++k) {
      double sim = 0.0;
      for (std::size_t j = 0; j < classifier.cols(); ++j) {
        sim += f.data[j] * classifier.at(k, j);
      }
      if (sim > best_sim) {
        best_sim = sim;
        best = k;
      }
    }
    std::size_t truth = 0;
    while (split.class_ids[truth] != s->label) ++truth;
    per_class[truth].total += 1;
    if (best == truth) {
      per_class[truth].correct += 1;
      ++correct;
    }
  }
  table.insert(table.end(), per_class.begin(), per_class.end());
  return 100.0 * static_cast<double>(correct) / static_cast<double>(split.eval.size());
}

}  // namespace

EvalResult evaluate(const prompts::PromptStack& stack, const encoder::FrozenBackbone& bb,
                    const TrainConfig& cfg, const data::SyntheticTask& task) {
  auto [base, novel] = data::split_base_novel(task);
  if (base.eval.empty() || novel.eval.empty()) {
    throw std::invalid_argument("evaluate: empty evaluation split");
  }
  EvalResult r;
  r.base_acc = split_accuracy(stack, bb, cfg, task, base, r.per_class);
  r.novel_acc = split_accuracy(stack, bb, cfg, task, novel, r.per_class);
  r.hm = harmonic_mean(r.base_acc, r.novel_acc);
  return r;
}

// ---------------------------------------------------------------------------

const std::vector<std::string> kAblationRowLabels = {
    "1-ivlp", "2-lora", "3-scl", "4-udc", "5-shared"};

TrainConfig ablation_config(const TrainConfig& base_cfg, std::size_t row) {
  TrainConfig cfg = base_cfg;
  switch (row) {
    case 0:  // full-rank independent prompting, no regularization
      cfg.prompt.mode = prompts::Mode::kFullRank;
      cfg.use_scl = false;
      cfg.use_udc = false;
      break;
    case 1:  // + low-rank factorization
      cfg.prompt.mode = prompts::Mode::kIndependent;
      cfg.use_scl = false;
      cfg.use_udc = false;
      break;
    case 2:  // + consistency loss
      cfg.prompt.mode = prompts::Mode::kIndependent;
      cfg.use_scl = true;
      cfg.use_udc = false;
      break;
    case 3:  // + drift correction
      cfg.prompt.mode = prompts::Mode::kIndependent;
      cfg.use_scl = true;
      cfg.use_udc = true;
      break;
    case 4:  // + shared up-projection
      cfg.prompt.mode = prompts::Mode::kShared;
      cfg.use_scl = true;
      cfg.use_udc = true;
      break;
    default: throw std::logic_error("ablation: unknown row");
  }
  return cfg;
}

namespace {

RunRow run_one(const TrainConfig& cfg, const data::SyntheticTask& task,
               std::uint64_t seed, const std::string& run_id, const std::string& value) {
  RunRow row;
  row.run_id = run_id;
  row.value = value;
  row.seed = seed;
  row.epochs = cfg.epochs;
  try {
    TrainConfig run_cfg = cfg;
    run_cfg.seed = seed;
    run_cfg.validate();
    row.params = prompts::count_params(run_cfg.prompt);
    encoder::FrozenBackbone bb = task.make_backbone();
    auto [base, novel] = data::split_base_novel(task);
    std::vector<std::vector<int>> base_tokens;
    for (int id : base.class_ids) base_tokens.push_back(task.class_tokens[id]);
    encoder::ZeroShotAnchor anchor = encoder::build_anchor(
        bb, base_tokens, encoder::make_templates(run_cfg.anchor_templates));
    TrainResult tr = train(run_cfg, bb, anchor, task);
    EvalResult ev = evaluate(tr.stack, bb, run_cfg, task);
    row.base_acc = ev.base_acc;
    row.novel_acc = ev.novel_acc;
    row.hm = ev.hm;
  } catch (const std::exception& e) {
    row.status = e.what();
  }
  return row;
}

}  // namespace

std::vector<RunRow> ablate(const TrainConfig& base_cfg, const data::SyntheticTask& task,
                           std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw std::invalid_argument("ablate: at least one seed required");
  std::vector<RunRow> rows;
  for (std::size_t r = 0; r < kAblationRowLabels.size(); ++r) {
    TrainConfig cfg = ablation_config(base_cfg, r);
    for (std::uint64_t seed : seeds) {
      std::string run_id = "ablate-" + kAblationRowLabels[r] + "-seed" + std::to_string(seed);
      rows.push_back(run_one(cfg, task, seed, run_id, kAblationRowLabels[r]));
    }
  }
  return rows;
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kDepth: return "depth";
    case SweepAxis::kLength: return "length";
    case SweepAxis::kRank: return "rank";
  }
  throw std::logic_error("unknown sweep axis");
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "depth") return SweepAxis::kDepth;
  if (s == "length") return SweepAxis::kLength;
  if (s == "rank") return SweepAxis::kRank;
  throw std::invalid_argument("unknown sweep axis '" + s + "' (expected depth|length|rank)");
}

std::vector<RunRow> sweep(const TrainConfig& base_cfg, SweepAxis axis,
                          std::span<const int> values, const data::SyntheticTask& task,
                          std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw std::invalid_argument("sweep: at least one seed required");
  if (values.empty()) throw std::invalid_argument("sweep: at least one value required");
  std::vector<RunRow> rows;
  for (int v : values) {
    for (std::uint64_t seed : seeds) {
      std::string run_id = "sweep-" + to_string(axis) + "-" + std::to_string(v) + "-seed" +
                           std::to_string(seed);
      RunRow row;
      if (v < 1) {
        row.run_id = run_id;
        row.value = std::to_string(v);
        row.seed = seed;
        row.epochs = base_cfg.epochs;
        row.status = "invalid " + to_string(axis) + " value " + std::to_string(v);
        rows.push_back(std::move(row));
        continue;
      }
      TrainConfig cfg = base_cfg;
      auto uv = static_cast<std::size_t>(v);
      switch (axis) {
        case SweepAxis::kDepth: cfg.prompt.depth = uv; break;
        case SweepAxis::kLength:
          cfg.prompt.length = uv;
          cfg.prompt.v_length = uv;
          break;
        case SweepAxis::kRank: cfg.prompt.rank = uv; break;
      }
      rows.push_back(run_one(cfg, task, seed, run_id, std::to_string(v)));
    }
  }
  return rows;
}

std::vector<SummaryRow> summarize(std::span<const RunRow> rows) {
  std::vector<SummaryRow> out;
  for (const RunRow& r : rows) {
    if (r.status != "ok") continue;
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const SummaryRow& s) { return s.value == r.value; });
    if (it == out.end()) {
      out.push_back(SummaryRow{r.value, 0.0, 0.0, 0.0, r.params, 0});
      it = out.end() - 1;
    }
    it->base_acc += r.base_acc;
    it->novel_acc += r.novel_acc;
    it->hm += r.hm;
    it->runs += 1;
  }
  for (SummaryRow& s : out) {
    if (s.runs > 0) {
      s.base_acc /= static_cast<double>(s.runs);
      s.novel_acc /= static_cast<double>(s.runs);
      s.hm /= static_cast<double>(s.runs);
    }
  }
  return out;
}

void write_metrics_csv(std::span<const RunRow> rows, std::ostream& os) {
  os << "run_id,value,seed,base_acc,novel_acc,hm,params,epochs,status\n";
  os << std::setprecision(10);
  for (const RunRow& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    os << r.run_id << "," << r.value << "," << r.seed << "," << r.base_acc << ","
       << r.novel_acc << "," << r.hm << "," << r.params << "," << r.epochs << ","
       << status << "\n";
  }
}

void write_summary_csv(std::span<const SummaryRow> rows, std::ostream& os) {
  os << "value,mean_base_acc,mean_novel_acc,mean_hm,params,runs\n";
  os << std::setprecision(10);
  for (const SummaryRow& r : rows) {
    os << r.value << "," << r.base_acc << "," << r.novel_acc << "," << r.hm << ","
       << r.params << "," << r.runs << "\n";
  }
}

void write_history_csv(std::span<const losses::LossBreakdown> history, std::ostream& os) {
  os << "epoch,ce,scl_text,scl_image,scl_logits,total\n";
  os << std::setprecision(17);
  for (std::size_t e = 0; e < history.size(); ++e) {
    const auto& h = history[e];
    os << (e + 1) << "," << h.ce << "," << h.scl_text << "," << h.scl_image << ","
       << h.scl_logits << "," << h.total << "\n";
  }
}

// ---------------------------------------------------------------------------

GradCheckReport check_gradients(const TrainConfig& cfg, const encoder::FrozenBackbone& bb,
                                const data::SyntheticTask& task, std::size_t batch,
                                double eps) {
  cfg.validate();
  auto [base, novel] = data::split_base_novel(task);
  std::vector<std::vector<int>> base_tokens;
  for (int id : base.class_ids) base_tokens.push_back(task.class_tokens[id]);
  encoder::ZeroShotAnchor anchor =
      encoder::build_anchor(bb, base_tokens, encoder::make_templates(cfg.anchor_templates));
  TrainContext ctx = make_train_context(cfg, bb, anchor, task);

  batch = std::min(batch, ctx.images.size());
  std::vector<std::size_t> batch_idx(batch);
  std::iota(batch_idx.begin(), batch_idx.end(), std::size_t{0});

  prompts::PromptStack stack = prompts::init_stack(cfg.prompt, cfg.seed);
  auto blocks = stack.blocks();
  std::vector<Tensor> point;
  std::vector<std::string> names;
  for (auto& b : blocks) {
    point.push_back(*b.tensor);
    names.push_back(b.name);
  }

  auto with_point = [&](std::span<const Tensor> p) {
    prompts::PromptStack s = stack;
    auto bs = s.blocks();
    for (std::size_t i = 0; i < bs.size(); ++i) *bs[i].tensor = p[i];
    return s;
  };
  ScalarFn value_fn = [&](std::span<const Tensor> p) -> double {
    prompts::PromptStack s = with_point(p);
    Tape tape;
    prompts::StackVars vars = prompts::lift(tape, s, /*trainable=*/false);
    return build_loss(tape, bb, vars, ctx, batch_idx, cfg).total.scalar();
  };
  GradFn grad_fn = [&](std::span<const Tensor> p) -> std::vector<Tensor> {
    prompts::PromptStack s = with_point(p);
    Tape tape;
    prompts::StackVars vars = prompts::lift(tape, s, /*trainable=*/true);
    LossGraph g = build_loss(tape, bb, vars, ctx, batch_idx, cfg);
    tape.backward(g.total);
    std::vector<Tensor> grads;
    for (const Var& v : vars.ordered()) grads.push_back(v.grad_tensor());
    return grads;
  };
  return grad_check(value_fn, grad_fn, std::move(point), std::move(names), eps);
}

}  // namespace mmlop::trainer
