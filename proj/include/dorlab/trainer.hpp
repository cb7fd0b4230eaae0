// Copyright 2026 The dorlab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Objectives and the SGD loop for prompt tuning.
//
//   ce      mean cross-entropy over a batch of base-class images
//   anchor  mean_c (1 - cos(ψ'_c, ψ0_c)) over the base classes
//   dor     1 - mean_o cos(ψ'_o, ψ0_o) over a batch of outlier words
//
// where ψ' uses the learned context and ψ0 the frozen template. Totals:
// ce_only = ce, anchor_reg = ce + λ·anchor, dor = ce + λ·dor,
// anchor_plus_dor = ce + λ_a·anchor + λ·dor.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "dorlab/common.hpp"
#include "dorlab/divergence.hpp"
#include "dorlab/embedding_store.hpp"
#include "dorlab/metrics.hpp"
#include "dorlab/miniclip.hpp"
#include "dorlab/outlier_pool.hpp"

namespace dorlab {

enum class Objective { kCeOnly, kAnchorReg, kDor, kAnchorPlusDor };

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::kCeOnly: return "ce_only";
    case Objective::kAnchorReg: return "anchor_reg";
    case Objective::kDor: return "dor";
    case Objective::kAnchorPlusDor: return "anchor_plus_dor";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  if (s == "ce_only" || s == "ce") return Objective::kCeOnly;
  if (s == "anchor_reg" || s == "anchor") return Objective::kAnchorReg;
  if (s == "dor") return Objective::kDor;
  if (s == "anchor_plus_dor") return Objective::kAnchorPlusDor;
  throw ValidationError("unknown objective '" + std::string(s) + "'");
}

// 8 when the regularizer sits on plain prompt tuning, 2 when DOR is added
// on top of an already-regularized objective.
inline double default_lambda(Objective o) { return o == Objective::kAnchorPlusDor ? 2.0 : 8.0; }

inline bool uses_anchor(Objective o) { return o == Objective::kAnchorReg || o == Objective::kAnchorPlusDor; }
inline bool uses_outliers(Objective o) { return o == Objective::kDor || o == Objective::kAnchorPlusDor; }

struct TrainConfig {
  Objective objective = Objective::kDor;
  double lambda = 8.0;
  // Anchor weight in anchor_plus_dor; λ_a of the composed objective.
  double anchor_lambda = 8.0;
  int epochs = 200;
  int batch_size = 32;
  double learning_rate = 1.0;
  std::uint64_t seed = 1;
  int outlier_update_interval = 1;
  // 0 means "same as batch_size", clamped to the pool size.
  int outlier_batch_size = 0;
  bool probe_conflict = true;

  void validate() const {
    require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be finite and non-negative");
    require(anchor_lambda >= 0.0 && std::isfinite(anchor_lambda), "anchor_lambda must be finite and non-negative");
    require(epochs >= 0, "epochs must be non-negative");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), "learning_rate must be finite and non-negative");
    require(outlier_update_interval >= 1, "outlier_update_interval must be at least 1");
    require(outlier_batch_size >= 0, "outlier_batch_size must be non-negative");
  }

  double anchor_weight() const {
    switch (objective) {
      case Objective::kAnchorReg: return lambda;
      case Objective::kAnchorPlusDor: return anchor_lambda;
      default: return 0.0;
    }
  }
  double dor_weight() const { return uses_outliers(objective) ? lambda : 0.0; }
  bool has_regularizer() const { return anchor_weight() > 0.0 || dor_weight() > 0.0; }
};

// A batch of images with labels given as positions in the base-class list.
struct DataBatch {
  MatrixXd images;
  std::vector<int> labels;
};

// Builds a batch from dataset items, mapping class ids to positions in
// `base`. Throws if an item's class is not a base class.
inline DataBatch make_batch(const LabeledDataset& data, std::span<const std::size_t> items,
                            std::span<const int> base) {
  DataBatch b;
  b.images.resize(static_cast<Eigen::Index>(items.size()), static_cast<Eigen::Index>(data.features.dim()));
  b.labels.reserve(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) {
    const int cls = data.labels.at(items[k]);
    auto it = std::find(base.begin(), base.end(), cls);
    if (it == base.end()) {
      throw ValidationError("item '" + data.features.id(items[k]) + "' has class " + std::to_string(cls) +
                            ", which is outside the base split");
    }
    b.labels.push_back(static_cast<int>(it - base.begin()));
    auto r = data.features.row(items[k]);
    for (std::size_t j = 0; j < r.size(); ++j) b.images(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = r[j];
  }
  return b;
}

struct LossValue {
  double value = 0.0;
  MatrixXd grad;  // M x token_dim; empty when not requested
};

inline LossValue ce_loss(const PromptModel& model, const DataBatch& batch, std::span<const std::size_t> class_tokens,
                         bool with_grad = true) {
  require(batch.images.rows() > 0, "cross-entropy of an empty batch");
  require(static_cast<std::size_t>(batch.images.rows()) == batch.labels.size(), "one label per image required");
  const auto c = static_cast<int>(class_tokens.size());
  for (int l : batch.labels) {
    if (l < 0 || l >= c) throw ValidationError("label " + std::to_string(l) + " is outside the base split");
  }
  const auto caches = model.forward(class_tokens);
  const MatrixXd text = PromptModel::stack(caches);
  if (batch.images.cols() != text.cols()) throw ValidationError("image dim does not match text feature dim");
  const double tau = model.tau();
  const auto n = static_cast<double>(batch.images.rows());
  const MatrixXd logits = tau * batch.images * text.transpose();  // N x C
  MatrixXd grad_text = MatrixXd::Zero(text.rows(), text.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - top).exp().matrix();
    const double z = e.sum();
    const int y = batch.labels[static_cast<std::size_t>(i)];
    loss += top + std::log(z) - logits(i, y);
    if (with_grad) {
      Eigen::RowVectorXd coef = e / z;
      coef(y) -= 1.0;
      grad_text += (tau / n) * coef.transpose() * batch.images.row(i);
    }
  }
  LossValue out{loss / n, {}};
  if (with_grad) out.grad = model.context_gradient(caches, grad_text);
  return out;
}

namespace detail {

// 1 - mean cos(learned, zero-shot) over the given tokens, and its gradient.
// Both features are unit, so 1 - cos is computed as |f - z|^2 / 2, which is
// exactly zero when the learned context equals the template.
inline LossValue alignment_loss(const PromptModel& model, std::span<const std::size_t> tokens, bool with_grad) {
  const auto caches = model.forward(tokens);
  const MatrixXd zs = model.zero_shot_features(tokens);
  const auto n = static_cast<double>(tokens.size());
  MatrixXd diff(zs.rows(), zs.cols());
  for (std::size_t k = 0; k < caches.size(); ++k) {
    diff.row(static_cast<Eigen::Index>(k)) = caches[k].feature.transpose() - zs.row(static_cast<Eigen::Index>(k));
  }
  LossValue out{0.5 * diff.squaredNorm() / n, {}};
  if (with_grad) out.grad = model.context_gradient(caches, diff / n);
  return out;
}

}  // namespace detail

inline LossValue anchor_reg_loss(const PromptModel& model, std::span<const std::size_t> base_tokens,
                                 bool with_grad = true) {
  require(!base_tokens.empty(), "anchor regularizer needs at least one base class");
  return detail::alignment_loss(model, base_tokens, with_grad);
}

inline LossValue dor_loss(const PromptModel& model, std::span<const std::size_t> outlier_tokens,
                          bool with_grad = true) {
  if (outlier_tokens.empty()) throw ValidationError("DOR loss of an empty outlier batch");
  return detail::alignment_loss(model, outlier_tokens, with_grad);
}

struct LossBreakdown {
  double ce = 0.0;
  double anchor = 0.0;
  double dor = 0.0;
  double total = 0.0;
  MatrixXd grad;
  MatrixXd grad_ce;
  // Weighted regularizer gradient (zero matrix when there is none).
  MatrixXd grad_reg;

  double reg(const TrainConfig& cfg) const { return cfg.anchor_weight() * anchor + cfg.dor_weight() * dor; }
};

// Terms with zero weight are skipped entirely, so λ = 0 reproduces the
// cross-entropy value and gradient exactly.
inline LossBreakdown total_loss(const TrainConfig& cfg, const PromptModel& model, const DataBatch& batch,
                                std::span<const std::size_t> base_tokens,
                                std::span<const std::size_t> outlier_tokens) {
  LossBreakdown out;
  auto ce = ce_loss(model, batch, base_tokens);
  out.ce = ce.value;
  out.total = ce.value;
  out.grad_ce = std::move(ce.grad);
  out.grad = out.grad_ce;
  out.grad_reg = MatrixXd::Zero(out.grad.rows(), out.grad.cols());
  if (const double w = cfg.anchor_weight(); w > 0.0) {
    auto a = anchor_reg_loss(model, base_tokens);
    out.anchor = a.value;
    out.total += w * a.value;
    out.grad_reg += w * a.grad;
    out.grad += w * a.grad;
  }
  if (const double w = cfg.dor_weight(); w > 0.0) {
    auto d = dor_loss(model, outlier_tokens);
    out.dor = d.value;
    out.total += w * d.value;
    out.grad_reg += w * d.grad;
    out.grad += w * d.grad;
  }
  return out;
}

struct GradientConflictSample {
  std::int64_t iteration = 0;
  double cosine = 0.0;
};

inline double flat_cosine(const MatrixXd& a, const MatrixXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericalError("gradient conflict is undefined for a zero gradient");
  return std::clamp(a.cwiseProduct(b).sum() / (na * nb), -1.0, 1.0);
}

// Cosine between the regularizer's and the cross-entropy's context
// gradients at the current iterate.
inline GradientConflictSample gradient_conflict_probe(const TrainConfig& cfg, const PromptModel& model,
                                                      const DataBatch& batch,
                                                      std::span<const std::size_t> base_tokens,
                                                      std::span<const std::size_t> outlier_tokens,
                                                      std::int64_t iteration = 0) {
  require(cfg.has_regularizer(), "gradient conflict needs an objective with a positive regularizer weight");
  const auto b = total_loss(cfg, model, batch, base_tokens, outlier_tokens);
  return {iteration, flat_cosine(b.grad_reg, b.grad_ce)};
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  std::vector<PredictionRecord> records;
  std::vector<std::vector<double>> logits;
};

// Predictions over `classes` (truth = position in that list) for every
// item whose label is one of them, using text features from `ctx`.
inline Evaluation evaluate(const PromptModel& model, const PromptContext& ctx, const LabeledDataset& data,
                           std::span<const int> classes, std::span<const std::size_t> class_tokens) {
  require(classes.size() == class_tokens.size(), "one token per class required");
  std::vector<std::size_t> tokens(class_tokens.begin(), class_tokens.end());
  const MatrixXd text = model.text_features_with(ctx, tokens);
  Evaluation out;
  for (std::size_t i : data.items_in(classes)) {
    auto r = data.features.row(i);
    VectorXd x(static_cast<Eigen::Index>(r.size()));
    for (std::size_t j = 0; j < r.size(); ++j) x(static_cast<Eigen::Index>(j)) = r[j];
    const VectorXd l = logits(x, text, model.tau());
    auto p = predict(l);
    const int truth = static_cast<int>(std::find(classes.begin(), classes.end(), data.labels[i]) - classes.begin());
    PredictionRecord rec;
    rec.probs = std::move(p.probs);
    rec.predicted = p.predicted;
    rec.confidence = p.confidence;
    rec.truth = truth;
    rec.id = data.features.id(i);
    out.records.push_back(std::move(rec));
    out.logits.emplace_back(l.data(), l.data() + l.size());
  }
  return out;
}

inline std::vector<std::size_t> tokens_for(std::span<const int> classes, std::span<const std::size_t> class_tokens) {
  std::vector<std::size_t> out;
  out.reserve(classes.size());
  for (int c : classes) out.push_back(class_tokens[static_cast<std::size_t>(c)]);
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  int epoch = 0;
  double ce = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double fd_base = 0.0;
  double fd_new = 0.0;
  double conf_base = 0.0;
  double conf_new = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"epoch", e.epoch},        {"ce", num(e.ce)},         {"reg", num(e.reg)},
          {"total", num(e.total)},   {"fd_base", num(e.fd_base)}, {"fd_new", num(e.fd_new)},
          {"conf_base", num(e.conf_base)}, {"conf_new", num(e.conf_new)}};
}

inline void write_log_jsonl(std::ostream& os, std::span<const EpochLog> log) {
  for (const auto& e : log) os << to_json(e).dump() << '\n';
}

inline void write_conflicts_csv(std::ostream& os, std::span<const GradientConflictSample> samples) {
  os << "iteration,cosine\n";
  for (const auto& s : samples) os << s.iteration << ',' << format_double(s.cosine) << '\n';
}

// Everything train() needs besides the config and the initial model.
struct TrainingTask {
  const LabeledDataset* data = nullptr;
  ClassSplit split;
  // Token-table index of each class id.
  std::vector<std::size_t> class_tokens;
  const OutlierPool* pool = nullptr;
  // Token-table index of each pool entry.
  std::vector<std::size_t> pool_tokens;
  // Items used for the per-epoch confidence summaries; defaults to `data`.
  const LabeledDataset* monitor = nullptr;
  FDConfig fd;
};

struct TrainResult {
  PromptModel model;
  std::vector<EpochLog> log;
  std::vector<GradientConflictSample> conflicts;
  std::int64_t iterations = 0;
  std::int64_t degenerate_probes = 0;
};

namespace detail {

inline double fd_of(const MatrixXd& features, const FDConfig& cfg) {
  if (features.rows() < 2) return std::numeric_limits<double>::quiet_NaN();
  FDConfig c = cfg;
  c.neighbors = std::min<int>(cfg.neighbors, static_cast<int>(features.rows()) - 1);
  return fd_score(features, c).overall;
}

inline double mean_conf_or_nan(const Evaluation& e) {
  if (e.records.empty()) return std::numeric_limits<double>::quiet_NaN();
  return mean_confidence(e.records);
}

}  // namespace detail

// FD (neighbors clamped to set size - 1) and mean confidence of both splits
// under the given context.
inline EpochLog snapshot(const PromptModel& model, const PromptContext& ctx, const TrainingTask& task) {
  const LabeledDataset& mon = task.monitor ? *task.monitor : *task.data;
  const auto base_tok = tokens_for(task.split.base, task.class_tokens);
  const auto new_tok = tokens_for(task.split.novel, task.class_tokens);
  EpochLog e;
  e.fd_base = detail::fd_of(model.text_features_with(ctx, base_tok), task.fd);
  e.fd_new = detail::fd_of(model.text_features_with(ctx, new_tok), task.fd);
  e.conf_base = detail::mean_conf_or_nan(evaluate(model, ctx, mon, task.split.base, base_tok));
  e.conf_new = task.split.novel.size() >= 2
                   ? detail::mean_conf_or_nan(evaluate(model, ctx, mon, task.split.novel, new_tok))
                   : std::numeric_limits<double>::quiet_NaN();
  return e;
}

// Plain SGD on the context tokens over shuffled base-class batches. The
// outlier batch is redrawn every outlier_update_interval iterations.
inline TrainResult train(const TrainConfig& cfg, PromptModel model, const TrainingTask& task) {
  cfg.validate();
  require(task.data != nullptr, "training needs a dataset");
  task.data->validate();
  require(task.class_tokens.size() == task.data->num_classes(), "one token per class required");
  require(!task.split.base.empty(), "training needs base classes");
  const auto base_tok = tokens_for(task.split.base, task.class_tokens);
  const auto items = task.data->items_in(task.split.base);
  require(!items.empty(), "no training items belong to the base classes");

  int outlier_b = 0;
  if (uses_outliers(cfg.objective) && cfg.dor_weight() > 0.0) {
    require(task.pool != nullptr && !task.pool->empty(), "this objective needs an outlier pool");
    require(task.pool_tokens.size() == task.pool->size(), "one token per pool entry required");
    outlier_b = cfg.outlier_batch_size > 0
                    ? cfg.outlier_batch_size
                    : std::min<int>(cfg.batch_size, static_cast<int>(task.pool->size()));
  }

  TrainResult res;
  std::vector<std::size_t> outlier_tok;
  std::vector<std::size_t> order = items;
  std::int64_t it = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto rng = make_rng(cfg.seed, 0x65706f6368ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double sum_ce = 0.0, sum_reg = 0.0, sum_total = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto batch = make_batch(*task.data, std::span(order).subspan(start, end - start), task.split.base);
      if (outlier_b > 0 && it % cfg.outlier_update_interval == 0) {
        const auto ob = sample_batch(*task.pool, outlier_b, it / cfg.outlier_update_interval);
        outlier_tok.clear();
        for (std::size_t k : ob.indices) outlier_tok.push_back(task.pool_tokens[k]);
      }
      const auto loss = total_loss(cfg, model, batch, base_tok, outlier_tok);
      if (cfg.probe_conflict && cfg.has_regularizer()) {
        try {
          res.conflicts.push_back({it, flat_cosine(loss.grad_reg, loss.grad_ce)});
        } catch (const NumericalError&) {
          ++res.degenerate_probes;
        }
      }
      if (!std::isfinite(loss.total) || !loss.grad.allFinite()) {
        throw NumericalError("training diverged at iteration " + std::to_string(it));
      }
      model.mutable_context().tokens -= cfg.learning_rate * loss.grad;
      sum_ce += loss.ce;
      sum_reg += loss.reg(cfg);
      sum_total += loss.total;
      ++steps;
      ++it;
    }
    EpochLog e = snapshot(model, model.context(), task);
    e.epoch = epoch + 1;
    e.ce = sum_ce / steps;
    e.reg = sum_reg / steps;
    e.total = sum_total / steps;
    res.log.push_back(e);
  }
  res.iterations = it;
  res.model = std::move(model);
  return res;
}

// ---------------------------------------------------------------------------
// Post-hoc temperature scaling

struct TemperatureFit {
  double temperature = 1.0;
  double nll = 0.0;
  double nll_at_one = 0.0;
};

inline double mean_nll(std::span<const std::vector<double>> logits, std::span<const int> labels, double t) {
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& l = logits[i];
    const double top = *std::max_element(l.begin(), l.end()) / t;
    double z = 0.0;
    for (double v : l) z += std::exp(v / t - top);
    s += top + std::log(z) - l[static_cast<std::size_t>(labels[i])] / t;
  }
  return s / static_cast<double>(logits.size());
}

inline constexpr double kMinTemperature = 0.05;
inline constexpr double kMaxTemperature = 20.0;
inline constexpr double kTemperatureTolerance = 1e-9;

// The logits are divided by T. NLL is convex in 1/T, hence unimodal in T,
// so golden-section search on [0.05, 20] finds the minimizer.
inline TemperatureFit temperature_scale(std::span<const std::vector<double>> logits, std::span<const int> labels) {
  if (logits.empty()) throw ValidationError("temperature scaling needs held-out records");
  require(logits.size() == labels.size(), "one label per logit row required");
  for (std::size_t i = 0; i < logits.size(); ++i) {
    require(!logits[i].empty(), "empty logit row");
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < logits[i].size(), "label out of range");
    for (double v : logits[i]) {
      if (!std::isfinite(v)) throw NumericalError("non-finite logit");
    }
  }
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = kMinTemperature, b = kMaxTemperature;
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = mean_nll(logits, labels, c), fd = mean_nll(logits, labels, d);
  while (b - a > kTemperatureTolerance) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = mean_nll(logits, labels, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = mean_nll(logits, labels, d);
    }
  }
  TemperatureFit fit;
  fit.temperature = 0.5 * (a + b);
  fit.nll = mean_nll(logits, labels, fit.temperature);
  fit.nll_at_one = mean_nll(logits, labels, 1.0);
  // Guard the optimality contract against a flat objective near T = 1.
  if (fit.nll_at_one < fit.nll) {
    fit.temperature = 1.0;
    fit.nll = fit.nll_at_one;
  }
  return fit;
}

}  // namespace dorlab
