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

// Experiment driver: configuration, the base-to-new protocol averaged over
// repeat seeds, parameter grids and plot-ready diagnostics.
//
// A repeat seed r drives every random choice of one run (data, split,
// encoder, template, context initialization, batch order, outlier
// sampling). Each consumer draws from its own stream, so sharing r is safe.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dorlab/common.hpp"
#include "dorlab/divergence.hpp"
#include "dorlab/embedding_store.hpp"
#include "dorlab/metrics.hpp"
#include "dorlab/miniclip.hpp"
#include "dorlab/outlier_pool.hpp"
#include "dorlab/trainer.hpp"
#include "dorlab/world.hpp"

#ifndef DORLAB_VERSION
#define DORLAB_VERSION "unknown"
#endif

namespace dorlab {

using nlohmann::json;

inline std::string artifact_version() { return DORLAB_VERSION; }

// ---------------------------------------------------------------------------
// Configuration

struct EmbeddingSources {
  std::string train;        // labeled image features
  std::string eval;         // labeled image features
  std::string class_texts;  // one feature per class name
  std::string vocabulary;   // candidate nouns
};

struct ExperimentConfig {
  std::string name = "default";
  // "synthetic" or "embeddings".
  std::string source = "synthetic";
  WorldSpec world = default_world();
  EmbeddingSources embeddings;
  TrainConfig train = default_train();
  SelectionConfig selection;
  FDConfig fd;
  BinningConfig binning;
  // Base-class items per class in the held-out set used to fit the post-hoc
  // temperature (synthetic source only).
  int calibration_per_class = 16;
  std::string output_dir = "runs/default";
  std::vector<std::uint64_t> repeat_seeds{1, 2, 3};

  static WorldSpec default_world() {
    WorldSpec w;
    w.data.num_classes = 4;
    w.data.dim = 8;
    w.data.shots_per_class = 16;
    w.data.noise_std = 0.2;
    w.eval_per_class = 200;
    w.model.tau = 100.0;
    w.model.context_length = 16;
    w.model.dims = {128, 128, 8};
    w.text.misalignment = 1.5;
    w.text.vocabulary_size = 20000;
    w.text.vocabulary_perturbation = 1.0;
    w.text.mixture_sharpness = 1.0;
    w.text.fit.shared_hidden = 32;
    w.text.fit.specific_scale = 0.2;
    w.text.fit.saturated_fraction = 0.6;
    w.text.fit.activation_spread = 0.9;
    return w;
  }

  static TrainConfig default_train() {
    TrainConfig t;
    t.objective = Objective::kDor;
    t.lambda = 8.0;
    t.epochs = 200;
    t.batch_size = 32;
    t.learning_rate = 3.0;
    return t;
  }

  void validate() const {
    require(source == "synthetic" || source == "embeddings", "source must be 'synthetic' or 'embeddings'");
    require(!repeat_seeds.empty(), "repeat_seeds must be non-empty");
    require(calibration_per_class >= 1, "calibration_per_class must be positive");
    train.validate();
    selection.validate();
    binning.validate();
    require(fd.neighbors >= 1, "fd.neighbors must be at least 1");
    if (source == "synthetic") {
      world.validate();
    } else {
      for (const auto* p : {&embeddings.train, &embeddings.eval, &embeddings.class_texts, &embeddings.vocabulary}) {
        require(!p->empty(), "embedding source paths must all be set");
      }
    }
  }

  // Every nested seed set to r.
  ExperimentConfig for_seed(std::uint64_t r) const {
    ExperimentConfig c = *this;
    c.world.data.seed = r;
    c.world.split_seed = r;
    c.world.model.weight_seed = r;
    c.world.model.template_seed = r;
    c.world.model.context_seed = r;
    c.train.seed = r;
    c.selection.seed = r;
    return c;
  }
};

inline json to_json(const ExperimentConfig& c) {
  const auto& w = c.world;
  const auto& f = w.text.fit;
  return {
      {"name", c.name},
      {"source", c.source},
      {"synthetic",
       {{"num_classes", w.data.num_classes},
        {"dim", w.data.dim},
        {"shots_per_class", w.data.shots_per_class},
        {"prototype_separation", w.data.prototype_separation},
        {"noise_std", w.data.noise_std},
        {"eval_per_class", w.eval_per_class},
        {"misalignment", w.text.misalignment},
        {"vocabulary_size", w.text.vocabulary_size},
        {"vocabulary_perturbation", w.text.vocabulary_perturbation},
        {"mixture_sharpness", w.text.mixture_sharpness},
        {"name_collisions", w.text.name_collisions},
        {"shared_hidden", f.shared_hidden},
        {"specific_scale", f.specific_scale},
        {"activation_spread", f.activation_spread},
        {"saturated_fraction", f.saturated_fraction},
        {"saturation", f.saturation}}},
      {"embeddings",
       {{"train", c.embeddings.train},
        {"eval", c.embeddings.eval},
        {"class_texts", c.embeddings.class_texts},
        {"vocabulary", c.embeddings.vocabulary}}},
      {"split", {{"fraction", w.split_fraction}}},
      {"model",
       {{"tau", w.model.tau},
        {"context_length", w.model.context_length},
        {"token_dim", w.model.dims.token_dim},
        {"hidden_dim", w.model.dims.hidden_dim},
        {"context_init_std", w.model.context_init_std}}},
      {"train",
       {{"objective", to_string(c.train.objective)},
        {"lambda", c.train.lambda},
        {"anchor_lambda", c.train.anchor_lambda},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.learning_rate},
        {"outlier_update_interval", c.train.outlier_update_interval},
        {"outlier_batch_size", c.train.outlier_batch_size}}},
      {"selection",
       {{"top_k", c.selection.top_k},
        {"exclusion_policy", to_string(c.selection.exclusion)},
        {"mode", to_string(c.selection.mode)},
        {"allow_oracle", c.selection.allow_oracle}}},
      {"fd", {{"neighbors", c.fd.neighbors}, {"distance", to_string(c.fd.distance)}}},
      {"binning",
       {{"num_conf_bins", c.binning.num_conf_bins},
        {"num_proximity_bins", c.binning.num_proximity_bins},
        {"proximity_neighbors", c.binning.proximity_neighbors}}},
      {"calibration_per_class", c.calibration_per_class},
      {"output_dir", c.output_dir},
      {"repeat_seeds", c.repeat_seeds},
  };
}

namespace detail {

// Rejects keys that the default configuration does not have.
inline void check_known_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!known.contains(it.key())) throw ValidationError("unknown config key '" + p + "'");
    if (known.at(it.key()).is_object()) {
      if (!it.value().is_object()) throw ValidationError("config key '" + p + "' must be an object");
      check_known_keys(it.value(), known.at(it.key()), p);
    }
  }
}

template <typename T>
T get_as(const json& j, const char* key, const std::string& section) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError("config field '" + section + "." + key + "': " + e.what());
  }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  const ExperimentConfig defaults;
  json merged = to_json(defaults);
  detail::check_known_keys(j, merged, "");
  merged.merge_patch(j);

  ExperimentConfig c;
  try {
    c.name = merged.at("name").get<std::string>();
    c.source = merged.at("source").get<std::string>();
    const auto& s = merged.at("synthetic");
    auto& w = c.world;
    w.data.num_classes = s.at("num_classes").get<int>();
    w.data.dim = s.at("dim").get<int>();
    w.data.shots_per_class = s.at("shots_per_class").get<int>();
    w.data.prototype_separation = s.at("prototype_separation").get<double>();
    w.data.noise_std = s.at("noise_std").get<double>();
    w.eval_per_class = s.at("eval_per_class").get<int>();
    w.text.misalignment = s.at("misalignment").get<double>();
    w.text.vocabulary_size = s.at("vocabulary_size").get<int>();
    w.text.vocabulary_perturbation = s.at("vocabulary_perturbation").get<double>();
    w.text.mixture_sharpness = s.at("mixture_sharpness").get<double>();
    w.text.name_collisions = s.at("name_collisions").get<int>();
    w.text.fit.shared_hidden = s.at("shared_hidden").get<int>();
    w.text.fit.specific_scale = s.at("specific_scale").get<double>();
    w.text.fit.activation_spread = s.at("activation_spread").get<double>();
    w.text.fit.saturated_fraction = s.at("saturated_fraction").get<double>();
    w.text.fit.saturation = s.at("saturation").get<double>();
    const auto& e = merged.at("embeddings");
    c.embeddings = {e.at("train").get<std::string>(), e.at("eval").get<std::string>(),
                    e.at("class_texts").get<std::string>(), e.at("vocabulary").get<std::string>()};
    w.split_fraction = merged.at("split").at("fraction").get<double>();
    const auto& m = merged.at("model");
    w.model.tau = m.at("tau").get<double>();
    w.model.context_length = m.at("context_length").get<int>();
    w.model.dims.token_dim = m.at("token_dim").get<int>();
    w.model.dims.hidden_dim = m.at("hidden_dim").get<int>();
    w.model.dims.feature_dim = w.data.dim;
    w.model.context_init_std = m.at("context_init_std").get<double>();
    const auto& t = merged.at("train");
    c.train.objective = parse_objective(t.at("objective").get<std::string>());
    c.train.lambda = t.at("lambda").get<double>();
    c.train.anchor_lambda = t.at("anchor_lambda").get<double>();
    c.train.epochs = t.at("epochs").get<int>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.outlier_update_interval = t.at("outlier_update_interval").get<int>();
    c.train.outlier_batch_size = t.at("outlier_batch_size").get<int>();
    const auto& sel = merged.at("selection");
    c.selection.top_k = sel.at("top_k").get<int>();
    c.selection.exclusion = parse_exclusion_policy(sel.at("exclusion_policy").get<std::string>());
    c.selection.mode = parse_selection_mode(sel.at("mode").get<std::string>());
    c.selection.allow_oracle = sel.at("allow_oracle").get<bool>();
    c.fd.neighbors = merged.at("fd").at("neighbors").get<int>();
    c.fd.distance = parse_distance(merged.at("fd").at("distance").get<std::string>());
    const auto& b = merged.at("binning");
    c.binning.num_conf_bins = b.at("num_conf_bins").get<int>();
    c.binning.num_proximity_bins = b.at("num_proximity_bins").get<int>();
    c.binning.proximity_neighbors = b.at("proximity_neighbors").get<int>();
    c.calibration_per_class = merged.at("calibration_per_class").get<int>();
    c.output_dir = merged.at("output_dir").get<std::string>();
    c.repeat_seeds = merged.at("repeat_seeds").get<std::vector<std::uint64_t>>();
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("malformed config: ") + ex.what());
  }
  c.validate();
  return c;
}

inline json read_json_file(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw MissingFileError("missing file " + p.string());
  std::ifstream is(p);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("cannot parse " + p.string() + ": " + e.what());
  }
}

// Parses an override value: JSON when it parses as JSON, a plain string
// otherwise ("--train.objective=dor" needs no quotes).
inline json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

// Applies "a.b.c" = value to a config JSON document.
inline void apply_override(json& doc, const std::string& dotted, const json& value) {
  require(!dotted.empty(), "empty override key");
  json* node = &doc;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ValidationError("override '" + dotted + "' does not name a config field");
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

// Layers a config file (may be empty) and overrides over the defaults.
// `seed`, when given, replaces repeat_seeds with that single seed.
inline ExperimentConfig resolve_config(const json& file, const std::vector<std::pair<std::string, json>>& overrides,
                                       std::optional<std::uint64_t> seed = std::nullopt) {
  json doc = file.is_null() ? json::object() : file;
  for (const auto& [k, v] : overrides) apply_override(doc, k, v);
  if (seed) doc["repeat_seeds"] = json::array({*seed});
  return config_from_json(doc);
}

// ---------------------------------------------------------------------------
// Running one configuration

struct SplitMetrics {
  double accuracy = 0.0;
  double confidence = 0.0;
  double ece = 0.0;
  double ace = 0.0;
  double mce = 0.0;
  double piece = 0.0;
  double fd = 0.0;
  std::size_t count = 0;
};

struct ModelMetrics {
  SplitMetrics base;
  SplitMetrics novel;
  // FD over the text features of every class.
  double fd_all = 0.0;
};

struct TemperatureBaseline {
  double temperature = 1.0;
  double ece_base = 0.0;
  double ece_new = 0.0;
};

struct RunResult {
  std::uint64_t seed = 0;
  ClassSplit split;
  std::size_t pool_size = 0;
  ModelMetrics zero_shot;
  ModelMetrics fine_tuned;
  TemperatureBaseline temperature;
  // Share of conflict samples in (-0.1, 0.1]; NaN without a regularizer.
  double conflict_fraction = std::numeric_limits<double>::quiet_NaN();
  std::vector<EpochLog> log;
  std::vector<GradientConflictSample> conflicts;
  // Evaluations kept for reliability diagrams and diagnostics.
  Evaluation zs_base, zs_new, ft_base, ft_new;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<RunResult> runs;
  ModelMetrics zero_shot_mean;
  ModelMetrics fine_tuned_mean;
  double conflict_fraction_mean = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr double kConflictBand = 0.1;

inline double conflict_fraction(std::span<const GradientConflictSample> samples) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t in = 0;
  for (const auto& s : samples) in += (s.cosine > -kConflictBand && s.cosine <= kConflictBand);
  return static_cast<double>(in) / static_cast<double>(samples.size());
}

// The world of one run: synthetic or loaded from embedding files.
inline World build_world(const ExperimentConfig& cfg) {
  if (cfg.source == "synthetic") return build_synthetic_world(cfg.world);
  auto train = load_labeled_dataset(cfg.embeddings.train);
  auto eval = load_labeled_dataset(cfg.embeddings.eval);
  const auto texts = load_embedding_set(cfg.embeddings.class_texts);
  const auto nouns = load_embedding_set(cfg.embeddings.vocabulary);
  ModelConfig mc = cfg.world.model;
  mc.dims.feature_dim = static_cast<int>(texts.dim());
  return build_embedding_world(std::move(train), std::move(eval), texts, nouns, mc, cfg.world.text.fit,
                               cfg.world.split_fraction, cfg.world.split_seed);
}

// Builds the outlier pool of a run against its base classes.
inline OutlierPool build_pool(const World& w, const SelectionConfig& sel) {
  const auto base_feat = w.class_features(w.split.base);
  if (sel.mode == SelectionMode::kOracle) return oracle_pool(w.class_features(w.split.novel), base_feat, sel);
  const auto scores = score_candidates(w.vocab, base_feat);
  return select_outliers(w.vocab, w.class_names(w.split.base), scores, sel, w.class_names(w.split.novel));
}

inline std::vector<std::size_t> pool_tokens(const World& w, const OutlierPool& pool) {
  std::vector<std::size_t> out;
  out.reserve(pool.size());
  for (const auto& e : pool.selected) out.push_back(w.model.tokens().require_index(e.word));
  return out;
}

namespace detail {

inline SplitMetrics split_metrics(const Evaluation& ev, const EmbeddingSet& image_features, const MatrixXd& text,
                                  const ExperimentConfig& cfg) {
  SplitMetrics m;
  m.count = ev.records.size();
  m.accuracy = accuracy(ev.records);
  m.confidence = mean_confidence(ev.records);
  m.ece = compute_ece(ev.records, cfg.binning.num_conf_bins);
  m.ace = compute_ace(ev.records, cfg.binning.num_conf_bins);
  m.mce = compute_mce(ev.records, cfg.binning.num_conf_bins);
  m.piece = compute_piece(ev.records, cfg.binning, image_features);
  m.fd = fd_of(text, cfg.fd);
  return m;
}

inline std::vector<int> labels_of(const Evaluation& ev) {
  std::vector<int> out;
  for (const auto& r : ev.records) out.push_back(r.truth);
  return out;
}

inline std::vector<PredictionRecord> rescaled(const Evaluation& ev, double t) {
  std::vector<PredictionRecord> out;
  for (std::size_t i = 0; i < ev.logits.size(); ++i) {
    std::vector<double> l = ev.logits[i];
    for (double& v : l) v /= t;
    auto p = predict(std::span<const double>(l));
    PredictionRecord r;
    r.probs = std::move(p.probs);
    r.predicted = p.predicted;
    r.confidence = p.confidence;
    r.truth = ev.records[i].truth;
    r.id = ev.records[i].id;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace detail

inline ModelMetrics model_metrics(const World& w, const PromptModel& model, const PromptContext& ctx,
                                  const ExperimentConfig& cfg, Evaluation* base_out = nullptr,
                                  Evaluation* new_out = nullptr) {
  ModelMetrics out;
  const auto base_tok = tokens_for(w.split.base, w.class_tokens);
  const auto new_tok = tokens_for(w.split.novel, w.class_tokens);
  auto eb = evaluate(model, ctx, w.eval, w.split.base, base_tok);
  auto en = evaluate(model, ctx, w.eval, w.split.novel, new_tok);
  out.base = detail::split_metrics(eb, w.eval.features, model.text_features_with(ctx, base_tok), cfg);
  out.novel = detail::split_metrics(en, w.eval.features, model.text_features_with(ctx, new_tok), cfg);
  out.fd_all = detail::fd_of(model.text_features_with(ctx, w.class_tokens), cfg.fd);
  if (base_out) *base_out = std::move(eb);
  if (new_out) *new_out = std::move(en);
  return out;
}

// One run of the protocol with every nested seed already set.
inline RunResult run_once(const ExperimentConfig& cfg, std::uint64_t seed) {
  RunResult r;
  r.seed = seed;
  const World w = build_world(cfg);
  r.split = w.split;

  OutlierPool pool;
  TrainingTask task;
  task.data = &w.train;
  task.split = w.split;
  task.class_tokens = w.class_tokens;
  task.monitor = &w.eval;
  task.fd = cfg.fd;
  if (uses_outliers(cfg.train.objective) && cfg.train.dor_weight() > 0.0) {
    pool = build_pool(w, cfg.selection);
    task.pool = &pool;
    task.pool_tokens = pool_tokens(w, pool);
    r.pool_size = pool.size();
  }
  auto trained = train(cfg.train, w.model, task);
  r.log = std::move(trained.log);
  r.conflicts = std::move(trained.conflicts);
  r.conflict_fraction = conflict_fraction(r.conflicts);

  r.zero_shot = model_metrics(w, w.model, w.model.template_context(), cfg, &r.zs_base, &r.zs_new);
  r.fine_tuned = model_metrics(w, trained.model, trained.model.context(), cfg, &r.ft_base, &r.ft_new);

  // Post-hoc temperature fitted on held-out base-class items of the tuned
  // model, then applied to both splits.
  const auto base_tok = tokens_for(w.split.base, w.class_tokens);
  Evaluation calib;
  if (cfg.source == "synthetic") {
    const auto held = generate_synthetic_eval(cfg.world.data, cfg.calibration_per_class, 1);
    calib = evaluate(trained.model, trained.model.context(), held, w.split.base, base_tok);
  } else {
    calib = evaluate(trained.model, trained.model.context(), w.train, w.split.base, base_tok);
  }
  const auto fit = temperature_scale(calib.logits, detail::labels_of(calib));
  r.temperature.temperature = fit.temperature;
  r.temperature.ece_base = compute_ece(detail::rescaled(r.ft_base, fit.temperature), cfg.binning.num_conf_bins);
  r.temperature.ece_new = compute_ece(detail::rescaled(r.ft_new, fit.temperature), cfg.binning.num_conf_bins);
  return r;
}

namespace detail {

inline void accumulate(SplitMetrics& a, const SplitMetrics& b, double w) {
  a.accuracy += w * b.accuracy;
  a.confidence += w * b.confidence;
  a.ece += w * b.ece;
  a.ace += w * b.ace;
  a.mce += w * b.mce;
  a.piece += w * b.piece;
  a.fd += w * b.fd;
  a.count += b.count;
}

inline void accumulate(ModelMetrics& a, const ModelMetrics& b, double w) {
  accumulate(a.base, b.base, w);
  accumulate(a.novel, b.novel, w);
  a.fd_all += w * b.fd_all;
}

}  // namespace detail

// Runs the protocol once per repeat seed and averages. Errors carry the
// seed they happened under.
inline ExperimentReport run_base_to_new(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentReport rep;
  rep.config = cfg;
  const double w = 1.0 / static_cast<double>(cfg.repeat_seeds.size());
  double cf = 0.0;
  bool have_cf = true;
  for (std::uint64_t s : cfg.repeat_seeds) {
    try {
      rep.runs.push_back(run_once(cfg.for_seed(s), s));
    } catch (const ValidationError& e) {
      throw ValidationError("run '" + cfg.name + "' seed " + std::to_string(s) + ": " + e.what());
    } catch (const Error& e) {
      throw Error("run '" + cfg.name + "' seed " + std::to_string(s) + ": " + e.what());
    }
    const auto& r = rep.runs.back();
    detail::accumulate(rep.zero_shot_mean, r.zero_shot, w);
    detail::accumulate(rep.fine_tuned_mean, r.fine_tuned, w);
    if (std::isfinite(r.conflict_fraction)) {
      cf += w * r.conflict_fraction;
    } else {
      have_cf = false;
    }
  }
  if (have_cf) rep.conflict_fraction_mean = cf;
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const SplitMetrics& m) {
  return {{"accuracy", num(m.accuracy)}, {"confidence", num(m.confidence)}, {"ece", num(m.ece)},
          {"ace", num(m.ace)},           {"mce", num(m.mce)},               {"piece", num(m.piece)},
          {"fd", num(m.fd)},             {"count", m.count}};
}

// Harmonic and arithmetic means across the two splits for each metric.
// The harmonic mean is null when either side is not positive.
inline json cross_split(const ModelMetrics& m) {
  json out = json::object();
  auto add = [&](const char* k, double a, double b) {
    out[k] = {{"hm", (a > 0.0 && b > 0.0) ? num(harmonic_mean(a, b)) : json(nullptr)},
              {"am", num(arithmetic_mean(a, b))}};
  };
  add("accuracy", m.base.accuracy, m.novel.accuracy);
  add("confidence", m.base.confidence, m.novel.confidence);
  add("ece", m.base.ece, m.novel.ece);
  add("ace", m.base.ace, m.novel.ace);
  add("mce", m.base.mce, m.novel.mce);
  add("piece", m.base.piece, m.novel.piece);
  return out;
}

inline json to_json(const ModelMetrics& m) {
  return {{"base", to_json(m.base)}, {"new", to_json(m.novel)}, {"fd_all", num(m.fd_all)}, {"across_splits", cross_split(m)}};
}

}  // namespace detail

inline json to_json(const ExperimentReport& rep) {
  json runs = json::array();
  for (const auto& r : rep.runs) {
    runs.push_back({{"seed", r.seed},
                    {"split", {{"base", r.split.base}, {"new", r.split.novel}}},
                    {"pool_size", r.pool_size},
                    {"zero_shot", detail::to_json(r.zero_shot)},
                    {"fine_tuned", detail::to_json(r.fine_tuned)},
                    {"temperature_scaling",
                     {{"temperature", r.temperature.temperature},
                      {"ece_base", r.temperature.ece_base},
                      {"ece_new", r.temperature.ece_new}}},
                    {"conflict_fraction", detail::num(r.conflict_fraction)}});
  }
  return {{"version", artifact_version()},
          {"config", to_json(rep.config)},
          {"runs", runs},
          {"mean",
           {{"zero_shot", detail::to_json(rep.zero_shot_mean)},
            {"fine_tuned", detail::to_json(rep.fine_tuned_mean)},
            {"conflict_fraction", detail::num(rep.conflict_fraction_mean)}}}};
}

namespace detail {

// Writes via a temporary file and rename, so a reader never sees a partial
// file.
inline void write_file_atomic(const std::filesystem::path& p, const std::string& content) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw Error("cannot write " + tmp);
    os << content;
  }
  std::filesystem::rename(tmp, p);
}

template <typename F>
std::string render(F&& f) {
  std::ostringstream os;
  f(os);
  return os.str();
}

}  // namespace detail

// report.json plus per-seed training logs, conflict samples and
// reliability diagrams under cfg.output_dir.
inline void write_report(const ExperimentReport& rep, const std::filesystem::path& dir) {
  detail::write_file_atomic(dir / "report.json", to_json(rep).dump(2) + "\n");
  const int g = rep.config.binning.num_conf_bins;
  for (const auto& r : rep.runs) {
    const auto sd = dir / ("seed_" + std::to_string(r.seed));
    detail::write_file_atomic(sd / "train_log.jsonl", detail::render([&](std::ostream& os) { write_log_jsonl(os, r.log); }));
    detail::write_file_atomic(sd / "conflicts.csv",
                              detail::render([&](std::ostream& os) { write_conflicts_csv(os, r.conflicts); }));
    const std::pair<const char*, const Evaluation*> evs[] = {
        {"zero_shot_base", &r.zs_base}, {"zero_shot_new", &r.zs_new}, {"fine_tuned_base", &r.ft_base}, {"fine_tuned_new", &r.ft_new}};
    for (const auto& [name, ev] : evs) {
      const auto bins = reliability_diagram(ev->records, g);
      detail::write_file_atomic(sd / (std::string("reliability_") + name + ".csv"),
                                detail::render([&](std::ostream& os) { write_reliability_csv(os, bins); }));
    }
  }
}

// ---------------------------------------------------------------------------
// Ablation grids

// Short names for the common grid axes; anything else is a dotted config key.
inline std::string ablation_key(const std::string& param) {
  static const std::map<std::string, std::string> aliases = {
      {"lambda", "train.lambda"},        {"K", "selection.top_k"},
      {"M", "fd.neighbors"},             {"mode", "selection.mode"},
      {"interval", "train.outlier_update_interval"}, {"distance", "fd.distance"},
      {"objective", "train.objective"}};
  auto it = aliases.find(param);
  return it == aliases.end() ? param : it->second;
}

struct AblationRow {
  std::string param;
  json value;
  ExperimentReport report;
};

inline std::vector<AblationRow> run_ablation(const json& base_file, const std::string& param,
                                             const std::vector<json>& values,
                                             const std::vector<std::pair<std::string, json>>& overrides = {}) {
  require(!values.empty(), "ablation grid must be non-empty");
  const auto key = ablation_key(param);
  std::vector<AblationRow> rows;
  for (const auto& v : values) {
    auto ov = overrides;
    ov.emplace_back(key, v);
    // Oracle pools need their flag; asking for the mode in a grid is the ask.
    if (key == "selection.mode" && v == "oracle") ov.emplace_back("selection.allow_oracle", true);
    ExperimentConfig cfg;
    try {
      cfg = resolve_config(base_file, ov);
    } catch (const ValidationError& e) {
      throw ValidationError("invalid grid value " + v.dump() + " for '" + param + "': " + e.what());
    }
    rows.push_back({param, v, run_base_to_new(cfg)});
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows) {
  os << "param,value,objective,model,split,accuracy,confidence,ece,ace,mce,piece,fd,fd_all,ece_hm,ece_am,"
        "conflict_fraction\n";
  for (const auto& row : rows) {
    const auto& rep = row.report;
    const std::string value = row.value.is_string() ? row.value.get<std::string>() : row.value.dump();
    const std::pair<const char*, const ModelMetrics*> models[] = {{"zero_shot", &rep.zero_shot_mean},
                                                                  {"fine_tuned", &rep.fine_tuned_mean}};
    for (const auto& [mname, mm] : models) {
      const std::pair<const char*, const SplitMetrics*> splits[] = {{"base", &mm->base}, {"new", &mm->novel}};
      const double hm = (mm->base.ece > 0.0 && mm->novel.ece > 0.0) ? harmonic_mean(mm->base.ece, mm->novel.ece)
                                                                    : std::numeric_limits<double>::quiet_NaN();
      for (const auto& [sname, sm] : splits) {
        os << row.param << ',' << value << ',' << to_string(rep.config.train.objective) << ',' << mname << ','
           << sname << ',' << format_double(sm->accuracy) << ',' << format_double(sm->confidence) << ','
           << format_double(sm->ece) << ',' << format_double(sm->ace) << ',' << format_double(sm->mce) << ','
           << format_double(sm->piece) << ',' << format_double(sm->fd) << ',' << format_double(mm->fd_all) << ','
           << format_double(hm) << ',' << format_double(arithmetic_mean(mm->base.ece, mm->novel.ece)) << ','
           << format_double(rep.conflict_fraction_mean) << '\n';
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Diagnostics

struct DiagnosticsOptions {
  std::vector<int> fd_neighbors{1, 2, 3, 5, 10};
  std::vector<double> lambdas{0.0, 2.0, 4.0, 8.0};
  int histogram_bins = 10;
};

// Plot-ready CSVs for the first repeat seed: FD per (model, split, M), FD
// and confidence against λ for both regularizers, confidence histograms,
// logit gaps and per-item probability/logit dumps.
inline std::vector<std::filesystem::path> emit_diagnostics(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                                           const DiagnosticsOptions& opts = {}) {
  cfg.validate();
  const auto seed = cfg.repeat_seeds.front();
  const auto rc = cfg.for_seed(seed);
  const World w = build_world(rc);
  OutlierPool pool = build_pool(w, rc.selection);

  auto trained_ctx = [&](Objective obj, double lambda) {
    TrainConfig tc = rc.train;
    tc.objective = obj;
    tc.lambda = lambda;
    tc.probe_conflict = false;
    TrainingTask task;
    task.data = &w.train;
    task.split = w.split;
    task.class_tokens = w.class_tokens;
    task.pool = &pool;
    task.pool_tokens = pool_tokens(w, pool);
    task.fd = rc.fd;
    return train(tc, w.model, task).model.context();
  };

  const PromptContext zs = w.model.template_context();
  const PromptContext ft = trained_ctx(rc.train.objective, rc.train.lambda);
  const std::pair<const char*, const PromptContext*> models[] = {{"zero_shot", &zs}, {"fine_tuned", &ft}};
  const std::pair<const char*, const std::vector<int>*> splits[] = {{"base", &w.split.base}, {"new", &w.split.novel}};

  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& body) {
    detail::write_file_atomic(dir / name, body);
    written.push_back(dir / name);
  };

  std::ostringstream fd, hist, gap, probs;
  fd << "model,split,M,distance,fd\n";
  hist << "model,split,lo,hi,count\n";
  gap << "model,split,mean_max_logit,mean_other_logit,gap\n";
  probs << "model,split,item,truth,predicted,max_prob,max_logit\n";
  for (const auto& [mname, ctx] : models) {
    for (const auto& [sname, cls] : splits) {
      const auto tok = tokens_for(*cls, w.class_tokens);
      const MatrixXd text = w.model.text_features_with(*ctx, tok);
      for (int m : opts.fd_neighbors) {
        if (m >= text.rows()) continue;
        FDConfig c = rc.fd;
        c.neighbors = m;
        fd << mname << ',' << sname << ',' << m << ',' << to_string(c.distance) << ','
           << format_double(fd_score(text, c).overall) << '\n';
      }
      const auto ev = evaluate(w.model, *ctx, w.eval, *cls, tok);
      for (const auto& b : reliability_diagram(ev.records, opts.histogram_bins)) {
        hist << mname << ',' << sname << ',' << format_double(b.lo) << ',' << format_double(b.hi) << ',' << b.count << '\n';
      }
      if (cls->size() >= 2) {
        const auto g = logit_gap(ev.logits);
        gap << mname << ',' << sname << ',' << format_double(g.mean_max) << ',' << format_double(g.mean_rest) << ','
            << format_double(g.gap()) << '\n';
      }
      for (std::size_t i = 0; i < ev.records.size(); ++i) {
        const auto& r = ev.records[i];
        probs << mname << ',' << sname << ',' << r.id << ',' << r.truth << ',' << r.predicted << ','
              << format_double(r.confidence) << ','
              << format_double(*std::max_element(ev.logits[i].begin(), ev.logits[i].end())) << '\n';
      }
    }
  }
  emit("fd.csv", fd.str());
  emit("confidence_histogram.csv", hist.str());
  emit("logit_gap.csv", gap.str());
  emit("probabilities.csv", probs.str());

  std::ostringstream sweep;
  sweep << "objective,lambda,split,fd,confidence,accuracy,ece\n";
  for (Objective obj : {Objective::kAnchorReg, Objective::kDor}) {
    for (double lam : opts.lambdas) {
      const PromptContext ctx = trained_ctx(obj, lam);
      for (const auto& [sname, cls] : splits) {
        const auto tok = tokens_for(*cls, w.class_tokens);
        const auto ev = evaluate(w.model, ctx, w.eval, *cls, tok);
        sweep << to_string(obj) << ',' << format_double(lam) << ',' << sname << ','
              << format_double(detail::fd_of(w.model.text_features_with(ctx, tok), rc.fd)) << ','
              << format_double(mean_confidence(ev.records)) << ',' << format_double(accuracy(ev.records)) << ','
              << format_double(compute_ece(ev.records, rc.binning.num_conf_bins)) << '\n';
      }
    }
  }
  emit("fd_vs_lambda.csv", sweep.str());
  return written;
}

}  // namespace dorlab
