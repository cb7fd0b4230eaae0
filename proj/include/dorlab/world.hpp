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

// Builds a complete surrogate task: image features, a frozen encoder, class
// and vocabulary tokens whose zero-shot text features point near the image
// prototypes, and the candidate vocabulary for outlier selection.
//
// Zero-shot text features have the form normalize(m + s·q_w): a component m
// shared by every word plus a small word-specific direction q_w. For a class,
// q_w is its image prototype perturbed by `misalignment`; for a vocabulary
// word it is a random mixture of base-class prototypes plus noise. The size
// of s sets how confident the zero-shot classifier is.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dorlab/common.hpp"
#include "dorlab/embedding_store.hpp"
#include "dorlab/miniclip.hpp"
#include "dorlab/outlier_pool.hpp"

namespace dorlab {

struct TextWorldSpec {
  double misalignment = 0.4;
  int vocabulary_size = 8000;
  // Each word's noise scale is uniform in [0, vocabulary_perturbation].
  double vocabulary_perturbation = 2.0;
  // Mixture weights are u^sharpness for u ~ U(0, 1), so larger values make
  // each word lean on fewer base classes.
  double mixture_sharpness = 3.0;
  // Extra vocabulary entries that spell a class name differently
  // ("Class 03" for "class_03"); exclusion must remove them.
  int name_collisions = 4;
  TokenFitOptions fit;
};

struct WorldSpec {
  SyntheticSpec data;
  int eval_per_class = 200;
  double split_fraction = 0.5;
  std::uint64_t split_seed = 1;
  ModelConfig model;
  TextWorldSpec text;

  void validate() const {
    require(eval_per_class >= 1, "eval_per_class must be positive");
    require(text.misalignment >= 0.0, "misalignment must be non-negative");
    require(text.vocabulary_size >= 0, "vocabulary size must be non-negative");
    require(text.name_collisions >= 0, "name_collisions must be non-negative");
    model.validate();
    require(model.dims.feature_dim == data.dim, "model feature dim must equal the image feature dim");
  }
};

struct World {
  LabeledDataset train;
  LabeledDataset eval;
  ClassSplit split;
  EmbeddingSet prototypes;
  PromptModel model;
  CandidateVocabulary vocab;
  // Token-table index of class c is class_tokens[c]; vocabulary word i is
  // at vocab_offset + i.
  std::vector<std::size_t> class_tokens;
  std::size_t vocab_offset = 0;

  // Zero-shot text features of the given classes as an embedding set.
  EmbeddingSet class_features(std::span<const int> classes) const {
    std::vector<std::string> names;
    std::vector<std::vector<double>> rows;
    for (int c : classes) {
      names.push_back(train.classes.at(static_cast<std::size_t>(c)));
      const VectorXd f = model.zero_shot_feature(class_tokens.at(static_cast<std::size_t>(c)));
      rows.emplace_back(f.data(), f.data() + f.size());
    }
    return EmbeddingSet::from_rows(static_cast<std::size_t>(model.weights().feature_dim()), names, rows);
  }

  std::vector<std::string> class_names(std::span<const int> classes) const {
    std::vector<std::string> out;
    for (int c : classes) out.push_back(train.classes.at(static_cast<std::size_t>(c)));
    return out;
  }
};

inline std::string vocabulary_word(int i) {
  std::string s = std::to_string(i);
  return "word_" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

// Spelling variant of a synthetic class name: "class_03" -> "Class 03".
inline std::string collision_name(const std::string& class_name) {
  std::string out = class_name;
  for (auto& ch : out) {
    if (ch == '_') ch = ' ';
  }
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

// Builds the table of class and vocabulary tokens and wraps it into a
// model whose learnable context starts from its own seeded draw.
inline PromptModel make_model(const ModelConfig& cfg, std::shared_ptr<const TextEncoderWeights> weights,
                              ClassTokenTable tokens) {
  const int m = cfg.context_length;
  const int dt = cfg.dims.token_dim;
  auto tmpl = PromptContext::random(m, dt, cfg.context_init_std, cfg.template_seed, false);
  auto ctx = PromptContext::random(m, dt, cfg.context_init_std, cfg.context_seed, true);
  return PromptModel(cfg, std::move(weights), std::move(tokens), std::move(tmpl), std::move(ctx));
}

inline World build_synthetic_world(const WorldSpec& spec) {
  spec.validate();
  World w;
  w.prototypes = synthetic_prototypes(spec.data);
  w.train = generate_synthetic(spec.data);
  w.eval = generate_synthetic_eval(spec.data, spec.eval_per_class);
  w.split = split_classes(w.train, spec.split_fraction, spec.split_seed);

  const int c = spec.data.num_classes;
  const int d = spec.data.dim;
  auto rng = make_rng(spec.data.seed, 0x74657874ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  Eigen::MatrixXd protos(c, d);
  for (int i = 0; i < c; ++i) {
    auto r = w.prototypes.row(static_cast<std::size_t>(i));
    for (int j = 0; j < d; ++j) protos(i, j) = r[static_cast<std::size_t>(j)];
  }

  const int nv = spec.text.vocabulary_size;
  const int nc = std::min(spec.text.name_collisions, c);
  Eigen::MatrixXd targets(c + nv + nc, d);
  for (int i = 0; i < c; ++i) {
    Eigen::RowVectorXd q = protos.row(i);
    for (int j = 0; j < d; ++j) q(j) += spec.text.misalignment * inv_sqrt_d * normal(rng);
    targets.row(i) = q.normalized();
  }
  const auto& base = w.split.base;
  for (int v = 0; v < nv; ++v) {
    Eigen::RowVectorXd mix = Eigen::RowVectorXd::Zero(d);
    double total = 0.0;
    for (int b : base) {
      const double wt = std::pow(uni(rng), spec.text.mixture_sharpness);
      mix += wt * protos.row(b);
      total += wt;
    }
    if (total > 0.0) mix /= total;
    if (mix.norm() > 0.0) mix.normalize();
    const double pert = spec.text.vocabulary_perturbation * uni(rng);
    for (int j = 0; j < d; ++j) mix(j) += pert * inv_sqrt_d * normal(rng);
    targets.row(c + v) = mix.normalized();
  }
  // Colliding spellings sit exactly on their class's text direction.
  for (int k = 0; k < nc; ++k) targets.row(c + nv + k) = targets.row(k);

  auto weights = std::make_shared<const TextEncoderWeights>(
      TextEncoderWeights::random(spec.model.dims, spec.model.weight_seed));
  const auto tmpl = PromptContext::random(spec.model.context_length, spec.model.dims.token_dim,
                                          spec.model.context_init_std, spec.model.template_seed, false);
  const auto fit = fit_word_tokens(*weights, tmpl, targets, spec.text.fit, spec.data.seed);

  std::vector<std::string> names = w.train.classes;
  for (int v = 0; v < nv; ++v) names.push_back(vocabulary_word(v));
  for (int k = 0; k < nc; ++k) names.push_back(collision_name(w.train.classes[static_cast<std::size_t>(k)]));
  w.model = make_model(spec.model, weights, ClassTokenTable(names, fit.tokens));

  for (int i = 0; i < c; ++i) w.class_tokens.push_back(static_cast<std::size_t>(i));
  w.vocab_offset = static_cast<std::size_t>(c);

  std::vector<std::string> words;
  std::vector<std::vector<double>> rows;
  for (int k = 0; k < nv + nc; ++k) {
    const auto t = static_cast<std::size_t>(c + k);
    words.push_back(names[t]);
    const VectorXd f = w.model.zero_shot_feature(t);
    rows.emplace_back(f.data(), f.data() + f.size());
  }
  if (!words.empty()) {
    w.vocab = CandidateVocabulary(EmbeddingSet::from_rows(static_cast<std::size_t>(d), words, rows));
  }
  return w;
}

// A world from exported embeddings: image features for training and
// evaluation, one text feature per class (ids = class names) and a noun
// vocabulary. Tokens are fitted with no shared hidden units, so each zero-shot
// text feature reproduces its exported direction.
inline World build_embedding_world(LabeledDataset train, LabeledDataset eval, const EmbeddingSet& class_texts,
                                   const EmbeddingSet& nouns, const ModelConfig& model_cfg, TokenFitOptions fit,
                                   double split_fraction, std::uint64_t split_seed) {
  model_cfg.validate();
  train.validate();
  eval.validate();
  require(train.classes == eval.classes, "training and evaluation sets must list the same classes");
  const auto d = class_texts.dim();
  require(train.features.dim() == d && eval.features.dim() == d && (nouns.empty() || nouns.dim() == d),
          "image, class-text and noun features must share one dimension");
  require(static_cast<std::size_t>(model_cfg.dims.feature_dim) == d, "model feature dim must match the embeddings");
  fit.shared_hidden = 0;

  World w;
  w.train = std::move(train);
  w.eval = std::move(eval);
  w.split = split_classes(w.train, split_fraction, split_seed);
  const auto c = w.train.num_classes();
  Eigen::MatrixXd targets(static_cast<Eigen::Index>(c + nouns.size()), static_cast<Eigen::Index>(d));
  std::vector<std::string> names = w.train.classes;
  for (std::size_t i = 0; i < c; ++i) {
    auto idx = class_texts.index_of(w.train.classes[i]);
    if (!idx) throw ValidationError("no class-text feature for class '" + w.train.classes[i] + "'");
    auto r = class_texts.row(*idx);
    for (std::size_t j = 0; j < d; ++j) targets(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r[j];
  }
  for (std::size_t k = 0; k < nouns.size(); ++k) {
    auto r = nouns.row(k);
    for (std::size_t j = 0; j < d; ++j) targets(static_cast<Eigen::Index>(c + k), static_cast<Eigen::Index>(j)) = r[j];
    names.push_back(nouns.id(k));
  }
  auto weights = std::make_shared<const TextEncoderWeights>(
      TextEncoderWeights::random(model_cfg.dims, model_cfg.weight_seed));
  const auto tmpl = PromptContext::random(model_cfg.context_length, model_cfg.dims.token_dim,
                                          model_cfg.context_init_std, model_cfg.template_seed, false);
  const auto tokens = fit_word_tokens(*weights, tmpl, targets, fit, model_cfg.weight_seed).tokens;
  w.model = make_model(model_cfg, weights, ClassTokenTable(names, tokens));
  for (std::size_t i = 0; i < c; ++i) w.class_tokens.push_back(i);
  w.vocab_offset = c;

  std::vector<std::string> words;
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < nouns.size(); ++k) {
    words.push_back(nouns.id(k));
    const VectorXd f = w.model.zero_shot_feature(c + k);
    rows.emplace_back(f.data(), f.data() + f.size());
  }
  if (!words.empty()) w.vocab = CandidateVocabulary(EmbeddingSet::from_rows(d, words, rows));
  return w;
}

}  // namespace dorlab
