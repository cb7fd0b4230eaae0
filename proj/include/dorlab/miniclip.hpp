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

// A small differentiable stand-in for a prompt-tuned contrastive
// vision-language classifier.
//
// Image features are fixed unit vectors. A text feature is produced from a
// prompt [v_1, ..., v_M, c] of M shared context tokens and one class (or
// word) token c by
//
//   x = mean(v_1, ..., v_M, c)
//   y = W2 · tanh(W1 · x)
//   ψ = y / |y|
//
// with W1 and W2 frozen. Logits are τ · cos(image, ψ). Only the context
// tokens are trainable, and gradients with respect to them are computed
// analytically by the backward helpers below.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "dorlab/common.hpp"

namespace dorlab {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ModelDims {
  int token_dim = 64;
  int hidden_dim = 64;
  int feature_dim = 16;
};

struct ModelConfig {
  double tau = 100.0;
  int context_length = 16;
  ModelDims dims;
  // Encoder weights, template context and learnable-context initialization
  // each come from their own seed.
  std::uint64_t weight_seed = 11;
  std::uint64_t template_seed = 12;
  std::uint64_t context_seed = 13;
  double context_init_std = 0.02;

  void validate() const {
    require(tau > 0.0, "tau must be positive");
    require(context_length >= 1, "context length must be at least 1");
    require(dims.token_dim >= 1 && dims.hidden_dim >= 1 && dims.feature_dim >= 1,
            "model dims must be positive");
    require(context_init_std >= 0.0, "context init std must be non-negative");
  }
};

// Frozen two-layer text encoder.
struct TextEncoderWeights {
  MatrixXd w1;  // hidden x token
  MatrixXd w2;  // feature x hidden
  std::uint64_t seed = 0;

  static TextEncoderWeights random(const ModelDims& dims, std::uint64_t seed) {
    auto rng = make_rng(seed, 0x656e63ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    TextEncoderWeights w;
    w.seed = seed;
    w.w1.resize(dims.hidden_dim, dims.token_dim);
    w.w2.resize(dims.feature_dim, dims.hidden_dim);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(dims.token_dim));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(dims.hidden_dim));
    for (Eigen::Index i = 0; i < w.w1.size(); ++i) w.w1.data()[i] = s1 * normal(rng);
    for (Eigen::Index i = 0; i < w.w2.size(); ++i) w.w2.data()[i] = s2 * normal(rng);
    return w;
  }

  int token_dim() const { return static_cast<int>(w1.cols()); }
  int hidden_dim() const { return static_cast<int>(w1.rows()); }
  int feature_dim() const { return static_cast<int>(w2.rows()); }
};

// M context tokens, one per row.
struct PromptContext {
  MatrixXd tokens;
  bool learnable = true;

  // Learnable and frozen contexts draw from different streams, so equal
  // seeds still give different token matrices.
  static PromptContext random(int length, int token_dim, double stddev, std::uint64_t seed,
                              bool learnable) {
    auto rng = make_rng(seed, learnable ? 0x637478ULL : 0x746d706cULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    PromptContext c;
    c.learnable = learnable;
    c.tokens.resize(length, token_dim);
    for (Eigen::Index i = 0; i < c.tokens.size(); ++i) c.tokens.data()[i] = stddev * normal(rng);
    return c;
  }

  int length() const { return static_cast<int>(tokens.rows()); }
  VectorXd sum() const { return tokens.colwise().sum().transpose(); }
};

// Token embedding per class name or vocabulary word.
class ClassTokenTable {
 public:
  ClassTokenTable() = default;
  ClassTokenTable(std::vector<std::string> names, MatrixXd tokens)
      : names_(std::move(names)), tokens_(std::move(tokens)) {
    require(static_cast<Eigen::Index>(names_.size()) == tokens_.rows(), "one token row per name");
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (!index_.emplace(names_[i], i).second) throw ValidationError("duplicate token '" + names_[i] + "'");
    }
  }

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const MatrixXd& tokens() const { return tokens_; }
  VectorXd token(std::size_t i) const { return tokens_.row(static_cast<Eigen::Index>(i)).transpose(); }

  std::optional<std::size_t> index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t require_index(const std::string& name) const {
    auto i = index_of(name);
    if (!i) throw ValidationError("no token for '" + name + "'");
    return *i;
  }

 private:
  std::vector<std::string> names_;
  MatrixXd tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Forward-pass intermediates of one text feature, kept for backprop.
struct EncodeCache {
  VectorXd hidden;  // tanh(W1 x)
  VectorXd pre_norm;
  double norm = 0.0;
  VectorXd feature;
};

// Encodes one prompt given the sum of its context tokens.
inline EncodeCache encode_text_cached(const VectorXd& context_sum, int context_length,
                                      const VectorXd& class_token, const TextEncoderWeights& w) {
  if (context_sum.size() != w.token_dim() || class_token.size() != w.token_dim()) {
    throw ValidationError("token dimension does not match the encoder");
  }
  const VectorXd pooled = (context_sum + class_token) / static_cast<double>(context_length + 1);
  EncodeCache c;
  c.hidden = (w.w1 * pooled).array().tanh().matrix();
  c.pre_norm = w.w2 * c.hidden;
  c.norm = c.pre_norm.norm();
  if (!(c.norm > 0.0) || !std::isfinite(c.norm)) {
    throw NumericalError("text encoder produced a zero or non-finite feature before normalization");
  }
  c.feature = c.pre_norm / c.norm;
  return c;
}

inline VectorXd encode_text(const PromptContext& ctx, const VectorXd& class_token,
                            const TextEncoderWeights& w) {
  if (ctx.tokens.cols() != w.token_dim()) throw ValidationError("context token dim does not match the encoder");
  return encode_text_cached(ctx.sum(), ctx.length(), class_token, w).feature;
}

// Backpropagates dL/dψ through normalize → W2 → tanh → W1 → mean-pool and
// returns dL/dx for the pooled input. Every context token receives
// dL/dx / (M + 1).
inline VectorXd backprop_to_pooled(const EncodeCache& c, const TextEncoderWeights& w,
                                   const VectorXd& grad_feature) {
  const VectorXd grad_pre = (grad_feature - c.feature * c.feature.dot(grad_feature)) / c.norm;
  const VectorXd grad_hidden = w.w2.transpose() * grad_pre;
  const VectorXd grad_z = grad_hidden.array() * (1.0 - c.hidden.array().square());
  return w.w1.transpose() * grad_z;
}

// Logits τ · cos(image, text_c) for each row of `text_features`. Both sides
// are expected to be unit vectors, so the cosine is a dot product.
inline VectorXd logits(const VectorXd& image_feature, const MatrixXd& text_features, double tau) {
  if (image_feature.size() != text_features.cols()) {
    throw ValidationError("image feature dim " + std::to_string(image_feature.size()) +
                          " does not match text feature dim " + std::to_string(text_features.cols()));
  }
  return tau * (text_features * image_feature);
}

inline std::vector<double> softmax(std::span<const double> logits) {
  require(!logits.empty(), "softmax of no logits");
  double top = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (!std::isfinite(l)) throw NumericalError("non-finite logit");
    top = std::max(top, l);
  }
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

struct Prediction {
  std::vector<double> probs;
  int predicted = 0;
  double confidence = 0.0;
};

inline Prediction predict(std::span<const double> logits) {
  Prediction out;
  out.probs = softmax(logits);
  out.predicted = static_cast<int>(std::max_element(out.probs.begin(), out.probs.end()) - out.probs.begin());
  out.confidence = out.probs[static_cast<std::size_t>(out.predicted)];
  return out;
}

inline Prediction predict(const VectorXd& logits) {
  return predict(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())));
}

// ---------------------------------------------------------------------------
// Token fitting: choose word tokens whose zero-shot text features hit given
// target directions. Used to build the synthetic world and to place exported
// real embeddings into the surrogate.

struct TokenFitOptions {
  // The first `shared_hidden` hidden units take the same activation for every
  // word; they carry the component all text features have in common.
  int shared_hidden = 16;
  // Target length of the word-specific part of y relative to the shared part.
  double specific_scale = 0.1;
  // Hidden activations are initialized uniformly in (-spread, spread) and
  // then projected onto the target subject to |a| <= activation_limit.
  double activation_spread = 0.9;
  // Fraction of word-specific units started near saturation (±saturation)
  // instead; saturated units pass little gradient for that word.
  double saturated_fraction = 0.0;
  double saturation = 0.95;
  double activation_limit = 0.98;
  int max_projection_steps = 2000;
  int max_attempts = 6;
};

struct TokenFitResult {
  MatrixXd tokens;
  // Unit direction of the shared component in feature space.
  VectorXd shared_direction;
};

namespace detail {

inline MatrixXd pseudo_inverse(const MatrixXd& m) {
  Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(m);
  return cod.pseudoInverse();
}

}  // namespace detail

// For each target row q (feature space), finds hidden activations
//   a = [shared ; specific]  with  W2 a = W2_shared · shared + s·|W2_shared · shared| · q
// and inverts tanh and W1 (least squares) to recover a word token relative to
// the given template context. Throws if the box constraint cannot be met.
inline TokenFitResult fit_word_tokens(const TextEncoderWeights& w, const PromptContext& template_ctx,
                                      const MatrixXd& targets, const TokenFitOptions& opts,
                                      std::uint64_t seed) {
  const int h = w.hidden_dim();
  const int hs = opts.shared_hidden;
  require(hs >= 0 && hs < h, "shared hidden units must leave room for word-specific ones");
  require(targets.cols() == w.feature_dim(), "target dim does not match the encoder");
  require(opts.activation_limit > 0.0 && opts.activation_limit < 1.0, "activation limit must be in (0, 1)");
  auto rng = make_rng(seed, 0x666974ULL);
  std::uniform_real_distribution<double> uni(-opts.activation_spread, opts.activation_spread);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  VectorXd shared(hs);
  for (int i = 0; i < hs; ++i) shared(i) = uni(rng);
  const MatrixXd w2_shared = w.w2.leftCols(hs);
  const MatrixXd w2_specific = w.w2.rightCols(h - hs);
  const VectorXd common = hs > 0 ? VectorXd(w2_shared * shared) : VectorXd::Zero(w.feature_dim());
  const double common_norm = common.norm();
  const double scale = opts.specific_scale * (common_norm > 0.0 ? common_norm : 1.0);

  const MatrixXd w2s_pinv = detail::pseudo_inverse(w2_specific);
  const MatrixXd w1_pinv = detail::pseudo_inverse(w.w1);
  const VectorXd template_sum = template_ctx.sum();
  const double pool = static_cast<double>(template_ctx.length() + 1);

  TokenFitResult out;
  out.shared_direction = common_norm > 0.0 ? VectorXd(common / common_norm) : VectorXd::Zero(w.feature_dim());
  out.tokens.resize(targets.rows(), w.token_dim());
  for (Eigen::Index r = 0; r < targets.rows(); ++r) {
    const VectorXd goal = scale * targets.row(r).transpose().normalized();
    VectorXd a(h - hs);
    bool ok = false;
    // Alternating projections between the affine target set and the box.
    // A start that stalls is redrawn with fewer saturated units.
    for (int attempt = 0; attempt < opts.max_attempts && !ok; ++attempt) {
      const double sat = opts.saturated_fraction / static_cast<double>(1 << attempt);
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        a(i) = uni(rng);
        if (unit(rng) < sat) a(i) = a(i) < 0.0 ? -opts.saturation : opts.saturation;
      }
      for (int step = 0; step < opts.max_projection_steps; ++step) {
        a += w2s_pinv * (goal - w2_specific * a);
        if (a.cwiseAbs().maxCoeff() <= opts.activation_limit) {
          ok = true;
          break;
        }
        a = a.cwiseMax(-opts.activation_limit).cwiseMin(opts.activation_limit);
      }
    }
    if (!ok) throw NumericalError("could not fit a word token inside the activation box");
    VectorXd act(h);
    act << shared, a;
    const VectorXd z = act.array().atanh().matrix();
    const VectorXd pooled = w1_pinv * z;
    out.tokens.row(r) = (pool * pooled - template_sum).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------

// The full surrogate: frozen encoder, token table, frozen template context
// (the zero-shot prompt) and the learnable context.
class PromptModel {
 public:
  PromptModel() = default;
  PromptModel(ModelConfig cfg, std::shared_ptr<const TextEncoderWeights> weights, ClassTokenTable tokens,
              PromptContext template_ctx, PromptContext ctx)
      : cfg_(cfg),
        weights_(std::move(weights)),
        tokens_(std::move(tokens)),
        template_(std::move(template_ctx)),
        ctx_(std::move(ctx)) {
    cfg_.validate();
    require(weights_ != nullptr, "model needs encoder weights");
    require(template_.tokens.rows() == ctx_.tokens.rows() && template_.tokens.cols() == ctx_.tokens.cols(),
            "template and learnable context shapes differ");
    require(tokens_.tokens().cols() == weights_->token_dim(), "token table dim does not match the encoder");
    template_.learnable = false;
    // The zero-shot features never change: cache them once.
    const VectorXd tsum = template_.sum();
    zero_shot_.resize(static_cast<Eigen::Index>(tokens_.size()), weights_->feature_dim());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      zero_shot_.row(static_cast<Eigen::Index>(i)) =
          encode_text_cached(tsum, template_.length(), tokens_.token(i), *weights_).feature.transpose();
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const TextEncoderWeights& weights() const { return *weights_; }
  std::shared_ptr<const TextEncoderWeights> weights_ptr() const { return weights_; }
  const ClassTokenTable& tokens() const { return tokens_; }
  const PromptContext& template_context() const { return template_; }
  const PromptContext& context() const { return ctx_; }
  PromptContext& mutable_context() { return ctx_; }
  double tau() const { return cfg_.tau; }

  // Zero-shot feature of token i (template prompt).
  VectorXd zero_shot_feature(std::size_t i) const {
    return zero_shot_.row(static_cast<Eigen::Index>(i)).transpose();
  }
  MatrixXd zero_shot_features(std::span<const std::size_t> idx) const {
    MatrixXd out(static_cast<Eigen::Index>(idx.size()), zero_shot_.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.row(static_cast<Eigen::Index>(k)) = zero_shot_.row(static_cast<Eigen::Index>(idx[k]));
    }
    return out;
  }

  std::vector<EncodeCache> forward(std::span<const std::size_t> idx) const {
    return forward_with(ctx_, idx);
  }

  std::vector<EncodeCache> forward_with(const PromptContext& ctx, std::span<const std::size_t> idx) const {
    const VectorXd csum = ctx.sum();
    std::vector<EncodeCache> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(encode_text_cached(csum, ctx.length(), tokens_.token(i), *weights_));
    return out;
  }

  // Learned text features (one row per index).
  MatrixXd text_features(std::span<const std::size_t> idx) const { return stack(forward(idx)); }

  // Features under an arbitrary context; the template gives zero-shot ones.
  MatrixXd text_features_with(const PromptContext& ctx, std::span<const std::size_t> idx) const {
    return stack(forward_with(ctx, idx));
  }

  static MatrixXd stack(const std::vector<EncodeCache>& caches) {
    if (caches.empty()) return {};
    MatrixXd out(static_cast<Eigen::Index>(caches.size()), caches.front().feature.size());
    for (std::size_t k = 0; k < caches.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = caches[k].feature.transpose();
    return out;
  }

  // Turns per-feature gradients into a gradient for the context matrix.
  MatrixXd context_gradient(const std::vector<EncodeCache>& caches, const MatrixXd& grad_features) const {
    VectorXd pooled = VectorXd::Zero(weights_->token_dim());
    for (std::size_t k = 0; k < caches.size(); ++k) {
      pooled += backprop_to_pooled(caches[k], *weights_, grad_features.row(static_cast<Eigen::Index>(k)).transpose());
    }
    const VectorXd per_token = pooled / static_cast<double>(ctx_.length() + 1);
    return per_token.transpose().replicate(ctx_.length(), 1);
  }

 private:
  ModelConfig cfg_;
  std::shared_ptr<const TextEncoderWeights> weights_;
  ClassTokenTable tokens_;
  PromptContext template_;
  PromptContext ctx_;
  MatrixXd zero_shot_;
};

}  // namespace dorlab
