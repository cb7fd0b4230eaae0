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

// Model checkpoints: a JSON header plus one raw embedding pair per matrix
// (encoder weights, token table, template and learned context). Matrices are
// stored as float32, so a reloaded model matches the saved one to float32
// precision, not bit for bit.

#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "dorlab/common.hpp"
#include "dorlab/embedding_store.hpp"
#include "dorlab/miniclip.hpp"

namespace dorlab {

namespace detail {

inline EmbeddingSet matrix_to_set(const MatrixXd& m, std::vector<std::string> ids) {
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(static_cast<float>(m(i, j)));
  return EmbeddingSet(static_cast<std::size_t>(m.cols()), std::move(ids), std::move(data), false);
}

inline std::vector<std::string> numbered(const std::string& stem, Eigen::Index n) {
  std::vector<std::string> ids;
  for (Eigen::Index i = 0; i < n; ++i) ids.push_back(stem + std::to_string(i));
  return ids;
}

inline MatrixXd set_to_matrix(const EmbeddingSet& s) {
  MatrixXd m(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(s.dim()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto r = s.row(i);
    for (std::size_t j = 0; j < s.dim(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r[j];
  }
  return m;
}

}  // namespace detail

// Writes <prefix>.checkpoint.json and <prefix>.{w1,w2,tokens,template,context}.
inline void save_checkpoint(const PromptModel& model, const std::filesystem::path& prefix) {
  const auto& cfg = model.config();
  const auto& w = model.weights();
  const std::string p = prefix.string();
  save_embedding_set(detail::matrix_to_set(w.w1, detail::numbered("h", w.w1.rows())), p + ".w1");
  save_embedding_set(detail::matrix_to_set(w.w2, detail::numbered("f", w.w2.rows())), p + ".w2");
  save_embedding_set(detail::matrix_to_set(model.tokens().tokens(), model.tokens().names()), p + ".tokens");
  const auto& t = model.template_context().tokens;
  const auto& c = model.context().tokens;
  save_embedding_set(detail::matrix_to_set(t, detail::numbered("v", t.rows())), p + ".template");
  save_embedding_set(detail::matrix_to_set(c, detail::numbered("v", c.rows())), p + ".context");
  const nlohmann::json header = {
      {"tau", cfg.tau},
      {"context_length", cfg.context_length},
      {"dims", {{"token", cfg.dims.token_dim}, {"hidden", cfg.dims.hidden_dim}, {"feature", cfg.dims.feature_dim}}},
      {"seeds", {{"weight", cfg.weight_seed}, {"template", cfg.template_seed}, {"context", cfg.context_seed}}},
      {"context_init_std", cfg.context_init_std}};
  std::ofstream os(p + ".checkpoint.json");
  if (!os) throw Error("cannot write " + p + ".checkpoint.json");
  os << header.dump(2) << '\n';
}

inline PromptModel load_checkpoint(const std::filesystem::path& prefix) {
  const std::string p = prefix.string();
  const std::filesystem::path header_path = p + ".checkpoint.json";
  if (!std::filesystem::exists(header_path)) throw MissingFileError("missing checkpoint " + header_path.string());
  nlohmann::json h;
  ModelConfig cfg;
  try {
    std::ifstream is(header_path);
    h = nlohmann::json::parse(is);
    cfg.tau = h.at("tau").get<double>();
    cfg.context_length = h.at("context_length").get<int>();
    cfg.dims.token_dim = h.at("dims").at("token").get<int>();
    cfg.dims.hidden_dim = h.at("dims").at("hidden").get<int>();
    cfg.dims.feature_dim = h.at("dims").at("feature").get<int>();
    cfg.weight_seed = h.at("seeds").at("weight").get<std::uint64_t>();
    cfg.template_seed = h.at("seeds").at("template").get<std::uint64_t>();
    cfg.context_seed = h.at("seeds").at("context").get<std::uint64_t>();
    cfg.context_init_std = h.at("context_init_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint header " + header_path.string() + ": " + e.what());
  }
  auto weights = std::make_shared<TextEncoderWeights>();
  weights->seed = cfg.weight_seed;
  weights->w1 = detail::set_to_matrix(load_embedding_set(p + ".w1"));
  weights->w2 = detail::set_to_matrix(load_embedding_set(p + ".w2"));
  if (weights->token_dim() != cfg.dims.token_dim || weights->hidden_dim() != cfg.dims.hidden_dim ||
      weights->feature_dim() != cfg.dims.feature_dim) {
    throw DimensionMismatchError("checkpoint weights do not match the header dims");
  }
  const auto tokens = load_embedding_set(p + ".tokens");
  PromptContext tmpl{detail::set_to_matrix(load_embedding_set(p + ".template")), false};
  PromptContext ctx{detail::set_to_matrix(load_embedding_set(p + ".context")), true};
  if (tmpl.length() != cfg.context_length || ctx.length() != cfg.context_length) {
    throw DimensionMismatchError("checkpoint context length does not match the header");
  }
  return PromptModel(cfg, std::move(weights), ClassTokenTable(tokens.ids(), detail::set_to_matrix(tokens)),
                     std::move(tmpl), std::move(ctx));
}

}  // namespace dorlab
