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

// Textual outlier pool: score candidate words by their mean zero-shot
// similarity to the base classes, keep the top (or bottom, or a random) K
// after removing words that name a class, and draw per-iteration batches.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "dorlab/common.hpp"
#include "dorlab/embedding_store.hpp"

namespace dorlab {

enum class ExclusionPolicy { kExactName, kNameAndNewClasses };
enum class SelectionMode { kNear, kFar, kRandom, kOracle };

inline std::string_view to_string(ExclusionPolicy p) {
  return p == ExclusionPolicy::kExactName ? "exact_name" : "name_and_new_classes";
}

inline ExclusionPolicy parse_exclusion_policy(std::string_view s) {
  if (s == "exact_name") return ExclusionPolicy::kExactName;
  if (s == "name_and_new_classes") return ExclusionPolicy::kNameAndNewClasses;
  throw ValidationError("unknown exclusion policy '" + std::string(s) + "'");
}

inline std::string_view to_string(SelectionMode m) {
  switch (m) {
    case SelectionMode::kNear: return "near";
    case SelectionMode::kFar: return "far";
    case SelectionMode::kRandom: return "random";
    case SelectionMode::kOracle: return "oracle";
  }
  return "?";
}

inline SelectionMode parse_selection_mode(std::string_view s) {
  if (s == "near") return SelectionMode::kNear;
  if (s == "far") return SelectionMode::kFar;
  if (s == "random") return SelectionMode::kRandom;
  if (s == "oracle") return SelectionMode::kOracle;
  throw ValidationError("unknown selection mode '" + std::string(s) + "'");
}

class InsufficientCandidatesError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Lowercase, underscores to spaces, whitespace runs collapsed, trimmed.
// "Golden_Retriever " and "golden retriever" compare equal.
inline std::string normalize_name(std::string_view name) {
  std::string out;
  out.reserve(name.size());
  bool pending_space = false;
  for (char ch : name) {
    auto c = static_cast<unsigned char>(ch);
    if (c == '_' || std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

// Candidate words (the set ids) with unit zero-shot text features.
struct CandidateVocabulary {
  EmbeddingSet entries;

  CandidateVocabulary() = default;
  explicit CandidateVocabulary(EmbeddingSet set) : entries(std::move(set)) {
    require(entries.normalized(), "candidate features must be unit-normalized");
  }

  std::size_t size() const { return entries.size(); }
  const std::string& word(std::size_t i) const { return entries.id(i); }
};

// s_i = mean_j cos(candidate_i, base_j).
inline std::vector<double> score_candidates(const CandidateVocabulary& vocab, const EmbeddingSet& base) {
  if (base.empty()) throw ValidationError("cannot score candidates against an empty base set");
  if (vocab.entries.dim() != base.dim()) {
    throw DimensionMismatchError("candidate dim " + std::to_string(vocab.entries.dim()) +
                                 " does not match base dim " + std::to_string(base.dim()));
  }
  std::vector<double> scores(vocab.size());
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto v = vocab.entries.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < base.size(); ++j) s += cosine(v, base.row(j));
    scores[i] = s / static_cast<double>(base.size());
  }
  return scores;
}

struct SelectionConfig {
  int top_k = 5000;
  ExclusionPolicy exclusion = ExclusionPolicy::kExactName;
  SelectionMode mode = SelectionMode::kNear;
  std::uint64_t seed = 1;
  // Oracle pools are built from the held-out classes themselves; they leak
  // test information and must be asked for explicitly.
  bool allow_oracle = false;

  void validate() const {
    require(top_k >= 1, "top_k must be at least 1");
    if (mode == SelectionMode::kOracle) require(allow_oracle, "oracle selection requires allow_oracle");
  }
};

struct PoolEntry {
  std::string word;
  std::vector<double> feature;
  double score = 0.0;
};

struct OutlierPool {
  std::vector<PoolEntry> selected;
  std::uint64_t seed = 0;
  SelectionMode mode = SelectionMode::kNear;
  ExclusionPolicy exclusion = ExclusionPolicy::kExactName;

  std::size_t size() const { return selected.size(); }
  bool empty() const { return selected.empty(); }
};

namespace detail {

inline std::unordered_set<std::string> excluded_names(std::span<const std::string> base_names,
                                                      std::span<const std::string> new_names,
                                                      ExclusionPolicy policy) {
  std::unordered_set<std::string> out;
  for (const auto& n : base_names) out.insert(normalize_name(n));
  if (policy == ExclusionPolicy::kNameAndNewClasses) {
    for (const auto& n : new_names) out.insert(normalize_name(n));
  }
  return out;
}

}  // namespace detail

// Near: top-K by score, descending. Far: bottom-K, ascending. Random:
// K uniformly without replacement, kept in candidate order. Ties in score
// go to the earlier candidate. `new_names` only matters for the
// name_and_new_classes policy.
inline OutlierPool select_outliers(const CandidateVocabulary& vocab, std::span<const std::string> base_names,
                                   std::span<const double> scores, const SelectionConfig& cfg,
                                   std::span<const std::string> new_names = {}) {
  cfg.validate();
  require(cfg.mode != SelectionMode::kOracle, "oracle pools are built with oracle_pool");
  require(scores.size() == vocab.size(), "one score per candidate required");
  const auto excluded = detail::excluded_names(base_names, new_names, cfg.exclusion);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (!excluded.contains(normalize_name(vocab.word(i)))) keep.push_back(i);
  }
  const auto k = static_cast<std::size_t>(cfg.top_k);
  if (keep.size() < k) {
    throw InsufficientCandidatesError("only " + std::to_string(keep.size()) + " candidates remain after exclusion, " +
                                      std::to_string(k) + " requested");
  }
  switch (cfg.mode) {
    case SelectionMode::kNear:
      std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
      keep.resize(k);
      break;
    case SelectionMode::kFar:
      std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
      keep.resize(k);
      break;
    case SelectionMode::kRandom: {
      auto rng = make_rng(cfg.seed, 0x706f6f6cULL);
      std::shuffle(keep.begin(), keep.end(), rng);
      keep.resize(k);
      std::sort(keep.begin(), keep.end());
      break;
    }
    case SelectionMode::kOracle: break;
  }
  OutlierPool pool;
  pool.seed = cfg.seed;
  pool.mode = cfg.mode;
  pool.exclusion = cfg.exclusion;
  for (std::size_t i : keep) pool.selected.push_back({vocab.word(i), vocab.entries.row_f64(i), scores[i]});
  return pool;
}

// Pool made of the held-out classes themselves (the upper-bound "oracle"
// comparison). Scores are still the mean similarity to the base classes.
inline OutlierPool oracle_pool(const EmbeddingSet& new_class_features, const EmbeddingSet& base_features,
                               const SelectionConfig& cfg) {
  require(cfg.mode == SelectionMode::kOracle && cfg.allow_oracle, "oracle pool requested without the oracle flag");
  require(!new_class_features.empty(), "oracle pool needs at least one held-out class");
  const CandidateVocabulary vocab(new_class_features);
  const auto scores = score_candidates(vocab, base_features);
  OutlierPool pool;
  pool.seed = cfg.seed;
  pool.mode = SelectionMode::kOracle;
  pool.exclusion = cfg.exclusion;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    pool.selected.push_back({vocab.word(i), vocab.entries.row_f64(i), scores[i]});
  }
  return pool;
}

struct OutlierBatch {
  std::vector<std::size_t> indices;  // into pool.selected
  std::int64_t iteration = 0;
};

// B distinct pool entries drawn by a partial Fisher-Yates shuffle whose
// generator depends only on (pool.seed, iteration).
inline OutlierBatch sample_batch(const OutlierPool& pool, int batch_size, std::int64_t iteration) {
  require(batch_size >= 1, "outlier batch size must be at least 1");
  if (static_cast<std::size_t>(batch_size) > pool.size()) {
    throw ValidationError("outlier batch size " + std::to_string(batch_size) + " exceeds pool size " +
                          std::to_string(pool.size()));
  }
  auto rng = make_rng(pool.seed ^ 0x6261746368ULL, static_cast<std::uint64_t>(iteration));
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto b = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < b; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(b);
  return {std::move(idx), iteration};
}

// ---------------------------------------------------------------------------
// Persistence: <prefix>.pool.json plus the features as an embedding pair.

inline void save_pool(const OutlierPool& pool, const std::filesystem::path& prefix) {
  require(!pool.empty(), "cannot save an empty pool");
  nlohmann::json entries = nlohmann::json::array();
  std::vector<std::string> words;
  std::vector<std::vector<double>> rows;
  for (const auto& e : pool.selected) {
    entries.push_back({{"word", e.word}, {"score", e.score}});
    words.push_back(e.word);
    rows.push_back(e.feature);
  }
  nlohmann::json j = {{"seed", pool.seed},
                      {"mode", to_string(pool.mode)},
                      {"exclusion_policy", to_string(pool.exclusion)},
                      {"K", pool.size()},
                      {"entries", entries}};
  if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());
  std::ofstream os(prefix.string() + ".pool.json");
  if (!os) throw Error("cannot write " + prefix.string() + ".pool.json");
  os << j.dump(2) << '\n';
  const auto dim = rows.front().size();
  save_embedding_set(EmbeddingSet::from_rows(dim, words, rows), prefix.string() + ".features");
}

inline OutlierPool load_pool(const std::filesystem::path& prefix) {
  const std::filesystem::path meta = prefix.string() + ".pool.json";
  if (!std::filesystem::exists(meta)) throw MissingFileError("missing pool file " + meta.string());
  nlohmann::json j;
  try {
    std::ifstream is(meta);
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + meta.string() + ": " + e.what());
  }
  const auto features = load_embedding_set(prefix.string() + ".features");
  OutlierPool pool;
  try {
    pool.seed = j.at("seed").get<std::uint64_t>();
    pool.mode = parse_selection_mode(j.at("mode").get<std::string>());
    pool.exclusion = parse_exclusion_policy(j.value("exclusion_policy", std::string("exact_name")));
    for (const auto& e : j.at("entries")) {
      const auto word = e.at("word").get<std::string>();
      auto i = features.index_of(word);
      if (!i) throw FormatError("pool word '" + word + "' has no feature");
      pool.selected.push_back({word, features.row_f64(*i), e.at("score").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed pool file " + meta.string() + ": " + e.what());
  }
  if (pool.size() != j.at("K").get<std::size_t>()) throw FormatError("pool K does not match its entries");
  return pool;
}

}  // namespace dorlab
