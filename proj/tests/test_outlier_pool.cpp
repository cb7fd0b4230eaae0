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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <gtest/gtest.h>

#include "dorlab/outlier_pool.hpp"
#include "oracles.hpp"

using namespace dorlab;

using oracle::random_vocab;
using oracle::sorted_words;
using oracle::words;

namespace {

OutlierPool toy_pool(int n, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  const auto vocab = random_vocab(rng, n, 4);
  const auto base = EmbeddingSet::from_rows(4, {"base"}, {{1, 0, 0, 0}});
  const auto scores = score_candidates(vocab, base);
  SelectionConfig cfg;
  cfg.top_k = n;
  cfg.seed = seed;
  return select_outliers(vocab, std::vector<std::string>{"base"}, scores, cfg);
}

}  // namespace

TEST(NormalizeName, CaseUnderscoreWhitespace) {
  EXPECT_EQ(normalize_name("Golden_Retriever "), "golden retriever");
  EXPECT_EQ(normalize_name("  golden   retriever"), "golden retriever");
  EXPECT_EQ(normalize_name("Sail_Boat"), "sail boat");
  EXPECT_EQ(normalize_name("__"), "");
}

TEST(Score, HandExample) {
  const auto base = EmbeddingSet::from_rows(2, {"a", "b"}, {{1, 0}, {0, 1}});
  const CandidateVocabulary vocab(EmbeddingSet::from_rows(2, {"x", "y", "z"}, {{1, 0}, {1, 1}, {-1, 0}}));
  const auto s = score_candidates(vocab, base);
  EXPECT_NEAR(s[0], 0.5, 1e-7);
  EXPECT_NEAR(s[1], std::sqrt(0.5), 1e-7);
  EXPECT_NEAR(s[2], -0.5, 1e-7);
}

TEST(Score, MatchesPairwiseMean) {
  std::mt19937_64 rng(3);
  const auto vocab = random_vocab(rng, 60, 5);
  const auto base_vocab = random_vocab(rng, 7, 5, "b");
  const auto s = score_candidates(vocab, base_vocab.entries);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    double want = 0;
    for (std::size_t j = 0; j < base_vocab.size(); ++j) {
      double dot = 0;
      for (std::size_t t = 0; t < 5; ++t) dot += vocab.entries.row(i)[t] * double{base_vocab.entries.row(j)[t]};
      want += dot;  // rows are unit, so the dot product is the cosine
    }
    EXPECT_NEAR(s[i], want / 7.0, 1e-6);
  }
}

TEST(Score, Errors) {
  const CandidateVocabulary vocab(EmbeddingSet::from_rows(2, {"x"}, {{1, 0}}));
  EXPECT_THROW(score_candidates(vocab, EmbeddingSet{}), ValidationError);
  EXPECT_THROW(score_candidates(vocab, EmbeddingSet::from_rows(3, {"a"}, {{1, 0, 0}})), DimensionMismatchError);
  EXPECT_THROW(CandidateVocabulary(EmbeddingSet(2, {"r"}, {3.0f, 4.0f}, false)), ValidationError);
}

TEST(Select, TopKMatchesFullSortOracle) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> n_dist(5, 400), d_dist(2, 10);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = n_dist(rng), d = d_dist(rng);
    const auto vocab = random_vocab(rng, n, d);
    const auto base = random_vocab(rng, 3, d, "base");
    const auto scores = score_candidates(vocab, base.entries);
    std::uniform_int_distribution<int> k_dist(1, n);
    SelectionConfig cfg;
    cfg.top_k = k_dist(rng);
    cfg.mode = SelectionMode::kNear;
    const std::vector<std::string> base_names = base.entries.ids();
    ASSERT_EQ(words(select_outliers(vocab, base_names, scores, cfg)), sorted_words(vocab, scores, cfg.top_k, true))
        << "trial " << trial;
    cfg.mode = SelectionMode::kFar;
    ASSERT_EQ(words(select_outliers(vocab, base_names, scores, cfg)), sorted_words(vocab, scores, cfg.top_k, false))
        << "trial " << trial;
  }
}

TEST(Select, NearScoresDescendFarScoresAscend) {
  std::mt19937_64 rng(5);
  const auto vocab = random_vocab(rng, 100, 6);
  const auto base = random_vocab(rng, 4, 6, "base");
  const auto scores = score_candidates(vocab, base.entries);
  SelectionConfig cfg;
  cfg.top_k = 30;
  const auto near = select_outliers(vocab, {}, scores, cfg);
  cfg.mode = SelectionMode::kFar;
  const auto far = select_outliers(vocab, {}, scores, cfg);
  for (std::size_t i = 1; i < 30; ++i) {
    EXPECT_GE(near.selected[i - 1].score, near.selected[i].score);
    EXPECT_LE(far.selected[i - 1].score, far.selected[i].score);
  }
  EXPECT_GT(near.selected.back().score, far.selected.back().score);
}

TEST(Select, KEqualsVocabularyTakesEverything) {
  std::mt19937_64 rng(6);
  const auto vocab = random_vocab(rng, 25, 3);
  const auto scores = score_candidates(vocab, random_vocab(rng, 2, 3, "b").entries);
  SelectionConfig cfg;
  cfg.top_k = 25;
  const auto pool = select_outliers(vocab, {}, scores, cfg);
  const auto got = words(pool);
  EXPECT_EQ(std::set<std::string>(got.begin(), got.end()).size(), 25u);
}

TEST(Select, ExclusionLeavesNoOverlap) {
  const std::vector<std::string> ids = {"Cat", "cat", "sail_boat", "Sail Boat ", "dog", "tulip", "truck", "apple", "kite"};
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) rows.push_back({1.0, static_cast<double>(i) * 0.1});
  const CandidateVocabulary vocab(EmbeddingSet::from_rows(2, ids, rows));
  const auto scores = score_candidates(vocab, EmbeddingSet::from_rows(2, {"q"}, {{1, 0}}));
  const std::vector<std::string> base = {"cat", "Sail_Boat"};
  const std::vector<std::string> novel = {"Dog", "TULIP"};

  SelectionConfig cfg;
  cfg.top_k = 5;
  const auto exact = select_outliers(vocab, base, scores, cfg, novel);
  for (const auto& w : words(exact)) {
    for (const auto& b : base) EXPECT_NE(normalize_name(w), normalize_name(b)) << w;
  }
  EXPECT_THROW(
      {
        cfg.top_k = 6;
        select_outliers(vocab, base, scores, cfg, novel);
      },
      InsufficientCandidatesError);

  cfg.top_k = 3;
  cfg.exclusion = ExclusionPolicy::kNameAndNewClasses;
  const auto strict = select_outliers(vocab, base, scores, cfg, novel);
  for (const auto& w : words(strict)) {
    for (const auto& b : base) EXPECT_NE(normalize_name(w), normalize_name(b)) << w;
    for (const auto& b : novel) EXPECT_NE(normalize_name(w), normalize_name(b)) << w;
  }
  auto got = words(strict);
  std::sort(got.begin(), got.end());
  EXPECT_EQ(got, (std::vector<std::string>{"apple", "kite", "truck"}));
}

TEST(Select, RandomModeIsSeededAndKeepsCandidateOrder) {
  std::mt19937_64 rng(9);
  const auto vocab = random_vocab(rng, 80, 4);
  const auto scores = score_candidates(vocab, random_vocab(rng, 2, 4, "b").entries);
  SelectionConfig cfg;
  cfg.top_k = 20;
  cfg.mode = SelectionMode::kRandom;
  cfg.seed = 11;
  const auto a = select_outliers(vocab, {}, scores, cfg);
  const auto b = select_outliers(vocab, {}, scores, cfg);
  EXPECT_EQ(words(a), words(b));
  cfg.seed = 12;
  EXPECT_NE(words(a), words(select_outliers(vocab, {}, scores, cfg)));
  for (std::size_t i = 1; i < a.size(); ++i) {
    EXPECT_LT(*vocab.entries.index_of(a.selected[i - 1].word), *vocab.entries.index_of(a.selected[i].word));
  }
}

TEST(Select, OracleNeedsTheFlag) {
  const auto feats = EmbeddingSet::from_rows(2, {"n1", "n2"}, {{1, 0}, {0, 1}});
  const auto base = EmbeddingSet::from_rows(2, {"b"}, {{1, 1}});
  SelectionConfig cfg;
  cfg.mode = SelectionMode::kOracle;
  EXPECT_THROW(cfg.validate(), ValidationError);
  EXPECT_THROW(oracle_pool(feats, base, cfg), ValidationError);
  cfg.allow_oracle = true;
  const auto pool = oracle_pool(feats, base, cfg);
  EXPECT_EQ(words(pool), (std::vector<std::string>{"n1", "n2"}));
  const CandidateVocabulary vocab(feats);
  EXPECT_THROW(select_outliers(vocab, {}, std::vector<double>{0, 0}, cfg), ValidationError);
}

TEST(Select, ParseAndPrintEnums) {
  for (auto m : {SelectionMode::kNear, SelectionMode::kFar, SelectionMode::kRandom, SelectionMode::kOracle}) {
    EXPECT_EQ(parse_selection_mode(to_string(m)), m);
  }
  for (auto p : {ExclusionPolicy::kExactName, ExclusionPolicy::kNameAndNewClasses}) {
    EXPECT_EQ(parse_exclusion_policy(to_string(p)), p);
  }
  EXPECT_THROW(parse_selection_mode("nearest"), ValidationError);
  EXPECT_THROW(parse_exclusion_policy("none"), ValidationError);
}

TEST(Batch, DeterministicDistinctAndIterationDependent) {
  const auto pool = toy_pool(30);
  const auto a = sample_batch(pool, 8, 4);
  EXPECT_EQ(a.indices, sample_batch(pool, 8, 4).indices);
  EXPECT_NE(a.indices, sample_batch(pool, 8, 5).indices);
  EXPECT_EQ(std::set<std::size_t>(a.indices.begin(), a.indices.end()).size(), 8u);
  for (auto i : a.indices) EXPECT_LT(i, pool.size());
}

TEST(Batch, WholePoolIsAPermutation) {
  const auto pool = toy_pool(12);
  auto idx = sample_batch(pool, 12, 0).indices;
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(idx[i], i);
}

TEST(Batch, InclusionIsUniform) {
  const auto pool = toy_pool(20);
  const int iterations = 10000, b = 5;
  std::vector<int> counts(pool.size(), 0);
  for (int it = 0; it < iterations; ++it)
    for (auto i : sample_batch(pool, b, it).indices) ++counts[i];
  const double p = static_cast<double>(b) / static_cast<double>(pool.size());
  const double mean = iterations * p, sd = std::sqrt(iterations * p * (1 - p));
  for (std::size_t i = 0; i < counts.size(); ++i) EXPECT_NEAR(counts[i], mean, 3 * sd) << "entry " << i;
}

TEST(Batch, Errors) {
  const auto pool = toy_pool(4);
  EXPECT_THROW(sample_batch(pool, 5, 0), ValidationError);
  EXPECT_THROW(sample_batch(pool, 0, 0), ValidationError);
}

TEST(Persistence, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "dorlab_pool_test";
  std::filesystem::remove_all(dir);
  auto pool = toy_pool(10);
  pool.exclusion = ExclusionPolicy::kNameAndNewClasses;
  save_pool(pool, dir / "p");
  const auto back = load_pool(dir / "p");
  EXPECT_EQ(back.seed, pool.seed);
  EXPECT_EQ(back.mode, pool.mode);
  EXPECT_EQ(back.exclusion, pool.exclusion);
  ASSERT_EQ(words(back), words(pool));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    EXPECT_DOUBLE_EQ(back.selected[i].score, pool.selected[i].score);
    for (std::size_t t = 0; t < pool.selected[i].feature.size(); ++t)
      EXPECT_NEAR(back.selected[i].feature[t], pool.selected[i].feature[t], 1e-6);
  }
  EXPECT_THROW(load_pool(dir / "absent"), MissingFileError);
  EXPECT_THROW(save_pool(OutlierPool{}, dir / "empty"), ValidationError);
  std::filesystem::remove_all(dir);
}
