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
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "dorlab/metrics.hpp"
#include "oracles.hpp"

using namespace dorlab;

namespace {

PredictionRecord rec(double conf, bool correct) {
  // Two-class record with the given top probability; truth 0 or 1.
  return make_record({conf, 1.0 - conf}, correct ? 0 : 1);
}

}  // namespace

TEST(Record, ArgmaxTakesLowestIndexOnTies) {
  const auto r = make_record({0.4, 0.4, 0.2}, 1);
  EXPECT_EQ(r.predicted, 0);
  EXPECT_DOUBLE_EQ(r.confidence, 0.4);
  EXPECT_FALSE(r.correct());
}

TEST(Record, RejectsNonSimplex) {
  EXPECT_THROW(make_record({0.5, 0.6}, 0), ValidationError);
  EXPECT_THROW(make_record({0.5, 0.5}, 2), ValidationError);
  EXPECT_THROW(make_record({1.5, -0.5}, 0), ValidationError);
}

TEST(Ece, PerfectConfidenceAllCorrectIsZero) {
  std::vector<PredictionRecord> rs(5, make_record({1.0, 0.0}, 0));
  EXPECT_EQ(compute_ece(rs, 10), 0.0);
  EXPECT_EQ(compute_mce(rs, 10), 0.0);
  EXPECT_EQ(compute_ace(rs, 10), 0.0);
}

TEST(Ece, FourRecordsSingleBin) {
  std::vector<PredictionRecord> rs = {rec(0.9, true), rec(0.9, true), rec(0.9, true), rec(0.9, false)};
  EXPECT_NEAR(compute_ece(rs, 1), 0.15, 1e-15);
}

TEST(Ece, SingleBinIsAccuracyConfidenceGap) {
  std::mt19937_64 rng(5);
  const auto rs = oracle::random_records(rng, 57, 4);
  EXPECT_NEAR(compute_ece(rs, 1), std::abs(accuracy(rs) - mean_confidence(rs)), 1e-15);
  EXPECT_NEAR(compute_mce(rs, 1), compute_ece(rs, 1), 1e-15);
}

TEST(Ece, RightClosedEdges) {
  // 0.7 belongs to (0.6, 0.7], 1.0 to the top bin.
  EXPECT_EQ(confidence_bin(0.7, 10), 6);
  EXPECT_EQ(confidence_bin(0.7000001, 10), 7);
  EXPECT_EQ(confidence_bin(1.0, 10), 9);
  EXPECT_EQ(confidence_bin(0.0, 10), 0);
  EXPECT_EQ(confidence_bin(0.1, 10), 0);
}

TEST(Ece, OrderInvariant) {
  std::mt19937_64 rng(7);
  auto rs = oracle::random_records(rng, 200, 5);
  const double before = compute_ece(rs, 15);
  std::shuffle(rs.begin(), rs.end(), rng);
  EXPECT_NEAR(compute_ece(rs, 15), before, 1e-14);
}

TEST(Ece, EmptyInputIsAnError) {
  std::vector<PredictionRecord> none;
  EXPECT_THROW(compute_ece(none, 10), ValidationError);
  EXPECT_THROW(compute_mce(none, 10), ValidationError);
  EXPECT_THROW(compute_ace(none, 10), ValidationError);
  EXPECT_THROW(reliability_diagram(none, 10), ValidationError);
}

TEST(Mce, TwoBinsTakesTheLargerGap) {
  // Bin (0.5, 0.6]: 20 records at 0.55, 12 correct -> |0.60 - 0.55| = 0.05.
  // Bin (0.9, 1.0]: 10 records at 0.95, 7 correct  -> |0.70 - 0.95| = 0.25.
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 20; ++i) rs.push_back(rec(0.55, i < 12));
  for (int i = 0; i < 10; ++i) rs.push_back(rec(0.95, i < 7));
  EXPECT_NEAR(compute_mce(rs, 10), 0.25, 1e-12);
  EXPECT_NEAR(compute_ece(rs, 10), (20 * 0.05 + 10 * 0.25) / 30.0, 1e-12);
}

TEST(Ace, IdenticalRecordsIgnoreBinCount) {
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 12; ++i) rs.push_back(rec(0.8, true));
  for (int g : {1, 2, 5, 12}) EXPECT_NEAR(compute_ace(rs, g), 0.2, 1e-12) << g;
}

TEST(Ace, FourSortedRecordsTwoBins) {
  // Sorted: 0.6 (wrong), 0.7 (right) | 0.8 (right), 0.9 (wrong).
  std::vector<PredictionRecord> rs = {rec(0.9, false), rec(0.6, false), rec(0.8, true), rec(0.7, true)};
  const double low = std::abs(0.5 - 0.65), high = std::abs(0.5 - 0.85);
  EXPECT_NEAR(compute_ace(rs, 2), 0.5 * low + 0.5 * high, 1e-12);
}

TEST(Piece, OneProximityBinEqualsEce) {
  std::mt19937_64 rng(11);
  const auto rs = oracle::random_records(rng, 120, 6);
  const auto feats = oracle::random_features(rng, rs, 5);
  BinningConfig cfg;
  cfg.num_proximity_bins = 1;
  EXPECT_EQ(compute_piece(rs, cfg, feats), compute_ece(rs, cfg.num_conf_bins));
}

TEST(Piece, PerfectCalibrationIsZero) {
  std::mt19937_64 rng(3);
  std::vector<PredictionRecord> rs(40, make_record({1.0, 0.0}, 0));
  for (std::size_t i = 0; i < rs.size(); ++i) rs[i].id = "item" + std::to_string(i);
  EXPECT_EQ(compute_piece(rs, BinningConfig{}, oracle::random_features(rng, rs, 4)), 0.0);
}

TEST(Piece, RejectsMissingFeaturesAndTooFewItems) {
  std::mt19937_64 rng(3);
  auto rs = oracle::random_records(rng, 30, 3);
  const auto feats = oracle::random_features(rng, rs, 4);
  BinningConfig cfg;
  cfg.proximity_neighbors = 30;
  EXPECT_THROW(compute_piece(rs, cfg, feats), ValidationError);
  rs[4].id = "unknown";
  EXPECT_THROW(compute_piece(rs, BinningConfig{}, feats), ValidationError);
}

TEST(Oracle, AllFourMetricsMatchNaiveImplementations) {
  std::mt19937_64 rng(20260101);
  std::uniform_int_distribution<int> n_dist(1, 500), c_dist(2, 20), g_dist(1, 20), h_dist(1, 5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = n_dist(rng), c = c_dist(rng), g = g_dist(rng);
    const auto rs = oracle::random_records(rng, n, c);
    ASSERT_NEAR(compute_ece(rs, g), oracle::ece(rs, g), 1e-12) << trial;
    ASSERT_NEAR(compute_mce(rs, g), oracle::mce(rs, g), 1e-12) << trial;
    ASSERT_NEAR(compute_ace(rs, g), oracle::ace(rs, g), 1e-12) << trial;
    if (n >= 2) {
      BinningConfig cfg{g, h_dist(rng), std::min(10, n - 1)};
      const auto feats = oracle::random_features(rng, rs, 4);
      const auto prox = oracle::proximity(oracle::rows_of(feats), cfg.proximity_neighbors);
      const auto lib_prox = compute_proximity(rs, feats, cfg.proximity_neighbors);
      for (int i = 0; i < n; ++i) ASSERT_NEAR(lib_prox[i], prox[i], 1e-12);
      ASSERT_NEAR(compute_piece(rs, cfg, feats),
                  oracle::piece(rs, prox, cfg.num_proximity_bins, cfg.num_conf_bins), 1e-12)
          << trial;
    }
  }
}

TEST(Properties, BoundsAndEceBelowMce) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const auto rs = oracle::random_records(rng, 1 + trial, 3);
    const double e = compute_ece(rs, 10), m = compute_mce(rs, 10), a = compute_ace(rs, 10);
    EXPECT_GE(e, 0.0);
    EXPECT_LE(m, 1.0);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_LE(e, m + 1e-15);
  }
}

TEST(Reliability, TenBinsWithEdgesAndConservation) {
  std::mt19937_64 rng(1);
  const auto rs = oracle::random_records(rng, 333, 4);
  const auto bins = reliability_diagram(rs, 10);
  ASSERT_EQ(bins.size(), 10u);
  std::size_t total = 0;
  double e = 0;
  for (std::size_t g = 0; g < bins.size(); ++g) {
    EXPECT_DOUBLE_EQ(bins[g].lo, g / 10.0);
    EXPECT_DOUBLE_EQ(bins[g].hi, (g + 1) / 10.0);
    total += bins[g].count;
    if (bins[g].count) e += bins[g].count / 333.0 * std::abs(bins[g].accuracy - bins[g].avg_confidence);
  }
  EXPECT_EQ(total, 333u);
  EXPECT_NEAR(e, compute_ece(rs, 10), 1e-12);
}

TEST(Reliability, CsvHasHeaderAndOneLinePerBin) {
  std::mt19937_64 rng(1);
  const auto rs = oracle::random_records(rng, 50, 3);
  std::ostringstream os;
  write_reliability_csv(os, reliability_diagram(rs, 5));
  const auto s = os.str();
  EXPECT_EQ(s.rfind("lo,hi,count,avg_conf,accuracy\n", 0), 0u);
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 6);
}

TEST(Means, HarmonicMean) {
  EXPECT_DOUBLE_EQ(harmonic_mean(2.0, 6.0), 3.0);
  EXPECT_DOUBLE_EQ(harmonic_mean(4.2, 4.2), 4.2);
  EXPECT_THROW(harmonic_mean(0.0, 1.0), ValidationError);
  EXPECT_THROW(harmonic_mean(-1.0, 1.0), ValidationError);
}

TEST(Means, CoopEceRowIsAnArithmeticMean) {
  // Printed as 8.82 for base 3.07 and new 14.58.
  EXPECT_NEAR(arithmetic_mean(3.07, 14.58), 8.825, 1e-12);
  EXPECT_NEAR(harmonic_mean(3.07, 14.58), 2 * 3.07 * 14.58 / (3.07 + 14.58), 1e-12);
  EXPECT_NEAR(harmonic_mean(3.07, 14.58), 5.072, 1e-3);
}

TEST(MetricRow, CarriesConfig) {
  const auto j = metric_row("ece", "new", 0.12, {{"num_conf_bins", 15}});
  EXPECT_EQ(j.at("metric"), "ece");
  EXPECT_EQ(j.at("split"), "new");
  EXPECT_DOUBLE_EQ(j.at("value").get<double>(), 0.12);
  EXPECT_EQ(j.at("config").at("num_conf_bins"), 15);
}
