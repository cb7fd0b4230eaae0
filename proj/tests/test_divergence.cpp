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
#include <random>

#include <gtest/gtest.h>

#include "dorlab/divergence.hpp"
#include "oracles.hpp"

using namespace dorlab;

using oracle::random_rows;
using oracle::to_eigen;

TEST(Fd, IdenticalVectorsScoreZero) {
  Eigen::MatrixXd x = Eigen::MatrixXd::Ones(5, 3);
  EXPECT_NEAR(fd_score(x, {2, Distance::kCosine}).overall, 0.0, 1e-15);
}

TEST(Fd, OrthogonalUnitVectors) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Identity(3, 3);
  const auto r = fd_score(x, {2, Distance::kCosine});
  for (double s : r.per_item) EXPECT_DOUBLE_EQ(s, 1.0);
  EXPECT_DOUBLE_EQ(r.overall, 1.0);
}

TEST(Fd, SmallHandExampleEuclidean) {
  // Points on a line at 0, 1, 3: nearest-neighbor distances 1, 1, 2.
  Eigen::MatrixXd x(3, 1);
  x << 0, 1, 3;
  const auto r = fd_score(x, {1, Distance::kEuclidean});
  EXPECT_DOUBLE_EQ(r.per_item[0], 1.0);
  EXPECT_DOUBLE_EQ(r.per_item[1], 1.0);
  EXPECT_DOUBLE_EQ(r.per_item[2], 2.0);
  EXPECT_DOUBLE_EQ(r.overall, 4.0 / 3.0);
}

TEST(Fd, Errors) {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Identity(3, 3);
  EXPECT_THROW(fd_score(x, {3, Distance::kCosine}), ValidationError);
  EXPECT_THROW(fd_score(x, {0, Distance::kCosine}), ValidationError);
  Eigen::MatrixXd z = x;
  z.row(1).setZero();
  EXPECT_THROW(fd_score(z, {1, Distance::kCosine}), NumericalError);
  EXPECT_THROW(parse_distance("manhattan"), ValidationError);
  EXPECT_EQ(parse_distance("cosine_distance"), Distance::kCosine);
}

TEST(Fd, FiftyVectorsMatchBruteForce) {
  std::mt19937_64 rng(50);
  const auto rows = random_rows(rng, 50, 6);
  EXPECT_NEAR(fd_score(to_eigen(rows), {5, Distance::kCosine}).overall, oracle::fd(rows, 5, 0), 1e-12);
}

TEST(Fd, OracleEquivalenceAllDistances) {
  std::mt19937_64 rng(2026);
  std::uniform_int_distribution<int> m_dist(1, 20), d_dist(2, 12);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = m_dist(rng);
    std::uniform_int_distribution<int> n_dist(m + 1, 200);
    const int n = n_dist(rng), d = d_dist(rng);
    const auto rows = random_rows(rng, n, d);
    const auto x = to_eigen(rows);
    for (int kind = 0; kind < 3; ++kind) {
      const Distance dist[] = {Distance::kCosine, Distance::kEuclidean, Distance::kMahalanobis};
      const double got = fd_score(x, {m, dist[kind]}).overall;
      const double want = oracle::fd(rows, m, kind);
      const double slack = kind == 2 ? std::max(1.0, oracle::covariance_condition(x) * 1e-3) : 1.0;
      ASSERT_NEAR(got, want, 1e-12 * slack * std::max(1.0, std::abs(want))) << "trial " << trial << " kind " << kind << " n " << n << " d " << d;
    }
  }
}

TEST(Fd, PermutationAndScaleInvariance) {
  std::mt19937_64 rng(8);
  auto rows = random_rows(rng, 30, 5);
  const double base = fd_score(to_eigen(rows), {4, Distance::kCosine}).overall;
  std::shuffle(rows.begin(), rows.end(), rng);
  EXPECT_NEAR(fd_score(to_eigen(rows), {4, Distance::kCosine}).overall, base, 1e-14);
  std::uniform_real_distribution<double> scale(0.1, 10.0);
  for (auto& r : rows) {
    const double s = scale(rng);
    for (auto& v : r) v *= s;
  }
  EXPECT_NEAR(fd_score(to_eigen(rows), {4, Distance::kCosine}).overall, base, 1e-12);
}

TEST(Fd, CosineRangeAndMonotoneInNeighbors) {
  std::mt19937_64 rng(9);
  const auto x = to_eigen(random_rows(rng, 40, 4));
  std::vector<double> last(40, 0.0);
  for (int m = 1; m < 40; ++m) {
    const auto r = fd_score(x, {m, Distance::kCosine});
    EXPECT_GE(r.overall, 0.0);
    EXPECT_LE(r.overall, 2.0);
    for (std::size_t i = 0; i < 40; ++i) {
      EXPECT_GE(r.per_item[i], last[i] - 1e-15);
      last[i] = r.per_item[i];
    }
  }
}

TEST(Fd, EmbeddingSetOverload) {
  const auto set = EmbeddingSet::from_rows(2, {"a", "b", "c"}, {{1, 0}, {0, 1}, {1, 1}});
  EXPECT_NEAR(fd_score(set, {1, Distance::kCosine}).overall, 1.0 - std::sqrt(0.5), 1e-7);
}

TEST(LogitGap, HandExample) {
  std::vector<std::vector<double>> l = {{3, 1, 2}};
  const auto g = logit_gap(l);
  EXPECT_DOUBLE_EQ(g.mean_max, 3.0);
  EXPECT_DOUBLE_EQ(g.mean_rest, 1.5);
}

TEST(LogitGap, EqualLogitsAndErrors) {
  std::vector<std::vector<double>> l = {{2, 2, 2}, {5, 5, 5}};
  const auto g = logit_gap(l);
  EXPECT_DOUBLE_EQ(g.mean_max, g.mean_rest);
  std::vector<std::vector<double>> one = {{1}};
  EXPECT_THROW(logit_gap(one), ValidationError);
}

TEST(LogitGap, WidensWithScale) {
  std::vector<std::vector<double>> l = {{1, -0.5, -0.5}, {-1, 2, -1}};
  double last = logit_gap(l).gap();
  for (double s : {1.5, 2.0, 4.0}) {
    auto scaled = l;
    for (auto& row : scaled)
      for (auto& v : row) v *= s;
    const double gap = logit_gap(scaled).gap();
    EXPECT_GT(gap, last);
    last = gap;
  }
}
