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

// Feature-divergence diagnostics: the k-nearest-neighbor FD score of a
// feature set and the max-logit versus rest-of-logits gap.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "dorlab/common.hpp"
#include "dorlab/embedding_store.hpp"

namespace dorlab {

enum class Distance { kCosine, kEuclidean, kMahalanobis };

inline std::string_view to_string(Distance d) {
  switch (d) {
    case Distance::kCosine: return "cosine_distance";
    case Distance::kEuclidean: return "euclidean";
    case Distance::kMahalanobis: return "mahalanobis";
  }
  return "?";
}

inline Distance parse_distance(std::string_view s) {
  if (s == "cosine_distance" || s == "cosine") return Distance::kCosine;
  if (s == "euclidean") return Distance::kEuclidean;
  if (s == "mahalanobis") return Distance::kMahalanobis;
  throw ValidationError("unknown distance '" + std::string(s) + "'");
}

struct FDConfig {
  int neighbors = 3;
  Distance distance = Distance::kCosine;
};

struct FDResult {
  std::vector<double> per_item;
  double overall = 0.0;
};

// Ridge added to the sample covariance before inversion.
inline constexpr double kMahalanobisRidge = 1e-6;

namespace detail {

inline Eigen::MatrixXd to_matrix(const EmbeddingSet& set) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(set.dim()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto r = set.row(i);
    for (std::size_t j = 0; j < set.dim(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r[j];
  }
  return m;
}

// Full N x N distance matrix under the chosen metric.
inline Eigen::MatrixXd pairwise_distances(const Eigen::MatrixXd& x, Distance distance) {
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd d(n, n);
  switch (distance) {
    case Distance::kCosine: {
      Eigen::VectorXd norms = x.rowwise().norm();
      if ((norms.array() == 0.0).any()) throw NumericalError("cosine distance of a zero vector");
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) d(i, j) = 1.0 - x.row(i).dot(x.row(j)) / (norms(i) * norms(j));
      break;
    }
    case Distance::kEuclidean:
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) d(i, j) = (x.row(i) - x.row(j)).norm();
      break;
    case Distance::kMahalanobis: {
      const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
      Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
      cov.diagonal().array() += kMahalanobisRidge;
      const Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
          const Eigen::VectorXd diff = (x.row(i) - x.row(j)).transpose();
          d(i, j) = std::sqrt(std::max(0.0, diff.dot(ldlt.solve(diff))));
        }
      break;
    }
  }
  return d;
}

}  // namespace detail

// Per-item mean distance to the M nearest other items, and their average.
inline FDResult fd_score(const Eigen::MatrixXd& features, const FDConfig& cfg) {
  const Eigen::Index n = features.rows();
  require(cfg.neighbors >= 1, "FD needs at least one neighbor");
  if (n <= cfg.neighbors) {
    throw ValidationError("FD needs more items (" + std::to_string(n) + ") than neighbors (" +
                          std::to_string(cfg.neighbors) + ")");
  }
  const Eigen::MatrixXd d = detail::pairwise_distances(features, cfg.distance);
  const auto m = static_cast<std::size_t>(cfg.neighbors);
  FDResult out;
  out.per_item.resize(static_cast<std::size_t>(n));
  std::vector<double> row;
  row.reserve(static_cast<std::size_t>(n - 1));
  for (Eigen::Index i = 0; i < n; ++i) {
    row.clear();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) row.push_back(d(i, j));
    }
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(m), row.end());
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += row[k];
    out.per_item[static_cast<std::size_t>(i)] = s / static_cast<double>(m);
  }
  double total = 0.0;
  for (double s : out.per_item) total += s;
  out.overall = total / static_cast<double>(n);
  return out;
}

inline FDResult fd_score(const EmbeddingSet& set, const FDConfig& cfg) {
  return fd_score(detail::to_matrix(set), cfg);
}

struct LogitGap {
  double mean_max = 0.0;
  double mean_rest = 0.0;
  double gap() const { return mean_max - mean_rest; }
};

// Mean over examples of the largest logit, and of the average of the others.
inline LogitGap logit_gap(std::span<const std::vector<double>> logits) {
  require(!logits.empty(), "logit gap of no examples");
  LogitGap g;
  for (const auto& l : logits) {
    require(l.size() >= 2, "logit gap needs at least two classes");
    const auto top = std::max_element(l.begin(), l.end());
    double rest = 0.0;
    for (auto it = l.begin(); it != l.end(); ++it) {
      if (it != top) rest += *it;
    }
    g.mean_max += *top;
    g.mean_rest += rest / static_cast<double>(l.size() - 1);
  }
  g.mean_max /= static_cast<double>(logits.size());
  g.mean_rest /= static_cast<double>(logits.size());
  return g;
}

}  // namespace dorlab
