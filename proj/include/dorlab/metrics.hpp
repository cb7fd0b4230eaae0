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

// Calibration metrics over evaluated predictions: ECE, MCE, ACE, PIECE,
// reliability diagrams and the cross-split means used in reports.
//
// Confidence bins are equal-width intervals (lo, hi] on [0, 1]; the first
// bin is closed at 0 so that every confidence in [0, 1] has a bin and 1.0
// lands in the top one.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dorlab/common.hpp"
#include "dorlab/embedding_store.hpp"

namespace dorlab {

struct PredictionRecord {
  std::vector<double> probs;
  int predicted = 0;
  int truth = 0;
  double confidence = 0.0;
  std::optional<double> proximity;
  // Item id, used to look up features for proximity.
  std::string id;

  bool correct() const { return predicted == truth; }
};

inline constexpr double kSimplexTolerance = 1e-9;

// Argmax with the lowest index winning exact ties.
inline int argmax(std::span<const double> v) {
  require(!v.empty(), "argmax of an empty vector");
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline PredictionRecord make_record(std::vector<double> probs, int truth, std::string id = {}) {
  require(probs.size() >= 1, "a prediction needs at least one class");
  double total = 0.0;
  for (double p : probs) {
    require(std::isfinite(p) && p >= 0.0, "probabilities must be finite and non-negative");
    total += p;
  }
  require(std::abs(total - 1.0) <= kSimplexTolerance, "probabilities must sum to 1");
  require(truth >= 0 && static_cast<std::size_t>(truth) < probs.size(), "truth label out of range");
  PredictionRecord r;
  r.predicted = argmax(probs);
  r.confidence = probs[static_cast<std::size_t>(r.predicted)];
  r.probs = std::move(probs);
  r.truth = truth;
  r.id = std::move(id);
  return r;
}

struct BinSummary {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double avg_confidence = 0.0;
  double accuracy = 0.0;
};

struct BinningConfig {
  int num_conf_bins = 10;
  int num_proximity_bins = 3;
  int proximity_neighbors = 10;

  void validate() const {
    require(num_conf_bins >= 1 && num_proximity_bins >= 1 && proximity_neighbors >= 1,
            "binning parameters must be positive");
  }
};

inline double bin_edge(int g, int num_bins) {
  return static_cast<double>(g) / static_cast<double>(num_bins);
}

// Index of the (lo, hi] bin holding `confidence`. The arithmetic guess is
// corrected against the same edges bin_edge() produces, so membership is
// decided by direct comparison with the edge values.
inline int confidence_bin(double confidence, int num_bins) {
  if (confidence <= 0.0) return 0;
  int g = static_cast<int>(std::ceil(confidence * num_bins)) - 1;
  g = std::clamp(g, 0, num_bins - 1);
  while (g > 0 && confidence <= bin_edge(g, num_bins)) --g;
  while (g < num_bins - 1 && confidence > bin_edge(g + 1, num_bins)) ++g;
  return g;
}

namespace detail {

struct BinAccumulator {
  std::size_t count = 0;
  std::size_t correct = 0;
  double confidence_sum = 0.0;

  void add(const PredictionRecord& r) {
    ++count;
    correct += r.correct() ? 1 : 0;
    confidence_sum += r.confidence;
  }
  double accuracy() const { return static_cast<double>(correct) / static_cast<double>(count); }
  double mean_confidence() const { return confidence_sum / static_cast<double>(count); }
  double gap() const { return std::abs(accuracy() - mean_confidence()); }
};

inline void require_records(std::span<const PredictionRecord> records) {
  if (records.empty()) throw ValidationError("calibration metric of an empty record set");
}

// Equal-width confidence binning of the records named by `members`, visited
// in the given order.
inline std::vector<BinAccumulator> bin_by_confidence(std::span<const PredictionRecord> records,
                                                     std::span<const std::size_t> members,
                                                     int num_bins) {
  std::vector<BinAccumulator> bins(static_cast<std::size_t>(num_bins));
  for (std::size_t i : members) {
    bins[static_cast<std::size_t>(confidence_bin(records[i].confidence, num_bins))].add(records[i]);
  }
  return bins;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

// Weighted gap sum, Σ (|b|/N)·|acc(b) − conf(b)| over non-empty bins.
inline double weighted_gap(std::span<const BinAccumulator> bins, std::size_t total) {
  double e = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    e += static_cast<double>(b.count) / static_cast<double>(total) * b.gap();
  }
  return e;
}

// Splits `order` (already sorted by the binning key) into `groups` contiguous
// chunks whose sizes differ by at most one; larger chunks come first.
inline std::vector<std::vector<std::size_t>> equal_mass_groups(std::span<const std::size_t> order,
                                                               int groups) {
  const std::size_t n = order.size();
  const auto g = static_cast<std::size_t>(groups);
  std::vector<std::vector<std::size_t>> out(g);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < g; ++k) {
    const std::size_t size = n / g + (k < n % g ? 1 : 0);
    out[k].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                  order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return out;
}

}  // namespace detail

inline double compute_ece(std::span<const PredictionRecord> records, int num_bins = 10) {
  detail::require_records(records);
  require(num_bins >= 1, "number of bins must be positive");
  const auto members = detail::all_indices(records.size());
  const auto bins = detail::bin_by_confidence(records, members, num_bins);
  return detail::weighted_gap(bins, records.size());
}

inline double compute_mce(std::span<const PredictionRecord> records, int num_bins = 10) {
  detail::require_records(records);
  require(num_bins >= 1, "number of bins must be positive");
  const auto members = detail::all_indices(records.size());
  double worst = 0.0;
  for (const auto& b : detail::bin_by_confidence(records, members, num_bins)) {
    if (b.count > 0) worst = std::max(worst, b.gap());
  }
  return worst;
}

// Adaptive calibration error: equal-mass bins over records sorted by
// confidence (stable, so ties keep input order).
inline double compute_ace(std::span<const PredictionRecord> records, int num_bins = 10) {
  detail::require_records(records);
  require(num_bins >= 1, "number of bins must be positive");
  auto order = detail::all_indices(records.size());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return records[a].confidence < records[b].confidence;
  });
  std::vector<detail::BinAccumulator> bins;
  for (const auto& group : detail::equal_mass_groups(order, num_bins)) {
    detail::BinAccumulator acc;
    for (std::size_t i : group) acc.add(records[i]);
    bins.push_back(acc);
  }
  return detail::weighted_gap(bins, records.size());
}

// Proximity of each record: mean cosine similarity to its `neighbors`
// most similar other records (self excluded), looked up in `features` by id.
inline std::vector<double> compute_proximity(std::span<const PredictionRecord> records,
                                             const EmbeddingSet& features, int neighbors) {
  detail::require_records(records);
  require(neighbors >= 1, "proximity needs at least one neighbor");
  const std::size_t n = records.size();
  if (static_cast<std::size_t>(neighbors) >= n) {
    throw ValidationError("proximity neighbors (" + std::to_string(neighbors) +
                          ") must be fewer than the number of records (" + std::to_string(n) + ")");
  }
  std::vector<std::vector<double>> rows;
  rows.reserve(n);
  for (const auto& r : records) {
    auto idx = features.index_of(r.id);
    if (!idx) throw ValidationError("no feature for record '" + r.id + "'");
    auto v = features.row_f64(*idx);
    const double nv = norm2(std::span<const double>(v));
    if (nv == 0.0) throw NumericalError("zero feature for record '" + r.id + "'");
    for (auto& x : v) x /= nv;
    rows.push_back(std::move(v));
  }
  std::vector<double> proximity(n);
  std::vector<double> sims;
  sims.reserve(n - 1);
  const auto k = static_cast<std::size_t>(neighbors);
  for (std::size_t i = 0; i < n; ++i) {
    sims.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) sims.push_back(dot(std::span<const double>(rows[i]), std::span<const double>(rows[j])));
    }
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(),
                      std::greater<>());
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += sims[j];
    proximity[i] = s / static_cast<double>(k);
  }
  return proximity;
}

// PIECE from precomputed proximities: H equal-mass proximity bins, each
// split into G equal-width confidence bins. Members of a proximity bin are
// visited in input order, so H = 1 reproduces compute_ece bit for bit.
inline double compute_piece_from_proximity(std::span<const PredictionRecord> records,
                                           std::span<const double> proximity,
                                           const BinningConfig& cfg) {
  detail::require_records(records);
  cfg.validate();
  require(proximity.size() == records.size(), "one proximity per record required");
  auto order = detail::all_indices(records.size());
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return proximity[a] < proximity[b]; });
  std::vector<detail::BinAccumulator> joint;
  for (auto& group : detail::equal_mass_groups(order, cfg.num_proximity_bins)) {
    std::sort(group.begin(), group.end());
    auto bins = detail::bin_by_confidence(records, group, cfg.num_conf_bins);
    joint.insert(joint.end(), bins.begin(), bins.end());
  }
  return detail::weighted_gap(joint, records.size());
}

inline double compute_piece(std::span<const PredictionRecord> records, const BinningConfig& cfg,
                            const EmbeddingSet& features) {
  cfg.validate();
  const auto proximity = compute_proximity(records, features, cfg.proximity_neighbors);
  return compute_piece_from_proximity(records, proximity, cfg);
}

// One summary per equal-width bin, empty bins included.
inline std::vector<BinSummary> reliability_diagram(std::span<const PredictionRecord> records,
                                                   int num_bins = 10) {
  detail::require_records(records);
  require(num_bins >= 1, "number of bins must be positive");
  const auto members = detail::all_indices(records.size());
  const auto bins = detail::bin_by_confidence(records, members, num_bins);
  std::vector<BinSummary> out;
  out.reserve(bins.size());
  for (int g = 0; g < num_bins; ++g) {
    const auto& b = bins[static_cast<std::size_t>(g)];
    BinSummary s{bin_edge(g, num_bins), bin_edge(g + 1, num_bins), b.count, 0.0, 0.0};
    if (b.count > 0) {
      s.avg_confidence = b.mean_confidence();
      s.accuracy = b.accuracy();
    }
    out.push_back(s);
  }
  return out;
}

inline double accuracy(std::span<const PredictionRecord> records) {
  detail::require_records(records);
  std::size_t correct = 0;
  for (const auto& r : records) correct += r.correct() ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

inline double mean_confidence(std::span<const PredictionRecord> records) {
  detail::require_records(records);
  double s = 0.0;
  for (const auto& r : records) s += r.confidence;
  return s / static_cast<double>(records.size());
}

inline double harmonic_mean(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw ValidationError("harmonic mean needs positive inputs");
  return 2.0 * a * b / (a + b);
}

inline double arithmetic_mean(double a, double b) { return 0.5 * (a + b); }

inline void write_reliability_csv(std::ostream& os, std::span<const BinSummary> bins) {
  os << "lo,hi,count,avg_conf,accuracy\n";
  os.precision(17);
  for (const auto& b : bins) {
    os << b.lo << ',' << b.hi << ',' << b.count << ',' << b.avg_confidence << ',' << b.accuracy << '\n';
  }
}

inline nlohmann::json metric_row(const std::string& metric, const std::string& split, double value,
                                 const nlohmann::json& config) {
  return {{"metric", metric}, {"split", split}, {"value", value}, {"config", config}};
}

}  // namespace dorlab
