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

// Expected maximum softmax probability of a binary classifier whose two
// logits are i.i.d. N(mu, sigma^2). With Z = |z1 - z2| folded normal,
//
//   E[p_max] = ∫_0^∞ sigmoid(z) · exp(-z² / 4σ²) / sqrt(π σ²) dz,
//
// which is independent of mu and increasing in sigma. Two routes evaluate
// it: Monte Carlo over logit pairs and composite Gauss-Legendre quadrature.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "json.hpp"

#include "dorlab/common.hpp"

namespace dorlab::theory {

inline constexpr int kMinMonteCarloSamples = 10000;
inline constexpr int kMinQuadraturePoints = 64;
// Upper limit of integration in units of sigma. The folded density's tail
// mass beyond 12σ is erfc(6) ≈ 2e-17.
inline constexpr double kTruncationSigmas = 12.0;
// 1 - sigmoid(40) is about 4e-18.
inline constexpr double kSigmoidWidth = 40.0;

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct MonteCarloEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

// Mean and standard error of sigmoid(|z1 - z2|) over n i.i.d. pairs.
// The draw is split into fixed-size shards, each with its own derived
// generator, and merged in shard order.
inline MonteCarloEstimate expected_max_prob_mc(double sigma, double mu, std::int64_t n,
                                               std::uint64_t seed) {
  require(sigma > 0.0, "sigma must be positive");
  require(n >= kMinMonteCarloSamples, "Monte Carlo needs at least 1e4 samples");
  constexpr std::int64_t kShard = 1 << 16;
  double sum = 0.0, sum_sq = 0.0;
  for (std::int64_t start = 0, shard = 0; start < n; start += kShard, ++shard) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(shard));
    std::normal_distribution<double> normal(mu, sigma);
    const std::int64_t end = std::min(n, start + kShard);
    double s = 0.0, sq = 0.0;
    for (std::int64_t i = start; i < end; ++i) {
      const double z1 = normal(rng);
      const double z2 = normal(rng);
      const double p = sigmoid(std::abs(z1 - z2));
      s += p;
      sq += p * p;
    }
    sum += s;
    sum_sq += sq;
  }
  const double nn = static_cast<double>(n);
  const double mean = sum / nn;
  const double var = std::max(0.0, (sum_sq - nn * mean * mean) / (nn - 1.0));
  return {mean, std::sqrt(var / nn)};
}

namespace detail {

// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1], by Newton
// iteration on P_n from the usual cosine initial guesses.
inline void gauss_legendre(int n, std::vector<double>& nodes, std::vector<double>& weights) {
  nodes.assign(static_cast<std::size_t>(n), 0.0);
  weights.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = pk;
      }
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // Recompute the derivative at the converged node.
    double p0 = 1.0, p1 = x;
    for (int k = 2; k <= n; ++k) {
      const double pk = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
      p0 = p1;
      p1 = pk;
    }
    dp = n * (x * p1 - p0) / (x * x - 1.0);
    const double w = 2.0 / ((1.0 - x * x) * dp * dp);
    nodes[static_cast<std::size_t>(i)] = -x;
    nodes[static_cast<std::size_t>(n - 1 - i)] = x;
    weights[static_cast<std::size_t>(i)] = w;
    weights[static_cast<std::size_t>(n - 1 - i)] = w;
  }
}

inline constexpr int kPanelOrder = 16;

// Composite rule: `points` is rounded up to a multiple of the panel order,
// panels are equal-width on [a, b].
template <typename F>
double integrate(F&& f, double a, double b, int points) {
  static const auto rule = [] {
    std::pair<std::vector<double>, std::vector<double>> r;
    gauss_legendre(kPanelOrder, r.first, r.second);
    return r;
  }();
  const int panels = (points + kPanelOrder - 1) / kPanelOrder;
  const double h = (b - a) / panels;
  double total = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double lo = a + p * h;
    const double mid = lo + 0.5 * h;
    double s = 0.0;
    for (int k = 0; k < kPanelOrder; ++k) s += rule.second[k] * f(mid + 0.5 * h * rule.first[k]);
    total += 0.5 * h * s;
  }
  return total;
}

}  // namespace detail

struct QuadratureOptions {
  // Multiplies the sigma used inside the folded-normal density only. 1.0 is
  // the correct density; other values exist for mutation testing.
  double density_sigma_scale = 1.0;
};

inline double expected_max_prob_quadrature(double sigma, int points,
                                           const QuadratureOptions& opts = {}) {
  require(sigma > 0.0, "sigma must be positive");
  require(points >= kMinQuadraturePoints, "quadrature needs at least 64 points");
  require(opts.density_sigma_scale > 0.0, "density sigma scale must be positive");
  const double s = sigma * opts.density_sigma_scale;
  const double norm = 1.0 / std::sqrt(std::numbers::pi * s * s);
  auto integrand = [&](double z) { return sigmoid(z) * norm * std::exp(-z * z / (4.0 * s * s)); };
  // The sigmoid bends on a scale of 1 and the density on a scale of σ; for
  // large σ the bend gets its own interval so the panels resolve it.
  const double end = kTruncationSigmas * sigma;
  const double bend = std::min(end, kSigmoidWidth);
  double total = detail::integrate(integrand, 0.0, bend, points);
  if (end > bend) total += detail::integrate(integrand, bend, end, points);
  return total;
}

// dE[p_max]/dσ after the substitution u = z / (σ√2):
//   ∫_0^∞ 2u e^{-σ√2 u} / (1 + e^{-σ√2 u})² · e^{-u²/2} / √π du.
inline double expected_max_prob_derivative(double sigma, int points) {
  require(sigma > 0.0, "sigma must be positive");
  require(points >= kMinQuadraturePoints, "quadrature needs at least 64 points");
  const double c = sigma * std::numbers::sqrt2;
  auto integrand = [&](double u) {
    const double e = std::exp(-c * u);
    return 2.0 * u * e / ((1.0 + e) * (1.0 + e)) * std::exp(-0.5 * u * u) / std::sqrt(std::numbers::pi);
  };
  // u's density is a half standard normal; 12 units covers it.
  return detail::integrate(integrand, 0.0, kTruncationSigmas, points);
}

struct PropositionCheckConfig {
  std::vector<double> sigmas{0.5, 1.0, 2.0, 4.0, 8.0};
  // The mean compared against mu = 0 in the invariance check.
  double mu = 7.0;
  std::int64_t mc_samples = 1000000;
  int quadrature_points = 256;
  std::uint64_t seed = 1;
  QuadratureOptions quadrature{};

  void validate() const {
    require(!sigmas.empty(), "sigma grid must be non-empty");
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      require(sigmas[i] > 0.0, "sigmas must be positive");
      if (i > 0) require(sigmas[i] > sigmas[i - 1], "sigmas must be strictly increasing");
    }
    require(mc_samples >= kMinMonteCarloSamples, "mc_samples must be at least 1e4");
    require(quadrature_points >= kMinQuadraturePoints, "quadrature_points must be at least 64");
  }
};

struct SigmaRow {
  double sigma = 0.0;
  double quadrature = 0.0;
  double derivative = 0.0;
  MonteCarloEstimate mc_zero_mean;
  MonteCarloEstimate mc_shifted_mean;
  bool mc_agrees = false;
  bool mu_invariant = false;
};

struct PropositionReport {
  std::vector<SigmaRow> rows;
  bool monotone = false;
  bool derivative_positive = false;
  bool mc_agreement = false;
  bool mu_invariance = false;

  bool passed() const { return monotone && mc_agreement && mu_invariance; }
};

inline constexpr double kAgreementStderrs = 3.0;

inline PropositionReport check_proposition(const PropositionCheckConfig& cfg) {
  cfg.validate();
  PropositionReport report;
  report.monotone = true;
  report.derivative_positive = true;
  report.mc_agreement = true;
  report.mu_invariance = true;
  for (std::size_t i = 0; i < cfg.sigmas.size(); ++i) {
    SigmaRow row;
    row.sigma = cfg.sigmas[i];
    row.quadrature = expected_max_prob_quadrature(row.sigma, cfg.quadrature_points, cfg.quadrature);
    row.derivative = expected_max_prob_derivative(row.sigma, cfg.quadrature_points);
    row.mc_zero_mean = expected_max_prob_mc(row.sigma, 0.0, cfg.mc_samples, cfg.seed + 2 * i);
    row.mc_shifted_mean = expected_max_prob_mc(row.sigma, cfg.mu, cfg.mc_samples, cfg.seed + 2 * i + 1);
    row.mc_agrees = std::abs(row.mc_zero_mean.estimate - row.quadrature) <
                    kAgreementStderrs * row.mc_zero_mean.std_error;
    const double combined = std::hypot(row.mc_zero_mean.std_error, row.mc_shifted_mean.std_error);
    row.mu_invariant =
        std::abs(row.mc_zero_mean.estimate - row.mc_shifted_mean.estimate) < kAgreementStderrs * combined;
    if (i > 0) {
      const auto& prev = report.rows.back();
      if (!(row.quadrature > prev.quadrature)) report.monotone = false;
    }
    if (!(row.derivative > 0.0)) report.derivative_positive = false;
    report.mc_agreement = report.mc_agreement && row.mc_agrees;
    report.mu_invariance = report.mu_invariance && row.mu_invariant;
    report.rows.push_back(row);
  }
  return report;
}

inline nlohmann::json to_json(const PropositionReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"sigma", row.sigma},
                    {"quadrature", row.quadrature},
                    {"derivative", row.derivative},
                    {"mc_mean", row.mc_zero_mean.estimate},
                    {"mc_stderr", row.mc_zero_mean.std_error},
                    {"mc_shifted_mean", row.mc_shifted_mean.estimate},
                    {"mc_shifted_stderr", row.mc_shifted_mean.std_error},
                    {"mc_agrees", row.mc_agrees},
                    {"mu_invariant", row.mu_invariant}});
  }
  return {{"rows", rows},
          {"monotone", r.monotone},
          {"derivative_positive", r.derivative_positive},
          {"mc_agreement", r.mc_agreement},
          {"mu_invariance", r.mu_invariance},
          {"passed", r.passed()}};
}

}  // namespace dorlab::theory
