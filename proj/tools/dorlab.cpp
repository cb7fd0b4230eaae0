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

// dorlab command-line driver.
//
//   dorlab run      --config cfg.json [--seed N] [--train.lambda=4 ...]
//   dorlab ablate   --config cfg.json --param lambda --values 0,2,4,8 [--out table.csv]
//   dorlab diagnose --config cfg.json [--out dir]
//   dorlab prove    [--samples N] [--out report.json]
//   dorlab pool build   --config cfg.json --out prefix
//   dorlab pool inspect prefix
//   dorlab metrics  --predictions dump.jsonl [--bins 15] [--features prefix]
//
// Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a check failed.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dorlab/dorlab.hpp"

namespace {

using dorlab::json;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitCheckFailed = 3;

struct ConfigArgs {
  std::string path;
  std::optional<std::uint64_t> seed;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.path, "experiment config (JSON); defaults apply when omitted");
  cmd->add_option("--seed", a.seed, "run a single repeat seed; every nested seed follows it");
  cmd->allow_extras();
}

// "--a.b=value" extras become config overrides.
std::vector<std::pair<std::string, json>> overrides_from(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, json>> out;
  for (const auto& arg : extras) {
    if (arg.rfind("--", 0) != 0 || arg.find('=') == std::string::npos) {
      throw dorlab::ValidationError("unexpected argument '" + arg + "' (overrides look like --key=value)");
    }
    const auto eq = arg.find('=');
    out.emplace_back(arg.substr(2, eq - 2), dorlab::parse_override_value(arg.substr(eq + 1)));
  }
  return out;
}

json config_file(const ConfigArgs& a) {
  return a.path.empty() ? json::object() : dorlab::read_json_file(a.path);
}

dorlab::ExperimentConfig resolve(const ConfigArgs& a, const CLI::App* cmd) {
  return dorlab::resolve_config(config_file(a), overrides_from(cmd->remaining()), a.seed);
}

void print_summary(const dorlab::ExperimentReport& rep) {
  const auto row = [](const char* name, const dorlab::ModelMetrics& m) {
    std::printf("%-11s base acc %.4f conf %.4f ece %.4f | new acc %.4f conf %.4f ece %.4f | fd %.4f\n", name,
                m.base.accuracy, m.base.confidence, m.base.ece, m.novel.accuracy, m.novel.confidence, m.novel.ece,
                m.fd_all);
  };
  row("zero_shot", rep.zero_shot_mean);
  row("fine_tuned", rep.fine_tuned_mean);
}

int cmd_run(const ConfigArgs& a, const CLI::App* cmd) {
  const auto cfg = resolve(a, cmd);
  const auto rep = dorlab::run_base_to_new(cfg);
  dorlab::write_report(rep, cfg.output_dir);
  print_summary(rep);
  std::printf("report written to %s/report.json\n", cfg.output_dir.c_str());
  return kExitOk;
}

std::vector<json> parse_values(const std::string& csv) {
  std::vector<json> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(dorlab::parse_override_value(item));
  }
  return out;
}

int cmd_ablate(const ConfigArgs& a, const CLI::App* cmd, const std::string& param, const std::string& values,
               std::string out) {
  const auto rows = dorlab::run_ablation(config_file(a), param, parse_values(values), overrides_from(cmd->remaining()));
  if (out.empty()) out = rows.front().report.config.output_dir + "/ablation_" + param + ".csv";
  std::ostringstream os;
  dorlab::write_ablation_csv(os, rows);
  dorlab::detail::write_file_atomic(out, os.str());
  std::printf("%zu grid points written to %s\n", rows.size(), out.c_str());
  return kExitOk;
}

int cmd_diagnose(const ConfigArgs& a, const CLI::App* cmd, std::string out) {
  const auto cfg = resolve(a, cmd);
  if (out.empty()) out = cfg.output_dir + "/diagnostics";
  for (const auto& p : dorlab::emit_diagnostics(cfg, out)) std::printf("%s\n", p.string().c_str());
  return kExitOk;
}

int cmd_prove(std::int64_t samples, std::uint64_t seed, double density_scale, const std::string& out) {
  dorlab::theory::PropositionCheckConfig cfg;
  cfg.mc_samples = samples;
  cfg.seed = seed;
  cfg.quadrature.density_sigma_scale = density_scale;
  const auto rep = dorlab::theory::check_proposition(cfg);
  const auto j = dorlab::theory::to_json(rep);
  if (!out.empty()) dorlab::detail::write_file_atomic(out, j.dump(2) + "\n");
  for (const auto& r : rep.rows) {
    std::printf("sigma %-5g quadrature %.10f  mc %.6f ± %.6f  shifted %.6f  %s\n", r.sigma, r.quadrature,
                r.mc_zero_mean.estimate, r.mc_zero_mean.std_error, r.mc_shifted_mean.estimate,
                r.mc_agrees && r.mu_invariant ? "ok" : "FAIL");
  }
  std::printf("monotone %s, mc agreement %s, mean invariance %s\n", rep.monotone ? "yes" : "no",
              rep.mc_agreement ? "yes" : "no", rep.mu_invariance ? "yes" : "no");
  return rep.passed() ? kExitOk : kExitCheckFailed;
}

int cmd_pool_build(const ConfigArgs& a, const CLI::App* cmd, const std::string& out) {
  auto cfg = resolve(a, cmd);
  cfg = cfg.for_seed(cfg.repeat_seeds.front());
  const auto world = dorlab::build_world(cfg);
  const auto pool = dorlab::build_pool(world, cfg.selection);
  dorlab::save_pool(pool, out);
  std::printf("%zu outliers (%s, %s) written to %s.pool.json\n", pool.size(), std::string(dorlab::to_string(pool.mode)).c_str(),
              std::string(dorlab::to_string(pool.exclusion)).c_str(), out.c_str());
  return kExitOk;
}

int cmd_pool_inspect(const std::string& prefix, int head) {
  const auto pool = dorlab::load_pool(prefix);
  std::printf("K %zu  mode %s  exclusion %s  seed %llu\n", pool.size(), std::string(dorlab::to_string(pool.mode)).c_str(),
              std::string(dorlab::to_string(pool.exclusion)).c_str(), static_cast<unsigned long long>(pool.seed));
  for (std::size_t i = 0; i < pool.size() && i < static_cast<std::size_t>(head); ++i) {
    std::printf("%6zu  %-24s %.6f\n", i, pool.selected[i].word.c_str(), pool.selected[i].score);
  }
  return kExitOk;
}

int cmd_metrics(const std::string& path, int bins, const std::string& features, int neighbors) {
  std::ifstream is(path);
  if (!is) throw dorlab::MissingFileError("missing file " + path);
  std::vector<dorlab::PredictionRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      records.push_back(dorlab::make_record(j.at("probs").get<std::vector<double>>(), j.at("truth").get<int>(),
                                            j.value("id", std::to_string(lineno - 1))));
    } catch (const json::exception& e) {
      throw dorlab::ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const dorlab::ValidationError& e) {
      throw dorlab::ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  json out = {{"count", records.size()},
              {"accuracy", dorlab::accuracy(records)},
              {"confidence", dorlab::mean_confidence(records)},
              {"ece", dorlab::compute_ece(records, bins)},
              {"ace", dorlab::compute_ace(records, bins)},
              {"mce", dorlab::compute_mce(records, bins)}};
  if (!features.empty()) {
    dorlab::BinningConfig b;
    b.num_conf_bins = bins;
    b.proximity_neighbors = neighbors;
    out["piece"] = dorlab::compute_piece(records, b, dorlab::load_embedding_set(features));
  }
  std::printf("%s\n", out.dump(2).c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic outlier regularization lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", dorlab::artifact_version());

  ConfigArgs run_args;
  auto* run = app.add_subcommand("run", "train and evaluate one configuration over its repeat seeds");
  add_config_args(run, run_args);

  ConfigArgs ab_args;
  std::string ab_param, ab_values, ab_out;
  auto* ablate = app.add_subcommand("ablate", "run a one-parameter grid and write a CSV table");
  add_config_args(ablate, ab_args);
  ablate->add_option("--param", ab_param, "lambda, K, M, mode, interval or a dotted config key")->required();
  ablate->add_option("--values", ab_values, "comma-separated grid values")->required();
  ablate->add_option("--out", ab_out, "CSV path (default <output_dir>/ablation_<param>.csv)");

  ConfigArgs dg_args;
  std::string dg_out;
  auto* diagnose = app.add_subcommand("diagnose", "write plot-ready diagnostic CSVs");
  add_config_args(diagnose, dg_args);
  diagnose->add_option("--out", dg_out, "output directory (default <output_dir>/diagnostics)");

  std::int64_t pr_samples = 1000000;
  std::uint64_t pr_seed = 1;
  std::string pr_out;
  double pr_density_scale = 1.0;
  auto* prove = app.add_subcommand("prove", "check the expected-confidence proposition numerically");
  prove->add_option("--samples", pr_samples, "Monte Carlo samples per sigma");
  prove->add_option("--seed", pr_seed, "Monte Carlo seed");
  prove->add_option("--out", pr_out, "write the JSON report here");
  prove->add_option("--density-scale", pr_density_scale,
                    "scale sigma inside the quadrature density; anything but 1 is a negative control that must fail");

  auto* pool = app.add_subcommand("pool", "build or inspect outlier pools");
  pool->require_subcommand(1);
  ConfigArgs pb_args;
  std::string pb_out;
  auto* pool_build = pool->add_subcommand("build", "select a pool for the configured world");
  add_config_args(pool_build, pb_args);
  pool_build->add_option("--out", pb_out, "output prefix")->required();
  std::string pi_prefix;
  int pi_head = 20;
  auto* pool_inspect = pool->add_subcommand("inspect", "print a saved pool");
  pool_inspect->add_option("prefix", pi_prefix, "pool prefix")->required();
  pool_inspect->add_option("--head", pi_head, "entries to print");

  std::string mt_path, mt_features;
  int mt_bins = 10, mt_neighbors = 10;
  auto* metrics = app.add_subcommand("metrics", "score a JSONL prediction dump");
  metrics->add_option("--predictions", mt_path, "one {\"probs\": [...], \"truth\": k, \"id\": ...} per line")
      ->required();
  metrics->add_option("--bins", mt_bins, "confidence bins");
  metrics->add_option("--features", mt_features, "embedding set keyed by id; enables PIECE");
  metrics->add_option("--neighbors", mt_neighbors, "proximity neighbors for PIECE");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*run) return cmd_run(run_args, run);
    if (*ablate) return cmd_ablate(ab_args, ablate, ab_param, ab_values, ab_out);
    if (*diagnose) return cmd_diagnose(dg_args, diagnose, dg_out);
    if (*prove) return cmd_prove(pr_samples, pr_seed, pr_density_scale, pr_out);
    if (*pool_build) return cmd_pool_build(pb_args, pool_build, pb_out);
    if (*pool_inspect) return cmd_pool_inspect(pi_prefix, pi_head);
    if (*metrics) return cmd_metrics(mt_path, mt_bins, mt_features, mt_neighbors);
  } catch (const dorlab::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
