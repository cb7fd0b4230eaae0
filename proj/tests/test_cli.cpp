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

// Drives the built dorlab binary and checks exit codes and outputs.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(DORLAB_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dorlab_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Overrides that shrink the default world to a few milliseconds of work.
const std::string kSmall =
    " --synthetic.num_classes=4 --synthetic.dim=6 --synthetic.shots_per_class=6 --synthetic.eval_per_class=20"
    " --synthetic.vocabulary_size=200 --synthetic.shared_hidden=6 --synthetic.specific_scale=0.2"
    " --model.context_length=4 --model.token_dim=16 --model.hidden_dim=16 --train.epochs=3 --train.batch_size=8"
    " --selection.top_k=20 --fd.neighbors=1 --calibration_per_class=4";

}  // namespace

TEST(Cli, VersionAndHelp) {
  const auto v = run("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_FALSE(v.out.empty());
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
}

TEST(Cli, RunWritesReport) {
  const auto d = scratch("run");
  const auto r = run("run --seed 2 --output_dir=" + d.string() + kSmall);
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("fine_tuned"), std::string::npos);
  std::ifstream is(d / "report.json");
  const auto j = json::parse(is);
  EXPECT_EQ(j.at("runs").size(), 1u);
  EXPECT_EQ(j.at("runs")[0].at("seed").get<int>(), 2);
  EXPECT_TRUE(fs::exists(d / "seed_2" / "train_log.jsonl"));
  fs::remove_all(d);
}

TEST(Cli, ConfigFileAndValidationErrors) {
  const auto d = scratch("config");
  std::ofstream(d / "bad.json") << R"({"train": {"lamda": 1}})";
  auto r = run("run --config " + (d / "bad.json").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("train.lamda"), std::string::npos) << r.out;
  EXPECT_EQ(run("run --config " + (d / "absent.json").string()).code, 1);
  EXPECT_EQ(run("run --train.lambda=-3").code, 1);
  EXPECT_EQ(run("run stray").code, 1);
  fs::remove_all(d);
}

TEST(Cli, RuntimeFailureExitsTwo) {
  // A word-specific scale this large cannot be realized inside tanh's range.
  const auto d = scratch("runtime");
  const auto r = run("run --seed 1 --output_dir=" + d.string() + kSmall + " --synthetic.specific_scale=50");
  EXPECT_EQ(r.code, 2) << r.out;
  EXPECT_NE(r.out.find("seed 1"), std::string::npos) << r.out;
  fs::remove_all(d);
}

TEST(Cli, ProvePassesAndNegativeControlFails) {
  const auto d = scratch("prove");
  const auto ok = run("prove --samples 100000 --out " + (d / "p.json").string());
  EXPECT_EQ(ok.code, 0) << ok.out;
  std::ifstream is(d / "p.json");
  EXPECT_TRUE(json::parse(is).at("passed").get<bool>());
  EXPECT_EQ(run("prove --samples 100000 --density-scale 0.5").code, 3);
  EXPECT_EQ(run("prove --samples 10").code, 1);
  fs::remove_all(d);
}

TEST(Cli, AblateWritesOneRowPerGridPointModelAndSplit) {
  const auto d = scratch("ablate");
  const auto csv = d / "grid.csv";
  const auto r = run("ablate --param lambda --values 0,8 --out " + csv.string() + " --seed 1" + kSmall);
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream is(csv);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 1 + 2 * 2 * 2);
  EXPECT_EQ(run("ablate --param K --values many --out " + csv.string() + kSmall).code, 1);
  fs::remove_all(d);
}

TEST(Cli, PoolBuildAndInspect) {
  const auto d = scratch("pool");
  const auto prefix = (d / "pool").string();
  const auto b = run("pool build --out " + prefix + " --seed 1" + kSmall);
  ASSERT_EQ(b.code, 0) << b.out;
  const auto i = run("pool inspect " + prefix + " --head 3");
  EXPECT_EQ(i.code, 0) << i.out;
  EXPECT_NE(i.out.find("K 20"), std::string::npos) << i.out;
  EXPECT_EQ(run("pool inspect " + (d / "absent").string()).code, 1);
  fs::remove_all(d);
}

TEST(Cli, DiagnoseWritesCsvs) {
  const auto d = scratch("diagnose");
  const auto r = run("diagnose --out " + d.string() + " --seed 1" + kSmall + " --train.epochs=1");
  ASSERT_EQ(r.code, 0) << r.out;
  for (const char* f : {"fd.csv", "confidence_histogram.csv", "logit_gap.csv", "probabilities.csv", "fd_vs_lambda.csv"}) {
    EXPECT_TRUE(fs::exists(d / f)) << f;
  }
  fs::remove_all(d);
}

TEST(Cli, MetricsScoresAPredictionDump) {
  const auto d = scratch("metrics");
  {
    std::ofstream os(d / "p.jsonl");
    os << R"({"probs": [0.9, 0.1], "truth": 0, "id": "a"})" << '\n'
       << R"({"probs": [0.8, 0.2], "truth": 1, "id": "b"})" << '\n';
  }
  const auto r = run("metrics --predictions " + (d / "p.jsonl").string() + " --bins 10");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("count").get<int>(), 2);
  EXPECT_DOUBLE_EQ(j.at("accuracy").get<double>(), 0.5);
  // 0.9 lands in (0.8, 0.9] and 0.8 in (0.7, 0.8]; gaps 0.1 and 0.8.
  EXPECT_NEAR(j.at("ece").get<double>(), 0.45, 1e-12);
  {
    std::ofstream os(d / "bad.jsonl");
    os << R"({"probs": [0.9, 0.3], "truth": 0})" << '\n';
  }
  const auto bad = run("metrics --predictions " + (d / "bad.jsonl").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("bad.jsonl:1"), std::string::npos) << bad.out;
  fs::remove_all(d);
}
