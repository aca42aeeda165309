//
// Copyright 2026 The dplora Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <string>

#include "doctest.h"
#include "dplora/commands.h"
#include "dplora/errors.h"
#include "dplora/util.h"

using namespace dplora;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) {
    path = fs::temp_directory_path() / ("dplora_cmd_" + name);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

std::size_t data_rows(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("run_id,", 0) == 0) continue;
    if (line.rfind("epsilon,", 0) == 0 || line.rfind("model_tag,", 0) == 0) continue;
    ++n;
  }
  return n;
}

GenOptions small_gen(const TempDir& dir) {
  GenOptions g;
  g.patients = 60;
  g.max_reports = 1;
  g.corpus_out = dir / "corpus.jsonl";
  g.manifest_out = dir / "manifest.json";
  return g;
}

RunConfig small_run(const TempDir& dir, const std::string& out) {
  RunConfig cfg;
  cfg.model.d_model = 8;
  cfg.model.n_heads = 2;
  cfg.model.n_layers = 1;
  cfg.model.d_ff = 16;
  cfg.model.max_seq_len = 32;
  cfg.epochs = 1;
  cfg.expected_batch = 16;
  cfg.corpus = dir / "corpus.jsonl";
  cfg.manifest = dir / "manifest.json";
  cfg.out_dir = dir / out;
  return cfg;
}

}  // namespace

TEST_CASE("run config validation and json") {
  RunConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  RunConfig bad = cfg;
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.clip_norm = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.rank = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  cfg.learning_rate = 0.25;
  cfg.rank = 2;
  cfg.epsilons = {0.5, 5.0};
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.hash() == cfg.hash());

  const RunConfig partial = RunConfig::from_json(R"({"epochs":3})");
  CHECK(partial.epochs == 3);
  CHECK(partial.learning_rate == RunConfig{}.learning_rate);
  CHECK_THROWS_AS(RunConfig::from_json(R"({"epohcs":3})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json("{not json"), ConfigError);
}

TEST_CASE("config hash ignores the output directory only") {
  RunConfig a;
  RunConfig b = a;
  b.out_dir = "elsewhere";
  CHECK(a.hash() == b.hash());
  b.seed = 99;
  CHECK(a.hash() != b.hash());
}

TEST_CASE("gen refuses to overwrite and reruns byte-identically") {
  TempDir dir("gen");
  GenOptions g = small_gen(dir);
  cmd_gen(g);
  const std::string corpus = read_file(g.corpus_out);
  const std::string manifest = read_file(g.manifest_out);
  CHECK_THROWS_AS(cmd_gen(g), ConfigError);
  g.force = true;
  cmd_gen(g);
  CHECK(read_file(g.corpus_out) == corpus);
  CHECK(read_file(g.manifest_out) == manifest);
  g.seed = 8;
  cmd_gen(g);
  CHECK(read_file(g.corpus_out) != corpus);
}

TEST_CASE("train writes every artifact and is deterministic") {
  TempDir dir("train");
  cmd_gen(small_gen(dir));
  RunConfig cfg = small_run(dir, "run1");
  const MetricsReport first = cmd_train(cfg);
  for (const char* leaf : {"checkpoint.json", "steps.jsonl", "metrics.json", "metrics.csv",
                           "privacy_report.json", "config.json"}) {
    CHECK_MESSAGE(file_exists(dir / (std::string("run1/") + leaf)), leaf);
  }
  cfg.out_dir = dir / "run2";
  const MetricsReport second = cmd_train(cfg);
  CHECK(first.weighted_f1 == second.weighted_f1);
  for (const char* leaf : {"checkpoint.json", "steps.jsonl", "metrics.csv"}) {
    CHECK(read_file(dir / (std::string("run1/") + leaf)) ==
          read_file(dir / (std::string("run2/") + leaf)));
  }

  const MetricsReport again =
      cmd_eval(cfg, dir / "run1/checkpoint.json", "test");
  CHECK(again.weighted_f1 == first.weighted_f1);
  CHECK_THROWS_AS(cmd_eval(cfg, dir / "run1/checkpoint.json", "bogus"), ConfigError);
}

TEST_CASE("zero epochs records no steps") {
  TempDir dir("zero");
  cmd_gen(small_gen(dir));
  RunConfig cfg = small_run(dir, "run");
  cfg.epochs = 0;
  cmd_train(cfg);
  const std::string steps = read_file(dir / "run/steps.jsonl");
  CHECK(std::count(steps.begin(), steps.end(), '\n') == 1);
  CHECK(steps.find("dplora.steps.v1") != std::string::npos);
}

TEST_CASE("sweep grid, resume and hash guard") {
  TempDir dir("sweep");
  cmd_gen(small_gen(dir));
  RunConfig cfg = small_run(dir, "sweep");
  cfg.epsilons = {0.1, 10.0};
  cfg.ranks = {1, 2};
  cfg.seeds = {1, 2};
  cmd_sweep(cfg);
  const std::string runs = read_file(dir / "sweep/sweep_runs.csv");
  const std::string summary = read_file(dir / "sweep/sweep_summary.csv");
  CHECK(data_rows(runs) == 8);
  CHECK(data_rows(summary) == 4);

  cmd_sweep(cfg);
  CHECK(read_file(dir / "sweep/sweep_runs.csv") == runs);
  CHECK(read_file(dir / "sweep/sweep_summary.csv") == summary);

  RunConfig other = cfg;
  other.learning_rate = 0.1;
  CHECK_THROWS_AS(cmd_sweep(other), ConfigError);

  RunConfig full = small_run(dir, "sweep_full");
  full.mode = TrainMode::kFullFt;
  full.seeds = {1, 2};
  cmd_sweep(full);
  CHECK(data_rows(read_file(dir / "sweep_full/sweep_runs.csv")) == 2);
}

TEST_CASE("probe needs two checkpoints and emits one row per item and model") {
  TempDir dir("probe");
  cmd_gen(small_gen(dir));
  RunConfig cfg = small_run(dir, "a");
  cmd_train(cfg);
  cfg.mode = TrainMode::kLora;
  cfg.out_dir = dir / "b";
  cmd_train(cfg);

  cfg.out_dir = dir / "probe";
  ProbeCommandOptions opt;
  opt.items = 5;
  opt.checkpoints = {{"dp", dir / "a/checkpoint.json"}};
  CHECK_THROWS_AS(cmd_probe(cfg, opt), ConfigError);
  opt.checkpoints.push_back({"lora", dir / "b/checkpoint.json"});
  cmd_probe(cfg, opt);
  const std::string table = read_file(dir / "probe/probe_table.csv");
  CHECK(data_rows(table) == 10);
  CHECK(data_rows(read_file(dir / "probe/probe_summary.csv")) == 2);
  cmd_probe(cfg, opt);
  CHECK(read_file(dir / "probe/probe_table.csv") == table);
}

TEST_CASE("tagged path parsing") {
  const auto [tag, path] = parse_tagged_path("np=out/a/checkpoint.json");
  CHECK(tag == "np");
  CHECK(path == "out/a/checkpoint.json");
  CHECK_THROWS_AS(parse_tagged_path("noequals"), ConfigError);
  CHECK_THROWS_AS(parse_tagged_path("=path"), ConfigError);
  CHECK_THROWS_AS(parse_tagged_path("tag="), ConfigError);
}
