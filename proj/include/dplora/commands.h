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

// The CLI verbs as library functions. Each writes its outputs under the
// paths it is given and throws on any failure; the CLI maps exceptions to a
// non-zero exit status.
//
// Every CSV output starts with "# config_hash=<hex>" comment lines; JSON
// outputs carry a "config_hash" field.

#ifndef DPLORA_COMMANDS_H_
#define DPLORA_COMMANDS_H_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dplora/corpus.h"
#include "dplora/metrics.h"
#include "dplora/runner.h"

namespace dplora {

struct GenOptions {
  std::string schema = "mimic14";
  std::size_t patients = 2000;
  std::uint64_t seed = 7;
  std::vector<double> ratios{0.8, 0.1, 0.1};
  std::size_t min_reports = 1;
  std::size_t max_reports = 3;
  std::vector<double> prevalences;  // empty: schema default
  std::string corpus_out = "corpus.jsonl";
  std::string manifest_out = "manifest.json";
  bool force = false;
};

// Generates, dedups and splits a synthetic corpus. Refuses to overwrite
// existing outputs unless force is set.
void cmd_gen(const GenOptions& options);

struct PretrainCommandOptions {
  std::string corpus;            // every record is used
  std::string vocab_out = "vocab.txt";
  std::string backbone_out = "backbone.json";
  bool force = false;
};

// Builds the vocabulary of `corpus` and pretrains a backbone on it with the
// config's model and pretrain_* settings.
void cmd_pretrain(const RunConfig& cfg, const PretrainCommandOptions& options);

// Fine-tunes per cfg.mode and writes into cfg.out_dir:
//   checkpoint.json, steps.jsonl, metrics.json, metrics.csv,
//   privacy_report.json, config.json
MetricsReport cmd_train(const RunConfig& cfg);

// Evaluates a checkpoint on one split; writes eval_metrics.json/.csv into
// cfg.out_dir.
MetricsReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                       const std::string& split = "test");

// Runs the epsilon x rank x seed grid (axes collapse to "none"/0 where the
// mode ignores them). Appends one row per finished run to sweep_runs.csv and
// skips runs already present; rewrites sweep_summary.csv (mean and std over
// seeds per cell) at the end. Throws ConfigError when sweep_runs.csv was
// produced under a different config hash.
void cmd_sweep(const RunConfig& cfg);

struct ProbeCommandOptions {
  std::vector<std::pair<std::string, std::string>> checkpoints;  // tag, path
  std::size_t items = 100;
  std::string split = "train";
  std::uint64_t seed = 1;
  // Checkpoint whose encoder embeds every model's texts; empty means each
  // model uses its own encoder.
  std::string embedder;
};

// Needs at least two checkpoints. Writes probe_table.csv and
// probe_summary.csv into cfg.out_dir.
void cmd_probe(const RunConfig& cfg, const ProbeCommandOptions& options);

// Parses "tag=path".
std::pair<std::string, std::string> parse_tagged_path(const std::string& spec);

}  // namespace dplora

#endif  // DPLORA_COMMANDS_H_
