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

// Experiment runner: configuration, data loading, backbone pretraining, the
// three fine-tuning modes and evaluation. The CLI verbs live in commands.h.

#ifndef DPLORA_RUNNER_H_
#define DPLORA_RUNNER_H_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dplora/corpus.h"
#include "dplora/dp.h"
#include "dplora/metrics.h"
#include "dplora/model.h"

namespace dplora {

enum class TrainMode { kFullFt, kLora, kDpLora };

std::string mode_name(TrainMode mode);
TrainMode parse_mode(std::string_view name);

struct RunConfig {
  TrainMode mode = TrainMode::kDpLora;
  ModelConfig model;

  // LoRA. `rank` stays empty unless set explicitly; lora modes then use 4.
  std::optional<std::size_t> rank;
  double lora_scale = 1.0;
  bool train_head = true;
  bool lora_ffn = false;

  // Optimisation.
  double learning_rate = 0.5;
  std::size_t epochs = 10;
  double expected_batch = 64.0;  // q = expected_batch / n
  double mlm_weight = 0.0;       // auxiliary masked-suffix loss
  double mask_fraction = 0.3;
  unsigned threads = 1;

  // Privacy (dp-lora only).
  double epsilon = 1.0;
  double clip_norm = 1.0;

  double threshold = 0.5;
  std::uint64_t seed = 1;

  // Sweep axes.
  std::vector<double> epsilons{0.01, 0.1, 1.0, 10.0};
  std::vector<std::size_t> ranks{1, 2, 4, 8};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  // Backbone pretraining.
  std::size_t pretrain_epochs = 4;
  double pretrain_learning_rate = 3e-3;
  double pretrain_mask_rate = 0.15;
  std::size_t max_vocab = 2048;

  // Paths.
  std::string corpus;
  std::string manifest;
  std::string vocab;
  std::string backbone;  // checkpoint; empty means a fresh random backbone
  std::string out_dir = "out";

  std::size_t effective_rank() const { return rank.value_or(4); }

  // Throws ConfigError on contradictory settings.
  void validate() const;

  std::string to_json() const;
  // Fields absent from `text` keep their defaults.
  static RunConfig from_json(const std::string& text);
  // FNV-1a over the canonical JSON minus the output directory.
  std::string hash() const;
};

struct Dataset {
  LabelSchema schema;
  Vocabulary vocab;
  std::vector<ReportRecord> records;
  SplitManifest manifest;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

// Examples for every split in the manifest, tokenised with `vocab`.
Dataset make_dataset(std::vector<ReportRecord> records, SplitManifest manifest, Vocabulary vocab,
                     std::size_t max_seq_len);
// Loads corpus and manifest; the vocabulary comes from `vocab_path` when
// given, otherwise it is built from the training split.
Dataset load_dataset(const std::string& corpus_path, const std::string& manifest_path,
                     const std::string& vocab_path, std::size_t max_vocab,
                     std::size_t max_seq_len);

// Infers the label schema from the label width of the records.
const LabelSchema& schema_for_width(std::size_t n_labels);

struct PretrainOptions {
  std::size_t epochs = 4;
  double learning_rate = 3e-3;
  double mask_rate = 0.15;
  double expected_batch = 32.0;
  std::uint64_t seed = 1;
};

// Masked-token pretraining of a fresh backbone on `sequences` with Adam,
// every weight trainable. Each step masks a random mask_rate share (at least
// one) of every sequence's content tokens.
ModelParams pretrain_backbone(const ModelConfig& config,
                              std::span<const std::vector<std::int32_t>> sequences,
                              const PretrainOptions& options);

// N x L sigmoid probabilities.
Tensor predict_probabilities(const ModelParams& params, std::span<const Example> examples);
MetricsReport evaluate(const ModelParams& params, std::span<const Example> examples,
                       double threshold = 0.5);

struct TrainOutcome {
  ModelParams params;
  MetricsReport metrics;  // on the test split
  std::vector<DPStepReport> steps;
  PrivacySpec spec;
  std::size_t steps_taken = 0;
};

using StepCallback = std::function<void(const DPStepReport&)>;

// Fine-tunes a copy of `backbone` per cfg.mode on data.train and evaluates
// on data.test. Random streams derive from `seed`: adapter init, batch
// sampling, noise and auxiliary masks are independent children.
TrainOutcome train_and_evaluate(const RunConfig& cfg, const ModelParams& backbone,
                                const Dataset& data, std::uint64_t seed,
                                const StepCallback& on_step = {});

// Builds the fine-tuning starting point: the loaded backbone with a fresh
// classification head sized for the schema, or a random model when
// cfg.backbone is empty.
ModelParams prepare_backbone(const RunConfig& cfg, const Dataset& data);

}  // namespace dplora

#endif  // DPLORA_RUNNER_H_
