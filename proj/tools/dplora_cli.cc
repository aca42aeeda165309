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

// dplora: command-line entry point.
//
//   dplora gen       synthetic corpus + patient-level split manifest
//   dplora pretrain  vocabulary + masked-token pretrained backbone
//   dplora train     fine-tune (full-ft, lora or dp-lora) and evaluate
//   dplora eval      evaluate a checkpoint on a split
//   dplora sweep     epsilon x rank x seed grid
//   dplora probe     memorisation probe over tagged checkpoints
//
// Settings come from an optional JSON config (--config) and are overridden
// by flags.

#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dplora/commands.h"
#include "dplora/errors.h"
#include "dplora/util.h"

namespace {

using dplora::RunConfig;

std::string find_config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--config") == 0 && i + 1 < argc) return argv[i + 1];
    if (std::strncmp(argv[i], "--config=", 9) == 0) return argv[i] + 9;
  }
  return "";
}

struct RunFlags {
  std::string mode;
  std::size_t rank = 0;
  bool no_train_head = false;
};

void add_run_options(CLI::App* cmd, RunConfig& cfg, RunFlags& flags) {
  cmd->add_option("--config", "JSON run configuration (flags override it)");
  cmd->add_option("--mode", flags.mode, "full-ft, lora or dp-lora")
      ->check(CLI::IsMember({"full-ft", "lora", "dp-lora"}));
  cmd->add_option("--corpus", cfg.corpus, "corpus JSONL");
  cmd->add_option("--manifest", cfg.manifest, "split manifest JSON");
  cmd->add_option("--vocab", cfg.vocab, "vocabulary file (default: built from the train split)");
  cmd->add_option("--backbone", cfg.backbone, "pretrained backbone checkpoint");
  cmd->add_option("--out", cfg.out_dir, "output directory")->capture_default_str();
  cmd->add_option("--rank", flags.rank, "LoRA rank (lora modes; default 4)");
  cmd->add_option("--lora-scale", cfg.lora_scale, "LoRA scale")->capture_default_str();
  cmd->add_flag("--frozen-head", flags.no_train_head, "keep the classification head frozen");
  cmd->add_flag("--lora-ffn", cfg.lora_ffn, "also adapt the feed-forward projections");
  cmd->add_option("--lr", cfg.learning_rate, "SGD learning rate")->capture_default_str();
  cmd->add_option("--epochs", cfg.epochs, "training epochs (0: evaluate only)")
      ->capture_default_str();
  cmd->add_option("--batch", cfg.expected_batch, "expected Poisson batch size")
      ->capture_default_str();
  cmd->add_option("--mlm-weight", cfg.mlm_weight, "weight of the masked-suffix auxiliary loss")
      ->capture_default_str();
  cmd->add_option("--mask-fraction", cfg.mask_fraction, "masked suffix fraction")
      ->capture_default_str();
  cmd->add_option("--threads", cfg.threads, "per-sample gradient threads")->capture_default_str();
  cmd->add_option("--epsilon", cfg.epsilon, "privacy budget (dp-lora)")->capture_default_str();
  cmd->add_option("--clip", cfg.clip_norm, "per-sample clipping norm C")->capture_default_str();
  cmd->add_option("--threshold", cfg.threshold, "decision threshold")->capture_default_str();
  cmd->add_option("--seed", cfg.seed, "run seed")->capture_default_str();
  cmd->add_option("--epsilons", cfg.epsilons, "sweep epsilon grid")->delimiter(',');
  cmd->add_option("--ranks", cfg.ranks, "sweep rank grid")->delimiter(',');
  cmd->add_option("--seeds", cfg.seeds, "sweep seeds")->delimiter(',');
  cmd->add_option("--max-seq-len", cfg.model.max_seq_len, "maximum sequence length")
      ->capture_default_str();
  cmd->add_option("--d-model", cfg.model.d_model, "model width")->capture_default_str();
  cmd->add_option("--n-heads", cfg.model.n_heads, "attention heads")->capture_default_str();
  cmd->add_option("--n-layers", cfg.model.n_layers, "encoder layers")->capture_default_str();
  cmd->add_option("--d-ff", cfg.model.d_ff, "feed-forward width")->capture_default_str();
  cmd->add_option("--dropout", cfg.model.dropout_rate, "dropout rate")->capture_default_str();
  cmd->add_option("--max-vocab", cfg.max_vocab, "vocabulary size cap")->capture_default_str();
  cmd->add_option("--pretrain-epochs", cfg.pretrain_epochs, "backbone pretraining epochs")
      ->capture_default_str();
  cmd->add_option("--pretrain-lr", cfg.pretrain_learning_rate, "backbone pretraining Adam rate")
      ->capture_default_str();
  cmd->add_option("--pretrain-mask-rate", cfg.pretrain_mask_rate, "pretraining mask rate")
      ->capture_default_str();
}

void apply_flags(CLI::App* cmd, RunConfig& cfg, const RunFlags& flags) {
  if (cmd->count("--mode")) cfg.mode = dplora::parse_mode(flags.mode);
  if (cmd->count("--rank")) cfg.rank = flags.rank;
  if (flags.no_train_head) cfg.train_head = false;
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig cfg;
  try {
    const std::string config_path = find_config_path(argc, argv);
    if (!config_path.empty()) cfg = RunConfig::from_json(dplora::read_file(config_path));
  } catch (const dplora::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  CLI::App app{"Differentially private LoRA fine-tuning for multi-label report classification"};
  app.require_subcommand(1);

  dplora::GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate a synthetic corpus and split manifest");
  gen_cmd->add_option("--schema", gen.schema, "mimic14 or ct18")
      ->check(CLI::IsMember({"mimic14", "ct18"}))
      ->capture_default_str();
  gen_cmd->add_option("--patients", gen.patients, "number of patients")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "generator and split seed")->capture_default_str();
  gen_cmd->add_option("--ratios", gen.ratios, "split ratios")->delimiter(',');
  gen_cmd->add_option("--min-reports", gen.min_reports, "reports per patient, minimum")
      ->capture_default_str();
  gen_cmd->add_option("--max-reports", gen.max_reports, "reports per patient, maximum")
      ->capture_default_str();
  gen_cmd->add_option("--prevalences", gen.prevalences, "per-label prevalence")->delimiter(',');
  gen_cmd->add_option("--corpus", gen.corpus_out, "corpus output path")->capture_default_str();
  gen_cmd->add_option("--manifest", gen.manifest_out, "manifest output path")
      ->capture_default_str();
  gen_cmd->add_flag("--force", gen.force, "overwrite existing outputs");

  RunFlags flags;
  dplora::PretrainCommandOptions pretrain;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "build a vocabulary and pretrain a backbone");
  add_run_options(pretrain_cmd, cfg, flags);
  pretrain_cmd->add_option("--vocab-out", pretrain.vocab_out, "vocabulary output")
      ->capture_default_str();
  pretrain_cmd->add_option("--backbone-out", pretrain.backbone_out, "backbone checkpoint output")
      ->capture_default_str();
  pretrain_cmd->add_flag("--force", pretrain.force, "overwrite existing outputs");

  auto* train_cmd = app.add_subcommand("train", "fine-tune and evaluate one model");
  add_run_options(train_cmd, cfg, flags);

  std::string checkpoint;
  std::string split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_run_options(eval_cmd, cfg, flags);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint to evaluate")->required();
  eval_cmd->add_option("--split", split, "train, val or test")->capture_default_str();

  auto* sweep_cmd = app.add_subcommand("sweep", "run the epsilon x rank x seed grid");
  add_run_options(sweep_cmd, cfg, flags);

  dplora::ProbeCommandOptions probe;
  std::vector<std::string> models;
  auto* probe_cmd = app.add_subcommand("probe", "memorisation probe over tagged checkpoints");
  add_run_options(probe_cmd, cfg, flags);
  probe_cmd->add_option("--model", models, "tag=checkpoint (repeat, at least two)")->required();
  probe_cmd->add_option("--items", probe.items, "probe set size")->capture_default_str();
  probe_cmd->add_option("--split", probe.split, "split the probe set is drawn from")
      ->capture_default_str();
  probe_cmd->add_option("--probe-seed", probe.seed, "probe set sampling seed")
      ->capture_default_str();
  probe_cmd->add_option("--embedder", probe.embedder,
                        "checkpoint whose encoder embeds all texts (default: each model's own)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      dplora::cmd_gen(gen);
      return 0;
    }
    for (auto* cmd : {pretrain_cmd, train_cmd, eval_cmd, sweep_cmd, probe_cmd}) {
      if (*cmd) apply_flags(cmd, cfg, flags);
    }
    if (*pretrain_cmd) {
      pretrain.corpus = cfg.corpus;
      dplora::cmd_pretrain(cfg, pretrain);
    } else if (*train_cmd) {
      const auto report = dplora::cmd_train(cfg);
      std::cout << "weighted_f1=" << dplora::format_double(report.weighted_f1) << "\n";
    } else if (*eval_cmd) {
      const auto report = dplora::cmd_eval(cfg, checkpoint, split);
      std::cout << "weighted_f1=" << dplora::format_double(report.weighted_f1) << "\n";
    } else if (*sweep_cmd) {
      dplora::cmd_sweep(cfg);
    } else if (*probe_cmd) {
      for (const auto& m : models) probe.checkpoints.push_back(dplora::parse_tagged_path(m));
      dplora::cmd_probe(cfg, probe);
    }
  } catch (const dplora::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
