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

#include "dplora/commands.h"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dplora/checkpoint.h"
#include "dplora/errors.h"
#include "dplora/probe.h"
#include "dplora/util.h"
#include "json.hpp"

namespace dplora {

using ojson = nlohmann::ordered_json;

namespace {

std::string join_path(const std::string& dir, const std::string& name) {
  if (dir.empty()) return name;
  return dir.back() == '/' ? dir + name : dir + "/" + name;
}

std::string hash_header(const std::string& config_hash) {
  return "# config_hash=" + config_hash + "\n";
}

std::string with_hash(const std::string& json_text, const std::string& config_hash) {
  ojson j = ojson::parse(json_text);
  j["config_hash"] = config_hash;
  return j.dump(2) + "\n";
}

void refuse_overwrite(const std::string& path, bool force) {
  if (!force && file_exists(path)) {
    throw ConfigError("'" + path + "' exists; pass --force to overwrite");
  }
}

// Applies the backbone's architecture to the config so the data is
// tokenised to the backbone's sequence length.
RunConfig with_backbone_model(const RunConfig& cfg) {
  RunConfig out = cfg;
  if (!cfg.backbone.empty()) out.model = load_checkpoint(cfg.backbone).params.config();
  return out;
}

std::string epsilon_label(const RunConfig& cfg) {
  return cfg.mode == TrainMode::kDpLora ? format_double(cfg.epsilon) : "none";
}

std::size_t rank_label(const RunConfig& cfg) {
  return cfg.mode == TrainMode::kFullFt ? 0 : cfg.effective_rank();
}

std::string run_id(const RunConfig& cfg) {
  return mode_name(cfg.mode) + "-e" + epsilon_label(cfg) + "-r" + std::to_string(rank_label(cfg)) +
         "-s" + std::to_string(cfg.seed);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream in(line);
  std::string field;
  while (std::getline(in, field, ',')) out.push_back(field);
  return out;
}

}  // namespace

std::pair<std::string, std::string> parse_tagged_path(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size()) {
    throw ConfigError("expected tag=path, got '" + spec + "'");
  }
  return {spec.substr(0, eq), spec.substr(eq + 1)};
}

void cmd_gen(const GenOptions& options) {
  refuse_overwrite(options.corpus_out, options.force);
  refuse_overwrite(options.manifest_out, options.force);
  SyntheticOptions so;
  so.schema = parse_schema(options.schema);
  so.n_patients = options.patients;
  so.seed = options.seed;
  so.min_reports = options.min_reports;
  so.max_reports = options.max_reports;
  so.prevalences = options.prevalences;
  const auto records = dedup(generate_synthetic_corpus(so));
  const auto manifest = split_by_patient(records, options.ratios, options.seed);
  write_file(options.corpus_out, corpus_to_jsonl(records));
  write_file(options.manifest_out, manifest.to_json());
}

void cmd_pretrain(const RunConfig& cfg, const PretrainCommandOptions& options) {
  refuse_overwrite(options.vocab_out, options.force);
  refuse_overwrite(options.backbone_out, options.force);
  if (options.corpus.empty()) throw ConfigError("pretrain: a corpus path is required");
  const auto records = dedup(corpus_from_jsonl(read_file(options.corpus)));
  if (records.empty()) throw DataError("pretrain: corpus is empty");
  std::vector<std::string> texts;
  for (const auto& r : records) texts.push_back(model_text(aggregate_patient_text({&r, 1})));
  const auto vt = build_vocab_and_tokenize(texts, cfg.max_vocab, cfg.model.max_seq_len);
  ModelConfig mc = cfg.model;
  mc.vocab_size = vt.vocab.size();
  mc.n_labels = records.front().raw_labels.size();
  PretrainOptions po;
  po.epochs = cfg.pretrain_epochs;
  po.learning_rate = cfg.pretrain_learning_rate;
  po.mask_rate = cfg.pretrain_mask_rate;
  po.seed = cfg.seed;
  const ModelParams backbone = pretrain_backbone(mc, vt.sequences, po);
  write_file(options.vocab_out, vt.vocab.to_text());
  save_checkpoint(options.backbone_out, backbone, "backbone",
                  {{"config_hash", cfg.hash()},
                   {"vocab_fingerprint", hex64(vt.vocab.fingerprint())},
                   {"role", "backbone"}});
}

MetricsReport cmd_train(const RunConfig& raw_cfg) {
  raw_cfg.validate();
  const RunConfig cfg = with_backbone_model(raw_cfg);
  const std::string hash = raw_cfg.hash();
  const Dataset data =
      load_dataset(cfg.corpus, cfg.manifest, cfg.vocab, cfg.max_vocab, cfg.model.max_seq_len);
  const ModelParams backbone = prepare_backbone(cfg, data);

  const std::string steps_path = join_path(cfg.out_dir, "steps.jsonl");
  write_file(steps_path, ojson{{"format", "dplora.steps.v1"}, {"config_hash", hash}}.dump() + "\n");
  std::ofstream steps(steps_path, std::ios::app);
  const TrainOutcome out = train_and_evaluate(
      cfg, backbone, data, cfg.seed,
      [&steps](const DPStepReport& r) { steps << r.to_json_line() << '\n'; });
  steps.close();

  save_checkpoint(join_path(cfg.out_dir, "checkpoint.json"), out.params, run_id(cfg),
                  {{"config_hash", hash},
                   {"vocab_fingerprint", hex64(data.vocab.fingerprint())},
                   {"mode", mode_name(cfg.mode)},
                   {"epsilon", epsilon_label(cfg)},
                   {"rank", std::to_string(rank_label(cfg))},
                   {"seed", std::to_string(cfg.seed)}});
  write_file(join_path(cfg.out_dir, "metrics.json"),
             with_hash(out.metrics.to_text(data.schema.labels), hash));
  write_file(join_path(cfg.out_dir, "metrics.csv"),
             hash_header(hash) + MetricsReport::csv_header(data.schema.labels.size()) + "\n" +
                 out.metrics.csv_row(run_id(cfg), epsilon_label(cfg), rank_label(cfg), cfg.seed) +
                 "\n");
  write_file(join_path(cfg.out_dir, "privacy_report.json"),
             with_hash(privacy_report(out.spec, out.steps_taken).to_text(), hash));
  write_file(join_path(cfg.out_dir, "config.json"), raw_cfg.to_json());
  return out.metrics;
}

MetricsReport cmd_eval(const RunConfig& cfg, const std::string& checkpoint,
                       const std::string& split) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(cfg.corpus, cfg.manifest, cfg.vocab, cfg.max_vocab,
                                    ck.params.config().max_seq_len);
  auto fp = ck.meta.find("vocab_fingerprint");
  if (fp != ck.meta.end() && fp->second != hex64(data.vocab.fingerprint())) {
    throw ConfigError("checkpoint '" + checkpoint + "' was trained with a different vocabulary");
  }
  const std::vector<Example>* examples = split == "train" ? &data.train
                                         : split == "val" ? &data.val
                                         : split == "test" ? &data.test
                                                           : nullptr;
  if (!examples || examples->empty()) throw ConfigError("split '" + split + "' is empty or unknown");
  const MetricsReport report = evaluate(ck.params, *examples, cfg.threshold);
  const std::string hash = cfg.hash();
  write_file(join_path(cfg.out_dir, "eval_metrics.json"),
             with_hash(report.to_text(data.schema.labels), hash));
  auto meta = [&ck](const char* key, const std::string& fallback) {
    auto it = ck.meta.find(key);
    return it == ck.meta.end() ? fallback : it->second;
  };
  write_file(join_path(cfg.out_dir, "eval_metrics.csv"),
             hash_header(hash) + MetricsReport::csv_header(data.schema.labels.size()) + "\n" +
                 report.csv_row(ck.tag, meta("epsilon", "none"),
                                std::stoul(meta("rank", "0")),
                                std::stoull(meta("seed", "0"))) +
                 "\n");
  return report;
}

void cmd_sweep(const RunConfig& raw_cfg) {
  raw_cfg.validate();
  if (raw_cfg.seeds.empty()) throw ConfigError("sweep: the seed list is empty");
  if (raw_cfg.mode == TrainMode::kDpLora && raw_cfg.epsilons.empty()) {
    throw ConfigError("sweep: the epsilon list is empty");
  }
  if (raw_cfg.mode != TrainMode::kFullFt && raw_cfg.ranks.empty()) {
    throw ConfigError("sweep: the rank list is empty");
  }
  const RunConfig cfg = with_backbone_model(raw_cfg);
  const std::string hash = raw_cfg.hash();
  const std::string runs_path = join_path(cfg.out_dir, "sweep_runs.csv");
  const Dataset data =
      load_dataset(cfg.corpus, cfg.manifest, cfg.vocab, cfg.max_vocab, cfg.model.max_seq_len);
  const std::size_t n_labels = data.schema.labels.size();

  std::map<std::string, double> done;  // run_id -> weighted F1
  if (file_exists(runs_path)) {
    std::istringstream in(read_file(runs_path));
    std::string line;
    std::string found_hash;
    while (std::getline(in, line)) {
      if (line.rfind("# config_hash=", 0) == 0) {
        found_hash = line.substr(14);
        continue;
      }
      if (line.empty() || line[0] == '#' || line.rfind("run_id,", 0) == 0) continue;
      const auto fields = split_csv(line);
      if (fields.size() < 5) throw DataError("sweep: malformed row in " + runs_path);
      done[fields[0]] = std::stod(fields[4]);
    }
    if (found_hash != hash) {
      throw ConfigError("sweep: " + runs_path + " was produced with config hash " + found_hash +
                        ", current config hash is " + hash + "; refusing to mix results");
    }
  } else {
    write_file(runs_path, hash_header(hash) + MetricsReport::csv_header(n_labels) + "\n");
  }

  std::vector<std::optional<double>> eps_axis;
  if (cfg.mode == TrainMode::kDpLora) {
    for (double e : cfg.epsilons) eps_axis.emplace_back(e);
  } else {
    eps_axis.emplace_back(std::nullopt);
  }
  std::vector<std::optional<std::size_t>> rank_axis;
  if (cfg.mode == TrainMode::kFullFt) {
    rank_axis.emplace_back(std::nullopt);
  } else {
    for (auto r : cfg.ranks) rank_axis.emplace_back(r);
  }

  std::optional<ModelParams> backbone;
  std::string summary = hash_header(hash) + "epsilon,rank,n_seeds,mean_weighted_f1,std_weighted_f1\n";
  for (const auto& eps : eps_axis) {
    for (const auto& rank : rank_axis) {
      std::vector<double> scores;
      RunConfig cell = cfg;
      if (eps) cell.epsilon = *eps;
      cell.rank = rank;
      for (auto seed : cfg.seeds) {
        cell.seed = seed;
        const std::string id = run_id(cell);
        auto it = done.find(id);
        if (it == done.end()) {
          if (!backbone) backbone = prepare_backbone(cfg, data);
          const TrainOutcome out = train_and_evaluate(cell, *backbone, data, seed);
          std::ofstream runs(runs_path, std::ios::app);
          runs << out.metrics.csv_row(id, epsilon_label(cell), rank_label(cell), seed) << '\n';
          if (!runs) throw DataError("sweep: failed to append to " + runs_path);
          it = done.emplace(id, out.metrics.weighted_f1).first;
        }
        scores.push_back(it->second);
      }
      double mean = 0.0;
      for (double s : scores) mean += s;
      mean /= static_cast<double>(scores.size());
      double ss = 0.0;
      for (double s : scores) ss += (s - mean) * (s - mean);
      const double sd = scores.size() > 1 ? std::sqrt(ss / static_cast<double>(scores.size() - 1)) : 0.0;
      summary += epsilon_label(cell) + "," + std::to_string(rank_label(cell)) + "," +
                 std::to_string(scores.size()) + "," + format_double(mean) + "," +
                 format_double(sd) + "\n";
    }
  }
  write_file(join_path(cfg.out_dir, "sweep_summary.csv"), summary);
}

void cmd_probe(const RunConfig& cfg, const ProbeCommandOptions& options) {
  if (options.checkpoints.size() < 2) {
    throw ConfigError("probe: at least two tagged checkpoints are required");
  }
  std::vector<Checkpoint> checkpoints;
  std::set<std::string> tags;
  for (const auto& [tag, path] : options.checkpoints) {
    if (!tags.insert(tag).second) throw ConfigError("probe: duplicate tag '" + tag + "'");
    checkpoints.push_back(load_checkpoint(path));
  }
  const std::size_t max_len = checkpoints.front().params.config().max_seq_len;
  const Dataset data = load_dataset(cfg.corpus, cfg.manifest, cfg.vocab, cfg.max_vocab, max_len);
  const std::string fingerprint = hex64(data.vocab.fingerprint());
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    auto fp = checkpoints[i].meta.find("vocab_fingerprint");
    if ((fp != checkpoints[i].meta.end() && fp->second != fingerprint) ||
        checkpoints[i].params.config().vocab_size != data.vocab.size()) {
      throw ConfigError("probe: checkpoint '" + options.checkpoints[i].first +
                        "' does not match the vocabulary");
    }
  }
  const std::vector<Example>* examples = options.split == "train" ? &data.train
                                         : options.split == "val" ? &data.val
                                         : options.split == "test" ? &data.test
                                                                   : nullptr;
  if (!examples || examples->empty()) {
    throw ConfigError("probe: split '" + options.split + "' is empty or unknown");
  }
  std::vector<ProbeItem> pool;
  for (const auto& ex : *examples) pool.push_back({ex.patient_id, ex.tokens});
  const auto items = sample_probe_set(pool, options.items, options.seed);

  std::optional<Checkpoint> embedder;
  if (!options.embedder.empty()) embedder = load_checkpoint(options.embedder);
  std::vector<ProbeModel> models;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    models.push_back({options.checkpoints[i].first, &checkpoints[i].params});
  }
  const auto results =
      run_probe(models, items, cfg.mask_fraction, embedder ? &embedder->params : nullptr);

  std::vector<std::string> header{"config_hash=" + cfg.hash()};
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    header.push_back("model " + options.checkpoints[i].first + " content_hash=" +
                     checkpoints[i].content_hash);
  }
  if (embedder) header.push_back("embedder content_hash=" + embedder->content_hash);
  write_file(join_path(cfg.out_dir, "probe_table.csv"), probe_table_csv(results, header));
  write_file(join_path(cfg.out_dir, "probe_summary.csv"), probe_summary_csv(results, header));
}

}  // namespace dplora
