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

#include "dplora/runner.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dplora/checkpoint.h"
#include "dplora/errors.h"
#include "dplora/probe.h"
#include "dplora/util.h"
#include "json.hpp"

namespace dplora {

using ojson = nlohmann::ordered_json;

namespace {

// Child streams of a run seed.
enum Stream : std::uint64_t {
  kLoraStream = 1,
  kHeadStream = 2,
  kSampleStream = 3,
  kNoiseStream = 4,
  kMaskStream = 5,
};

ojson model_json(const ModelConfig& c) { return ojson::parse(config_to_json(c)); }

template <typename T>
void read_field(const ojson& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::vector<std::size_t> content_positions(std::span<const std::int32_t> ids) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] >= kNumReservedIds || ids[i] == kUnkId) out.push_back(i);
  return out;
}

Tensor label_tensor(const Example& ex) {
  return Tensor::from({1, ex.labels.size()}, std::vector<double>(ex.labels));
}

std::size_t steps_per_epoch(std::size_t n, double expected_batch) {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(static_cast<double>(n) / expected_batch)));
}

}  // namespace

std::string mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::kFullFt:
      return "full-ft";
    case TrainMode::kLora:
      return "lora";
    case TrainMode::kDpLora:
      return "dp-lora";
  }
  return "?";
}

TrainMode parse_mode(std::string_view name) {
  if (name == "full-ft") return TrainMode::kFullFt;
  if (name == "lora") return TrainMode::kLora;
  if (name == "dp-lora") return TrainMode::kDpLora;
  throw ConfigError("unknown mode '" + std::string(name) + "' (expected full-ft, lora or dp-lora)");
}

void RunConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("run config: " + msg); };
  if (mode == TrainMode::kFullFt && rank) fail("mode full-ft does not take a LoRA rank");
  if (mode == TrainMode::kDpLora && !(epsilon > 0.0 && std::isfinite(epsilon))) {
    fail("mode dp-lora requires a finite epsilon > 0");
  }
  if (rank && *rank == 0) fail("rank must be at least 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (!(expected_batch >= 1.0)) fail("expected_batch must be at least 1");
  if (!(mlm_weight >= 0.0)) fail("mlm_weight must be non-negative");
  if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) fail("mask_fraction must lie in (0, 1)");
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (!(threshold >= 0.0 && threshold <= 1.0)) fail("threshold must lie in [0, 1]");
  if (!(lora_scale > 0.0)) fail("lora_scale must be positive");
  if (threads == 0) fail("threads must be at least 1");
  for (double e : epsilons)
    if (!(e > 0.0 && std::isfinite(e))) fail("every sweep epsilon must be finite and > 0");
  for (auto r : ranks)
    if (r == 0) fail("every sweep rank must be at least 1");
}

std::string RunConfig::to_json() const {
  ojson j;
  j["mode"] = mode_name(mode);
  j["model"] = model_json(model);
  j["rank"] = rank ? ojson(*rank) : ojson(nullptr);
  j["lora_scale"] = lora_scale;
  j["train_head"] = train_head;
  j["lora_ffn"] = lora_ffn;
  j["learning_rate"] = learning_rate;
  j["epochs"] = epochs;
  j["expected_batch"] = expected_batch;
  j["mlm_weight"] = mlm_weight;
  j["mask_fraction"] = mask_fraction;
  j["threads"] = threads;
  j["epsilon"] = epsilon;
  j["clip_norm"] = clip_norm;
  j["threshold"] = threshold;
  j["seed"] = seed;
  j["epsilons"] = epsilons;
  j["ranks"] = ranks;
  j["seeds"] = seeds;
  j["pretrain_epochs"] = pretrain_epochs;
  j["pretrain_learning_rate"] = pretrain_learning_rate;
  j["pretrain_mask_rate"] = pretrain_mask_rate;
  j["max_vocab"] = max_vocab;
  j["corpus"] = corpus;
  j["manifest"] = manifest;
  j["vocab"] = vocab;
  j["backbone"] = backbone;
  j["out_dir"] = out_dir;
  return j.dump(2) + "\n";
}

RunConfig RunConfig::from_json(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const ojson::exception& e) {
    throw ConfigError(std::string("config file is not valid JSON: ") + e.what());
  }
  static const std::vector<std::string> kKnown{
      "mode",        "model",         "rank",          "lora_scale",     "train_head",
      "lora_ffn",    "learning_rate", "epochs",        "expected_batch", "mlm_weight",
      "mask_fraction", "threads",     "epsilon",       "clip_norm",      "threshold",
      "seed",        "epsilons",      "ranks",         "seeds",          "pretrain_epochs",
      "pretrain_learning_rate", "pretrain_mask_rate", "max_vocab", "corpus", "manifest",
      "vocab",       "backbone",      "out_dir"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKnown.begin(), kKnown.end(), key) == kKnown.end()) {
      throw ConfigError("config file: unknown key '" + key + "'");
    }
  }
  RunConfig c;
  try {
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
    if (j.contains("model")) {
      const auto& m = j.at("model");
      read_field(m, "vocab_size", c.model.vocab_size);
      read_field(m, "max_seq_len", c.model.max_seq_len);
      read_field(m, "d_model", c.model.d_model);
      read_field(m, "n_heads", c.model.n_heads);
      read_field(m, "n_layers", c.model.n_layers);
      read_field(m, "d_ff", c.model.d_ff);
      read_field(m, "n_labels", c.model.n_labels);
      read_field(m, "dropout_rate", c.model.dropout_rate);
    }
    if (j.contains("rank") && !j.at("rank").is_null()) c.rank = j.at("rank").get<std::size_t>();
    read_field(j, "lora_scale", c.lora_scale);
    read_field(j, "train_head", c.train_head);
    read_field(j, "lora_ffn", c.lora_ffn);
    read_field(j, "learning_rate", c.learning_rate);
    read_field(j, "epochs", c.epochs);
    read_field(j, "expected_batch", c.expected_batch);
    read_field(j, "mlm_weight", c.mlm_weight);
    read_field(j, "mask_fraction", c.mask_fraction);
    read_field(j, "threads", c.threads);
    read_field(j, "epsilon", c.epsilon);
    read_field(j, "clip_norm", c.clip_norm);
    read_field(j, "threshold", c.threshold);
    read_field(j, "seed", c.seed);
    read_field(j, "epsilons", c.epsilons);
    read_field(j, "ranks", c.ranks);
    read_field(j, "seeds", c.seeds);
    read_field(j, "pretrain_epochs", c.pretrain_epochs);
    read_field(j, "pretrain_learning_rate", c.pretrain_learning_rate);
    read_field(j, "pretrain_mask_rate", c.pretrain_mask_rate);
    read_field(j, "max_vocab", c.max_vocab);
    read_field(j, "corpus", c.corpus);
    read_field(j, "manifest", c.manifest);
    read_field(j, "vocab", c.vocab);
    read_field(j, "backbone", c.backbone);
    read_field(j, "out_dir", c.out_dir);
  } catch (const ojson::exception& e) {
    throw ConfigError(std::string("config file: ") + e.what());
  }
  return c;
}

std::string RunConfig::hash() const {
  RunConfig copy = *this;
  copy.out_dir.clear();
  return hex64(fnv1a64(copy.to_json()));
}

// ---------------------------------------------------------------------------
// Data

const LabelSchema& schema_for_width(std::size_t n_labels) {
  for (Schema s : {Schema::kMimic14, Schema::kCt18}) {
    if (schema_info(s).labels.size() == n_labels) return schema_info(s);
  }
  throw DataError("no label schema has " + std::to_string(n_labels) + " labels");
}

Dataset make_dataset(std::vector<ReportRecord> records, SplitManifest manifest, Vocabulary vocab,
                     std::size_t max_seq_len) {
  if (records.empty()) throw DataError("corpus is empty");
  Dataset d{schema_for_width(records.front().raw_labels.size()), std::move(vocab),
            std::move(records), std::move(manifest), {}, {}, {}};
  for (const auto& name : d.manifest.split_names) {
    auto examples = build_examples(d.records, d.manifest, name, d.vocab, max_seq_len);
    if (name == "train") d.train = std::move(examples);
    else if (name == "val") d.val = std::move(examples);
    else if (name == "test") d.test = std::move(examples);
  }
  return d;
}

Dataset load_dataset(const std::string& corpus_path, const std::string& manifest_path,
                     const std::string& vocab_path, std::size_t max_vocab,
                     std::size_t max_seq_len) {
  if (corpus_path.empty() || manifest_path.empty()) {
    throw ConfigError("corpus and manifest paths are required");
  }
  auto records = dedup(corpus_from_jsonl(read_file(corpus_path)));
  auto manifest = SplitManifest::from_json(read_file(manifest_path));
  Vocabulary vocab = vocab_path.empty()
                         ? build_vocab(split_texts(records, manifest, "train"), max_vocab)
                         : Vocabulary::from_text(read_file(vocab_path));
  return make_dataset(std::move(records), std::move(manifest), std::move(vocab), max_seq_len);
}

// ---------------------------------------------------------------------------
// Pretraining

ModelParams pretrain_backbone(const ModelConfig& config,
                              std::span<const std::vector<std::int32_t>> sequences,
                              const PretrainOptions& options) {
  if (!(options.mask_rate > 0.0 && options.mask_rate < 1.0)) {
    throw ConfigError("pretrain: mask_rate must lie in (0, 1)");
  }
  std::vector<const std::vector<std::int32_t>*> usable;
  for (const auto& s : sequences)
    if (content_positions(s).size() >= 2) usable.push_back(&s);
  if (usable.empty()) throw DataError("pretrain: no sequence has two content tokens");

  ModelParams params = ModelParams::init(config, options.seed);
  const std::size_t n = usable.size();
  const double q = std::min(1.0, options.expected_batch / static_cast<double>(n));
  const std::size_t total = options.epochs * steps_per_epoch(n, options.expected_batch);
  std::vector<Tensor> trainable;
  for (auto& [name, t] : params.trainable()) trainable.push_back(t);
  std::vector<std::vector<double>> m1, m2;
  for (const auto& t : trainable) {
    m1.emplace_back(t.numel(), 0.0);
    m2.emplace_back(t.numel(), 0.0);
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  for (std::size_t step = 0; step < total; ++step) {
    Rng sample_rng = make_rng(derive_seed(options.seed, {kSampleStream, step}));
    const auto batch = poisson_sample(n, q, sample_rng);
    if (batch.empty()) continue;
    std::vector<std::vector<double>> grad_sum(trainable.size());
    for (std::size_t k = 0; k < trainable.size(); ++k) grad_sum[k].assign(trainable[k].numel(), 0.0);
    for (std::size_t i : batch) {
      const auto& ids = *usable[i];
      auto content = content_positions(ids);
      Rng rng = make_rng(derive_seed(options.seed, {kMaskStream, step, i}));
      for (std::size_t k = content.size(); k > 1; --k) std::swap(content[k - 1], content[rng() % k]);
      const auto n_mask = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::lround(options.mask_rate * content.size())));
      content.resize(n_mask);
      std::sort(content.begin(), content.end());
      std::vector<std::int32_t> masked(ids);
      for (auto p : content) masked[p] = kMaskId;
      const auto grads = compute_gradients(masked_lm_loss(params, masked, ids, content));
      for (std::size_t k = 0; k < trainable.size(); ++k) {
        auto it = grads.find(trainable[k].id());
        if (it == grads.end()) continue;
        for (std::size_t e = 0; e < it->second.size(); ++e) grad_sum[k][e] += it->second[e];
      }
    }
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(kBeta1, t), c2 = 1.0 - std::pow(kBeta2, t);
    for (std::size_t k = 0; k < trainable.size(); ++k) {
      Tensor handle = trainable[k];
      auto data = handle.mutable_data();
      for (std::size_t e = 0; e < data.size(); ++e) {
        const double g = grad_sum[k][e] * inv_b;
        m1[k][e] = kBeta1 * m1[k][e] + (1.0 - kBeta1) * g;
        m2[k][e] = kBeta2 * m2[k][e] + (1.0 - kBeta2) * g * g;
        data[e] -= options.learning_rate * (m1[k][e] / c1) / (std::sqrt(m2[k][e] / c2) + kAdamEps);
      }
    }
  }
  params.seed_lineage().push_back("pretrain:" + std::to_string(options.seed));
  return params;
}

// ---------------------------------------------------------------------------
// Evaluation and fine-tuning

Tensor predict_probabilities(const ModelParams& params, std::span<const Example> examples) {
  if (examples.empty()) throw ContractError("predict: no examples");
  const std::size_t labels = params.config().n_labels;
  std::vector<double> out;
  out.reserve(examples.size() * labels);
  for (const auto& ex : examples) {
    const Tensor p = sigmoid(forward_classify_one(params, ex.tokens));
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return Tensor::from({examples.size(), labels}, std::move(out));
}

MetricsReport evaluate(const ModelParams& params, std::span<const Example> examples,
                       double threshold_value) {
  const BinaryMatrix preds = threshold(predict_probabilities(params, examples), threshold_value);
  BinaryMatrix targets{examples.size(), params.config().n_labels, {}};
  for (const auto& ex : examples) {
    if (ex.labels.size() != targets.cols) {
      throw ConfigError("evaluate: example has " + std::to_string(ex.labels.size()) +
                        " labels, model has " + std::to_string(targets.cols));
    }
    for (double y : ex.labels) targets.values.push_back(y > 0.5 ? 1 : 0);
  }
  return weighted_f1(confusion(preds, targets));
}

ModelParams prepare_backbone(const RunConfig& cfg, const Dataset& data) {
  const std::size_t n_labels = data.schema.labels.size();
  if (cfg.backbone.empty()) {
    ModelConfig mc = cfg.model;
    mc.vocab_size = data.vocab.size();
    mc.n_labels = n_labels;
    return ModelParams::init(mc, derive_seed(cfg.seed, {0xBAC4B0E}));
  }
  Checkpoint ck = load_checkpoint(cfg.backbone);
  auto fp = ck.meta.find("vocab_fingerprint");
  if (fp != ck.meta.end() && fp->second != hex64(data.vocab.fingerprint())) {
    throw ConfigError("backbone '" + cfg.backbone + "' was built with a different vocabulary");
  }
  if (ck.params.config().vocab_size != data.vocab.size()) {
    throw ConfigError("backbone vocabulary size " + std::to_string(ck.params.config().vocab_size) +
                      " does not match the vocabulary (" + std::to_string(data.vocab.size()) + ")");
  }
  if (!ck.params.adapters().empty()) throw ConfigError("backbone checkpoint carries adapters");
  ck.params.reset_head(n_labels, derive_seed(cfg.seed, {kHeadStream}));
  return std::move(ck.params);
}

TrainOutcome train_and_evaluate(const RunConfig& cfg, const ModelParams& backbone,
                                const Dataset& data, std::uint64_t seed,
                                const StepCallback& on_step) {
  cfg.validate();
  if (data.train.empty()) throw DataError("training split is empty");
  if (data.test.empty()) throw DataError("test split is empty");

  TrainOutcome out;
  out.params = backbone.clone();
  ModelParams& params = out.params;
  params.reset_head(data.schema.labels.size(), derive_seed(seed, {kHeadStream}));
  if (cfg.mode == TrainMode::kFullFt) {
    params.unfreeze_all();
  } else {
    auto targets = attention_projection_ids(params.config());
    if (cfg.lora_ffn) {
      auto ffn = ffn_projection_ids(params.config());
      targets.insert(ffn.begin(), ffn.end());
    }
    attach_lora(params, targets, cfg.effective_rank(), cfg.lora_scale, cfg.train_head,
                derive_seed(seed, {kLoraStream}));
  }
  params.seed_lineage().push_back("finetune:" + std::to_string(seed));

  const std::size_t n = data.train.size();
  const double q = std::min(1.0, cfg.expected_batch / static_cast<double>(n));
  const std::size_t total = cfg.epochs * steps_per_epoch(n, cfg.expected_batch);
  const std::size_t budget = std::max<std::size_t>(total, 1);
  out.spec = cfg.mode == TrainMode::kDpLora
                 ? (n >= 2 ? calibrate(cfg.epsilon, n, cfg.clip_norm, q, budget)
                           : throw DataError("private training needs at least 2 examples"))
                 : non_private_spec(n, q, budget);

  std::vector<Tensor> trainable;
  for (auto& [name, t] : params.trainable()) trainable.push_back(t);
  std::vector<Tensor> targets;
  std::vector<std::optional<MaskedSequence>> masks;
  for (const auto& ex : data.train) {
    targets.push_back(label_tensor(ex));
    masks.push_back(cfg.mlm_weight > 0.0 ? mask_suffix(ex.tokens, cfg.mask_fraction)
                                         : std::nullopt);
  }
  auto loss_fn = [&](std::size_t i) {
    Tensor loss = bce_multilabel_loss(forward_classify_one(params, data.train[i].tokens), targets[i]);
    if (masks[i]) {
      Tensor mlm = masked_lm_loss(params, masks[i]->ids, data.train[i].tokens, masks[i]->positions);
      loss = add(loss, scale(mlm, cfg.mlm_weight));
    }
    return loss;
  };
  DPStepOptions options;
  options.learning_rate = cfg.learning_rate;
  options.threads = cfg.threads;

  for (std::size_t step = 0; step < total; ++step) {
    Rng sample_rng = make_rng(derive_seed(seed, {kSampleStream, step}));
    Rng noise_rng = make_rng(derive_seed(seed, {kNoiseStream, step}));
    const auto batch = poisson_sample(n, q, sample_rng);
    DPStepReport report = dp_step(trainable, loss_fn, batch, out.spec, noise_rng, options, step);
    if (!report.skipped && !report.aborted) ++out.steps_taken;
    if (on_step) on_step(report);
    out.steps.push_back(std::move(report));
  }
  out.metrics = evaluate(params, data.test, cfg.threshold);
  return out;
}

}  // namespace dplora
