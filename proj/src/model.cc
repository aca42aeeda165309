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

#include "dplora/model.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <string_view>

#include "dplora/errors.h"

namespace dplora {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kAdapterInitStd = 0.02;
constexpr double kEmbeddingInitStd = 0.02;

std::string layer_prefix(std::size_t layer) { return "layer" + std::to_string(layer) + "."; }

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

// Positions of the non-PAD tokens, in order.
std::vector<std::size_t> kept_positions(std::span<const std::int32_t> ids) {
  std::vector<std::size_t> kept;
  kept.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != kPadId) kept.push_back(i);
  return kept;
}

Tensor affine_norm(const Tensor& x, const ModelParams& p, const std::string& prefix) {
  Tensor normed = layer_norm(x, kLayerNormEps);
  return add(mul(normed, p.weight(prefix + "gain")), p.weight(prefix + "bias"));
}

// x W^T + b, plus the adapter branch when one is attached to `name`.
Tensor project(const Tensor& x, const ModelParams& p, const std::string& name) {
  const Tensor& w = p.weight(name + ".weight");
  const Tensor& b = p.weight(name + ".bias");
  Tensor y = linear(x, w, &b);
  if (const LoraAdapter* ad = p.adapter_for(name + ".weight")) {
    Tensor low = linear(linear(x, ad->a), ad->b);
    y = add(y, ad->scale == 1.0 ? low : scale(low, ad->scale));
  }
  return y;
}

Tensor maybe_dropout(const Tensor& x, DropoutContext* ctx) {
  if (!ctx || ctx->rate <= 0.0) return x;
  if (!ctx->rng) throw ContractError("dropout enabled without a random generator");
  std::bernoulli_distribution keep(1.0 - ctx->rate);
  std::vector<double> mask(x.numel());
  const double inv = 1.0 / (1.0 - ctx->rate);
  for (auto& m : mask) m = keep(*ctx->rng) ? inv : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor attention(const Tensor& h, const ModelParams& p, const std::string& prefix) {
  const auto& cfg = p.config();
  const std::size_t head_dim = cfg.d_model / cfg.n_heads;
  Tensor q = project(h, p, prefix + "attn.q");
  Tensor k = project(h, p, prefix + "attn.k");
  Tensor v = project(h, p, prefix + "attn.v");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Tensor> heads;
  heads.reserve(cfg.n_heads);
  for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
    const std::size_t start = hd * head_dim;
    Tensor qh = cfg.n_heads == 1 ? q : slice_cols(q, start, head_dim);
    Tensor kh = cfg.n_heads == 1 ? k : slice_cols(k, start, head_dim);
    Tensor vh = cfg.n_heads == 1 ? v : slice_cols(v, start, head_dim);
    Tensor scores = scale(linear(qh, kh), inv_sqrt);
    heads.push_back(matmul(softmax(scores), vh));
  }
  Tensor merged = heads.size() == 1 ? heads[0] : concat_cols(heads);
  return project(merged, p, prefix + "attn.o");
}

Tensor encode_kept(const ModelParams& p, std::span<const std::int32_t> ids,
                   const std::vector<std::size_t>& kept, DropoutContext* dropout) {
  const auto& cfg = p.config();
  std::vector<std::int32_t> tokens(kept.size());
  std::vector<std::int32_t> positions(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    tokens[i] = ids[kept[i]];
    positions[i] = static_cast<std::int32_t>(kept[i]);
  }
  Tensor x = add(embedding(p.weight("embed.token"), tokens),
                 embedding(p.weight("embed.position"), positions));
  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string prefix = layer_prefix(layer);
    Tensor attn = attention(affine_norm(x, p, prefix + "ln1."), p, prefix);
    x = add(x, maybe_dropout(attn, dropout));
    Tensor up = gelu(project(affine_norm(x, p, prefix + "ln2."), p, prefix + "ffn.up"));
    x = add(x, maybe_dropout(project(up, p, prefix + "ffn.down"), dropout));
  }
  return affine_norm(x, p, "final_ln.");
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (vocab_size <= static_cast<std::size_t>(kNumReservedIds)) fail("vocab_size too small");
  if (max_seq_len == 0) fail("max_seq_len must be positive");
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 || n_labels == 0) {
    fail("dimensions must be positive");
  }
  if (d_model % n_heads != 0) fail("n_heads must divide d_model");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
}

// ---------------------------------------------------------------------------
// ModelParams

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config_ = config;
  Rng rng = make_rng(seed);
  const std::size_t d = config.d_model;
  auto put = [&p](const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    p.weights_[name] = std::move(t);
  };
  auto dense = [&](const std::string& name, std::size_t out, std::size_t in) {
    put(name + ".weight", gaussian({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    put(name + ".bias", Tensor::zeros({out}));
  };
  auto norm = [&](const std::string& prefix) {
    put(prefix + "gain", Tensor::full({d}, 1.0));
    put(prefix + "bias", Tensor::zeros({d}));
  };
  put("embed.token", gaussian({config.vocab_size, d}, kEmbeddingInitStd, rng));
  put("embed.position", gaussian({config.max_seq_len, d}, kEmbeddingInitStd, rng));
  for (std::size_t layer = 0; layer < config.n_layers; ++layer) {
    const std::string prefix = layer_prefix(layer);
    norm(prefix + "ln1.");
    for (const char* proj : {"q", "k", "v", "o"}) dense(prefix + "attn." + proj, d, d);
    norm(prefix + "ln2.");
    dense(prefix + "ffn.up", config.d_ff, d);
    dense(prefix + "ffn.down", d, config.d_ff);
  }
  norm("final_ln.");
  dense("head", config.n_labels, d);
  put("mlm.bias", Tensor::zeros({config.vocab_size}));
  p.seed_lineage_.push_back("init:" + std::to_string(seed));
  return p;
}

const Tensor& ModelParams::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw ConfigError("unknown weight id '" + name + "'");
  return it->second;
}

Tensor& ModelParams::weight(const std::string& name) {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw ConfigError("unknown weight id '" + name + "'");
  return it->second;
}

const LoraAdapter* ModelParams::adapter_for(const std::string& name) const {
  if (adapters_.empty()) return nullptr;
  auto it = adapters_.find(name);
  return it == adapters_.end() ? nullptr : &it->second;
}

std::vector<std::string> ModelParams::projection_names() const {
  std::vector<std::string> names;
  for (const auto& [name, t] : weights_) {
    if (t.rank() == 2 && name.ends_with(".weight")) names.push_back(name);
  }
  return names;
}

bool ModelParams::is_head_weight(const std::string& name) { return name.starts_with("head."); }

std::vector<std::pair<std::string, Tensor>> ModelParams::trainable() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : weights_)
    if (t.requires_grad()) out.emplace_back(name, t);
  for (const auto& [target, ad] : adapters_) {
    out.emplace_back(target + ".lora_a", ad.a);
    out.emplace_back(target + ".lora_b", ad.b);
  }
  return out;
}

std::size_t ModelParams::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : trainable()) n += t.numel();
  return n;
}

void ModelParams::unfreeze_all() {
  for (auto& [name, t] : weights_) t.set_requires_grad(true);
}

void ModelParams::set_head_trainable(bool trainable) {
  for (auto& [name, t] : weights_)
    if (is_head_weight(name)) t.set_requires_grad(trainable);
}

void ModelParams::reset_head(std::size_t n_labels, std::uint64_t seed) {
  if (n_labels == 0) throw ConfigError("reset_head: n_labels must be positive");
  Rng rng = make_rng(seed);
  const std::size_t d = config_.d_model;
  Tensor w = gaussian({n_labels, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  Tensor b = Tensor::zeros({n_labels});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  weights_["head.weight"] = std::move(w);
  weights_["head.bias"] = std::move(b);
  config_.n_labels = n_labels;
  seed_lineage_.push_back("head:" + std::to_string(seed));
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.config_ = config_;
  out.seed_lineage_ = seed_lineage_;
  auto copy = [](const Tensor& t) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  for (const auto& [name, t] : weights_) out.weights_[name] = copy(t);
  for (const auto& [target, ad] : adapters_) {
    out.adapters_[target] = LoraAdapter{ad.target, copy(ad.a), copy(ad.b), ad.rank, ad.scale};
  }
  return out;
}

std::uint64_t ModelParams::backbone_checksum() const {
  std::string bytes;
  for (const auto& [name, t] : weights_) {
    if (is_head_weight(name)) continue;
    bytes += name;
    const auto data = t.data();
    bytes.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  }
  return fnv1a64(bytes);
}

// ---------------------------------------------------------------------------
// LoRA

std::set<std::string> attention_projection_ids(const ModelConfig& config) {
  std::set<std::string> ids;
  for (std::size_t layer = 0; layer < config.n_layers; ++layer)
    for (const char* proj : {"q", "k", "v", "o"})
      ids.insert(layer_prefix(layer) + "attn." + proj + ".weight");
  return ids;
}

std::set<std::string> ffn_projection_ids(const ModelConfig& config) {
  std::set<std::string> ids;
  for (std::size_t layer = 0; layer < config.n_layers; ++layer) {
    ids.insert(layer_prefix(layer) + "ffn.up.weight");
    ids.insert(layer_prefix(layer) + "ffn.down.weight");
  }
  return ids;
}

void attach_lora(ModelParams& params, const std::set<std::string>& targets, std::size_t rank,
                 double scale, bool train_head, std::uint64_t seed) {
  if (rank == 0) throw ConfigError("LoRA rank must be at least 1");
  if (targets.empty()) throw ConfigError("no LoRA targets given");
  for (const auto& name : targets) {
    if (!params.has(name)) throw ConfigError("unknown weight id '" + name + "'");
    const Tensor& w = params.weight(name);
    if (w.rank() != 2 || ModelParams::is_head_weight(name) || name.starts_with("embed.")) {
      throw ConfigError("'" + name + "' is not an adaptable projection");
    }
    if (rank > std::min(w.dim(0), w.dim(1))) {
      throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min(d, k) of '" + name +
                        "' " + shape_str(w.shape()));
    }
  }
  for (const auto& [name, t] : params.weights()) {
    Tensor handle = t;
    handle.set_requires_grad(false);
  }
  params.set_head_trainable(train_head);
  Rng rng = make_rng(seed);
  // std::set iteration is sorted, so initialisation order is fixed.
  for (const auto& name : targets) {
    const Tensor& w = params.weight(name);
    LoraAdapter ad;
    ad.target = name;
    ad.rank = rank;
    ad.scale = scale;
    ad.a = gaussian({rank, w.dim(1)}, kAdapterInitStd, rng);
    ad.b = Tensor::zeros({w.dim(0), rank});
    ad.a.set_requires_grad(true);
    ad.b.set_requires_grad(true);
    params.adapters()[name] = std::move(ad);
  }
  params.seed_lineage().push_back("lora:" + std::to_string(seed));
}

Tensor merge_adapter(const Tensor& weight, const LoraAdapter& adapter) {
  if (weight.rank() != 2 || adapter.b.dim(0) != weight.dim(0) ||
      adapter.a.dim(1) != weight.dim(1) || adapter.b.dim(1) != adapter.a.dim(0)) {
    throw DimensionError("merge_adapter: weight " + shape_str(weight.shape()) + ", B " +
                         shape_str(adapter.b.shape()) + ", A " + shape_str(adapter.a.shape()));
  }
  const std::size_t d = weight.dim(0), k = weight.dim(1), r = adapter.a.dim(0);
  std::vector<double> out(weight.values());
  const auto& a = adapter.a.values();
  const auto& b = adapter.b.values();
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < r; ++p) acc += b[i * r + p] * a[p * k + j];
      if (acc != 0.0) out[i * k + j] += adapter.scale * acc;
    }
  }
  return Tensor::from(weight.shape(), std::move(out));
}

ModelParams merge_all(const ModelParams& params) {
  ModelParams out = params.clone();
  for (const auto& [target, ad] : params.adapters()) {
    Tensor merged = merge_adapter(params.weight(target), ad);
    merged.set_requires_grad(false);
    out.put_weight(target, merged);
  }
  out.adapters().clear();
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes

void check_token_ids(const ModelConfig& config, std::span<const std::int32_t> ids, std::size_t row) {
  if (ids.size() > config.max_seq_len) {
    throw InputError("row " + std::to_string(row) + ": sequence length " +
                     std::to_string(ids.size()) + " exceeds max_seq_len " +
                     std::to_string(config.max_seq_len));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config.vocab_size) {
      throw InputError("row " + std::to_string(row) + ", position " + std::to_string(i) +
                       ": token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(config.vocab_size));
    }
  }
}

Tensor encode(const ModelParams& params, std::span<const std::int32_t> ids, DropoutContext* dropout) {
  check_token_ids(params.config(), ids);
  const auto kept = kept_positions(ids);
  if (kept.empty()) throw InputError("sequence has no non-PAD tokens");
  return encode_kept(params, ids, kept, dropout);
}

Tensor forward_classify_one(const ModelParams& params, std::span<const std::int32_t> ids,
                            DropoutContext* dropout) {
  Tensor hidden = encode(params, ids, dropout);
  const Tensor& bias = params.weight("head.bias");
  return linear(mean_rows(hidden), params.weight("head.weight"), &bias);
}

Tensor forward_classify(const ModelParams& params, const TokenBatch& tokens,
                        DropoutContext* dropout) {
  if (tokens.batch == 0 || tokens.ids.size() != tokens.batch * tokens.seq_len) {
    throw DimensionError("token batch of " + std::to_string(tokens.ids.size()) +
                         " ids does not match " + std::to_string(tokens.batch) + "x" +
                         std::to_string(tokens.seq_len));
  }
  for (std::size_t r = 0; r < tokens.batch; ++r) check_token_ids(params.config(), tokens.row(r), r);
  std::vector<Tensor> rows;
  rows.reserve(tokens.batch);
  for (std::size_t r = 0; r < tokens.batch; ++r) {
    if (kept_positions(tokens.row(r)).empty()) {
      throw InputError("row " + std::to_string(r) + " has no non-PAD tokens");
    }
    rows.push_back(forward_classify_one(params, tokens.row(r), dropout));
  }
  return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

Tensor completion_logits(const Tensor& hidden, const ModelParams& params) {
  const Tensor& bias = params.weight("mlm.bias");
  return linear(hidden, params.weight("embed.token"), &bias);
}

Tensor bce_multilabel_loss(const Tensor& logits, const Tensor& targets) {
  return bce_with_logits(logits, targets);
}

Tensor masked_lm_loss(const ModelParams& params, std::span<const std::int32_t> masked_ids,
                      std::span<const std::int32_t> original_ids,
                      std::span<const std::size_t> masked_positions, DropoutContext* dropout) {
  if (masked_ids.size() != original_ids.size()) {
    throw ContractError("masked_lm_loss: masked and original sequences differ in length");
  }
  if (masked_positions.empty()) throw ContractError("masked_lm_loss: no masked positions");
  check_token_ids(params.config(), masked_ids);
  const auto kept = kept_positions(masked_ids);
  if (kept.empty()) throw InputError("sequence has no non-PAD tokens");
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> targets;
  for (std::size_t pos : masked_positions) {
    auto it = std::lower_bound(kept.begin(), kept.end(), pos);
    if (it == kept.end() || *it != pos) throw ContractError("masked position falls on PAD");
    rows.push_back(static_cast<std::size_t>(it - kept.begin()));
    targets.push_back(original_ids[pos]);
  }
  Tensor hidden = encode_kept(params, masked_ids, kept, dropout);
  Tensor logits = completion_logits(select_rows(hidden, rows), params);
  return softmax_cross_entropy(logits, targets);
}

std::vector<std::int32_t> forward_complete(const ModelParams& params,
                                           std::span<const std::int32_t> ids) {
  check_token_ids(params.config(), ids);
  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == kMaskId) masked.push_back(i);
  if (masked.empty()) throw ContractError("forward_complete: no masked positions");
  const auto kept = kept_positions(ids);
  std::vector<std::size_t> rows;
  for (std::size_t pos : masked) {
    rows.push_back(static_cast<std::size_t>(std::lower_bound(kept.begin(), kept.end(), pos) -
                                            kept.begin()));
  }
  Tensor hidden = encode_kept(params, ids, kept, nullptr);
  Tensor logits = completion_logits(select_rows(hidden, rows), params);
  const std::size_t vocab = params.config().vocab_size;
  std::vector<std::int32_t> out(ids.begin(), ids.end());
  const auto& lv = logits.values();
  for (std::size_t m = 0; m < masked.size(); ++m) {
    const double* row = lv.data() + m * vocab;
    std::int32_t best = kUnkId;
    for (std::size_t t = kNumReservedIds; t < vocab; ++t) {
      if (row[t] > row[best]) best = static_cast<std::int32_t>(t);
    }
    out[masked[m]] = best;
  }
  return out;
}

}  // namespace dplora
