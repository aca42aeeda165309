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

// A small pre-LayerNorm transformer encoder with two heads:
//
//   * a multi-label classification head over the mean-pooled final states,
//   * a masked-completion head whose output matrix is the token embedding
//     table (weight tying), used for the memorisation probe.
//
// Any 2-D projection can carry a LoRA adapter. The adapted projection
// computes  y = x W^T + b + scale * (x A^T) B^T,  i.e. the effective weight is
// W + scale * B A with W frozen.

#ifndef DPLORA_MODEL_H_
#define DPLORA_MODEL_H_

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dplora/tensor.h"
#include "dplora/util.h"

namespace dplora {

// Reserved vocabulary ids shared by the tokenizer and the model.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kClsId = 2;
inline constexpr std::int32_t kMaskId = 3;
inline constexpr std::int32_t kNumReservedIds = 4;

struct ModelConfig {
  std::size_t vocab_size = 2048;
  std::size_t max_seq_len = 128;
  std::size_t d_model = 64;
  std::size_t n_heads = 2;
  std::size_t n_layers = 2;
  std::size_t d_ff = 128;
  std::size_t n_labels = 14;
  double dropout_rate = 0.0;

  // Throws ConfigError when a field is out of range.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LoraAdapter {
  std::string target;  // name of the wrapped weight
  Tensor a;            // [r, k], Gaussian init
  Tensor b;            // [d, r], zero init
  std::size_t rank = 0;
  double scale = 1.0;
};

// Row-major token ids, kPadId marking unused trailing positions.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;

  std::span<const std::int32_t> row(std::size_t r) const {
    return std::span<const std::int32_t>(ids).subspan(r * seq_len, seq_len);
  }
};

class ModelParams {
 public:
  ModelParams() = default;

  // Fresh random backbone and head; every tensor trainable.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  bool has(const std::string& name) const { return weights_.count(name) > 0; }
  const Tensor& weight(const std::string& name) const;
  Tensor& weight(const std::string& name);
  const std::map<std::string, Tensor>& weights() const { return weights_; }
  const std::map<std::string, LoraAdapter>& adapters() const { return adapters_; }
  std::map<std::string, LoraAdapter>& adapters() { return adapters_; }
  const LoraAdapter* adapter_for(const std::string& name) const;

  // Named 2-D projections that may receive an adapter.
  std::vector<std::string> projection_names() const;
  static bool is_head_weight(const std::string& name);

  // Every requires_grad tensor in a fixed order: backbone/head weights sorted
  // by name, then adapter factors (A then B) sorted by target.
  std::vector<std::pair<std::string, Tensor>> trainable() const;
  std::size_t trainable_count() const;

  // Makes every weight trainable (full fine-tuning).
  void unfreeze_all();
  void set_head_trainable(bool trainable);
  // Replaces the classification head with a fresh one for n_labels classes
  // (same initialisation as init()) and updates the config.
  void reset_head(std::size_t n_labels, std::uint64_t seed);

  // Deep copy: the clone shares no storage with this object.
  ModelParams clone() const;

  // Byte-level digest of all backbone weights (everything but adapters and
  // the classification head).
  std::uint64_t backbone_checksum() const;

  // Provenance of the random state that produced these parameters, e.g.
  // {"init:7", "pretrain:11", "finetune:3"}.
  std::vector<std::string>& seed_lineage() { return seed_lineage_; }
  const std::vector<std::string>& seed_lineage() const { return seed_lineage_; }

  // Checkpoint support.
  void set_config(const ModelConfig& config) { config_ = config; }
  void put_weight(const std::string& name, Tensor t) { weights_[name] = std::move(t); }

 private:
  ModelConfig config_;
  std::map<std::string, Tensor> weights_;
  std::map<std::string, LoraAdapter> adapters_;
  std::vector<std::string> seed_lineage_;
};

// Weight-id selectors for attach_lora.
std::set<std::string> attention_projection_ids(const ModelConfig& config);
std::set<std::string> ffn_projection_ids(const ModelConfig& config);

// Attaches rank-r adapters to each target (A ~ N(0, 0.02^2), B = 0), freezes
// the backbone and sets head trainability. Throws ConfigError for unknown or
// non-2-D targets and for rank outside [1, min(d, k)].
void attach_lora(ModelParams& params, const std::set<std::string>& targets, std::size_t rank,
                 double scale, bool train_head, std::uint64_t seed);

// W + scale * B A.
Tensor merge_adapter(const Tensor& weight, const LoraAdapter& adapter);

// Copy of params with every adapter folded into its dense weight.
ModelParams merge_all(const ModelParams& params);

// Optional training-time dropout. Masks are drawn from `rng` in a fixed
// order, so the same seed reproduces the same masks.
struct DropoutContext {
  double rate = 0.0;
  Rng* rng = nullptr;
};

// Encodes the non-PAD tokens of one sequence; each kept token keeps its
// original position index. Returns the final LayerNorm-ed hidden states
// [n_kept, d_model].
Tensor encode(const ModelParams& params, std::span<const std::int32_t> ids,
              DropoutContext* dropout = nullptr);

// Logits [B, n_labels]. Each row is encoded independently over its non-PAD
// tokens, so rows never interact. Throws InputError for ids outside the
// vocabulary (naming row and position) or for rows with no tokens.
Tensor forward_classify(const ModelParams& params, const TokenBatch& tokens,
                        DropoutContext* dropout = nullptr);
Tensor forward_classify_one(const ModelParams& params, std::span<const std::int32_t> ids,
                            DropoutContext* dropout = nullptr);

// Vocabulary logits [n_tokens, vocab] from the tied completion head.
Tensor completion_logits(const Tensor& hidden, const ModelParams& params);

// Mean binary cross-entropy; throws ContractError on shape mismatch or
// non-binary targets.
Tensor bce_multilabel_loss(const Tensor& logits, const Tensor& targets);

// Cross-entropy of the completion head at `masked_positions`, where
// `masked_ids` holds kMaskId at those positions and `original_ids` the
// tokens to recover.
Tensor masked_lm_loss(const ModelParams& params, std::span<const std::int32_t> masked_ids,
                      std::span<const std::int32_t> original_ids,
                      std::span<const std::size_t> masked_positions,
                      DropoutContext* dropout = nullptr);

// Fills every kMaskId position with the argmax completion token. Reserved
// ids other than kUnkId are never emitted; ties go to the lowest id. Throws
// ContractError when nothing is masked.
std::vector<std::int32_t> forward_complete(const ModelParams& params,
                                           std::span<const std::int32_t> ids);

// Validates a token sequence against the config; throws InputError.
void check_token_ids(const ModelConfig& config, std::span<const std::int32_t> ids,
                     std::size_t row = 0);

}  // namespace dplora

#endif  // DPLORA_MODEL_H_
