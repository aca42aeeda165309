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

// Memorisation probe: mask the tail of a training sequence, let the model
// fill it in, and compare the original and the completed sequence by the
// cosine of their mean-pooled encoder embeddings.

#ifndef DPLORA_PROBE_H_
#define DPLORA_PROBE_H_

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dplora/model.h"

namespace dplora {

inline constexpr double kDefaultMaskFraction = 0.3;
inline constexpr std::size_t kMinProbeLength = 4;

struct MaskedSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> positions;  // ascending
};

// Replaces the trailing ceil(f * T) non-special tokens with kMaskId, where T
// counts the non-special tokens. Returns nullopt (probe skip) when T < 4.
// Throws ContractError for f outside (0, 1).
std::optional<MaskedSequence> mask_suffix(std::span<const std::int32_t> ids, double fraction);

// Mean of the final hidden states over non-PAD positions, L2-normalised.
// Throws ContractError for an empty or all-PAD sequence.
std::vector<double> embed_text(const ModelParams& params, std::span<const std::int32_t> ids);

// u.v / (|u| |v|) clamped to [-1, 1]. Throws ContractError on a zero vector
// or a length mismatch.
double cosine(std::span<const double> u, std::span<const double> v);

struct ProbeItem {
  std::string id;
  std::vector<std::int32_t> tokens;
};

struct ProbeModel {
  std::string tag;
  const ModelParams* params = nullptr;
};

struct ProbeResult {
  std::string tag;
  std::vector<std::string> item_ids;
  std::vector<double> cosines;
  std::size_t skipped = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

// Picks up to n items with a seeded shuffle, then restores input order.
std::vector<ProbeItem> sample_probe_set(std::span<const ProbeItem> pool, std::size_t n,
                                        std::uint64_t seed);

// Runs the probe for every model over the same items and masks. When
// `embedder` is set its encoder embeds both texts for every model; otherwise
// each model embeds with its own encoder. Throws ConfigError when a model's
// vocabulary size differs from the first model's.
std::vector<ProbeResult> run_probe(std::span<const ProbeModel> models,
                                   std::span<const ProbeItem> items, double fraction,
                                   const ModelParams* embedder = nullptr);

// model_tag,item_id,cosine rows, and model_tag,mean,std,n rows. The
// `header` lines are emitted first, each prefixed with "# ".
std::string probe_table_csv(std::span<const ProbeResult> results,
                            const std::vector<std::string>& header = {});
std::string probe_summary_csv(std::span<const ProbeResult> results,
                              const std::vector<std::string>& header = {});

}  // namespace dplora

#endif  // DPLORA_PROBE_H_
