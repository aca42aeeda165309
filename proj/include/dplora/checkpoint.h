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

// Checkpoint container. A checkpoint is one JSON document:
//
//   {"format": "dplora.checkpoint.v1",
//    "tag": human label,
//    "config": {ModelConfig fields},
//    "seed_lineage": [...],
//    "meta": {string: string},
//    "tensors": [{"name", "shape", "requires_grad", "data": hex}],
//    "adapters": [{"target", "rank", "scale", "a": tensor, "b": tensor}],
//    "content_hash": hex of FNV-1a over everything above}
//
// Tensor data is the little-endian IEEE-754 bytes of each double in hex, so
// loading reproduces every value bit for bit.

#ifndef DPLORA_CHECKPOINT_H_
#define DPLORA_CHECKPOINT_H_

#include <map>
#include <string>

#include "dplora/model.h"

namespace dplora {

struct Checkpoint {
  ModelParams params;
  std::string tag;
  std::map<std::string, std::string> meta;
  std::string content_hash;
};

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

// Serialises and returns the document; the content hash depends only on
// tag, params and meta.
std::string checkpoint_to_text(const ModelParams& params, const std::string& tag,
                               const std::map<std::string, std::string>& meta = {});
// Throws DataError for malformed documents or a content hash mismatch.
Checkpoint checkpoint_from_text(const std::string& text);

// Writes the checkpoint and returns its content hash.
std::string save_checkpoint(const std::string& path, const ModelParams& params,
                            const std::string& tag,
                            const std::map<std::string, std::string>& meta = {});
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dplora

#endif  // DPLORA_CHECKPOINT_H_
