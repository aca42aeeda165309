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

#include "dplora/checkpoint.h"

#include "dplora/errors.h"
#include "dplora/util.h"
#include "json.hpp"

namespace dplora {

using ojson = nlohmann::ordered_json;

namespace {

ojson config_json(const ModelConfig& c) {
  ojson j;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_layers"] = c.n_layers;
  j["d_ff"] = c.d_ff;
  j["n_labels"] = c.n_labels;
  j["dropout_rate"] = c.dropout_rate;
  return j;
}

ModelConfig config_from(const ojson& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.n_labels = j.at("n_labels").get<std::size_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.validate();
  return c;
}

ojson tensor_json(const Tensor& t) {
  ojson j;
  j["shape"] = t.shape();
  j["requires_grad"] = t.requires_grad();
  j["data"] = doubles_to_hex(t.values());
  return j;
}

Tensor tensor_from(const ojson& j) {
  const auto shape = j.at("shape").get<Shape>();
  auto values = hex_to_doubles(j.at("data").get<std::string>());
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  if (values.size() != n) throw DataError("checkpoint tensor data does not match its shape");
  Tensor t = Tensor::from(shape, std::move(values));
  t.set_requires_grad(j.at("requires_grad").get<bool>());
  return t;
}

ojson body_json(const ModelParams& params, const std::string& tag,
                const std::map<std::string, std::string>& meta) {
  ojson j;
  j["format"] = "dplora.checkpoint.v1";
  j["tag"] = tag;
  j["config"] = config_json(params.config());
  j["seed_lineage"] = params.seed_lineage();
  j["meta"] = meta;
  auto& tensors = j["tensors"] = ojson::array();
  for (const auto& [name, t] : params.weights()) {
    ojson e = tensor_json(t);
    e["name"] = name;
    tensors.push_back(std::move(e));
  }
  auto& adapters = j["adapters"] = ojson::array();
  for (const auto& [target, ad] : params.adapters()) {
    ojson e;
    e["target"] = target;
    e["rank"] = ad.rank;
    e["scale"] = doubles_to_hex(std::span<const double>(&ad.scale, 1));
    e["a"] = tensor_json(ad.a);
    e["b"] = tensor_json(ad.b);
    adapters.push_back(std::move(e));
  }
  return j;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return config_json(config).dump(); }

ModelConfig config_from_json(const std::string& text) {
  try {
    return config_from(ojson::parse(text));
  } catch (const ojson::exception& e) {
    throw DataError(std::string("model config is malformed: ") + e.what());
  }
}

std::string checkpoint_to_text(const ModelParams& params, const std::string& tag,
                               const std::map<std::string, std::string>& meta) {
  ojson j = body_json(params, tag, meta);
  j["content_hash"] = hex64(fnv1a64(j.dump()));
  return j.dump(1) + "\n";
}

Checkpoint checkpoint_from_text(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const ojson::exception& e) {
    throw DataError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "dplora.checkpoint.v1") throw DataError("not a dplora checkpoint");
  Checkpoint ck;
  try {
    ck.content_hash = j.at("content_hash").get<std::string>();
    ck.tag = j.at("tag").get<std::string>();
    ck.meta = j.at("meta").get<std::map<std::string, std::string>>();
    ck.params.set_config(config_from(j.at("config")));
    ck.params.seed_lineage() = j.at("seed_lineage").get<std::vector<std::string>>();
    for (const auto& e : j.at("tensors")) {
      ck.params.put_weight(e.at("name").get<std::string>(), tensor_from(e));
    }
    for (const auto& e : j.at("adapters")) {
      LoraAdapter ad;
      ad.target = e.at("target").get<std::string>();
      ad.rank = e.at("rank").get<std::size_t>();
      const auto scale = hex_to_doubles(e.at("scale").get<std::string>());
      if (scale.size() != 1) throw DataError("checkpoint adapter scale is malformed");
      ad.scale = scale[0];
      ad.a = tensor_from(e.at("a"));
      ad.b = tensor_from(e.at("b"));
      if (!ck.params.has(ad.target)) {
        throw DataError("checkpoint adapter targets missing weight '" + ad.target + "'");
      }
      ck.params.adapters()[ad.target] = std::move(ad);
    }
  } catch (const ojson::exception& e) {
    throw DataError(std::string("checkpoint is missing a field: ") + e.what());
  }
  const std::string recomputed = hex64(fnv1a64(body_json(ck.params, ck.tag, ck.meta).dump()));
  if (recomputed != ck.content_hash) {
    throw DataError("checkpoint content hash mismatch (stored " + ck.content_hash +
                    ", computed " + recomputed + ")");
  }
  return ck;
}

std::string save_checkpoint(const std::string& path, const ModelParams& params,
                            const std::string& tag,
                            const std::map<std::string, std::string>& meta) {
  const std::string text = checkpoint_to_text(params, tag, meta);
  write_file(path, text);
  return ojson::parse(text).at("content_hash").get<std::string>();
}

Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_text(read_file(path)); }

}  // namespace dplora
