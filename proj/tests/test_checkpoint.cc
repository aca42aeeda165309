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

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "dplora/checkpoint.h"
#include "dplora/errors.h"
#include "dplora/util.h"

using namespace dplora;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 20;
  c.max_seq_len = 8;
  c.d_model = 4;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 6;
  c.n_labels = 3;
  return c;
}

void expect_same(const ModelParams& a, const ModelParams& b) {
  CHECK(a.config() == b.config());
  CHECK(a.seed_lineage() == b.seed_lineage());
  REQUIRE(a.weights().size() == b.weights().size());
  for (const auto& [name, t] : a.weights()) {
    REQUIRE(b.has(name));
    CHECK(b.weight(name).shape() == t.shape());
    CHECK(b.weight(name).values() == t.values());
    CHECK(b.weight(name).requires_grad() == t.requires_grad());
  }
  REQUIRE(a.adapters().size() == b.adapters().size());
  for (const auto& [target, ad] : a.adapters()) {
    const auto& other = b.adapters().at(target);
    CHECK(other.rank == ad.rank);
    CHECK(other.scale == ad.scale);
    CHECK(other.a.values() == ad.a.values());
    CHECK(other.b.values() == ad.b.values());
  }
}

}  // namespace

TEST_CASE("hex double encoding is bit-exact") {
  const std::vector<double> v{0.1, -0.0, 1e-310, std::numeric_limits<double>::max(),
                              std::nextafter(1.0, 2.0)};
  const auto back = hex_to_doubles(doubles_to_hex(v));
  REQUIRE(back.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(std::memcmp(&back[i], &v[i], sizeof(double)) == 0);
  }
  CHECK_THROWS(hex_to_doubles("abc"));
}

TEST_CASE("checkpoint round trip is bit-exact") {
  auto p = ModelParams::init(tiny(), 4);
  attach_lora(p, attention_projection_ids(tiny()), 2, 0.75, true, 5);
  for (auto& [target, ad] : p.adapters())
    for (auto& v : ad.b.mutable_data()) v = 1.0 / 3.0;
  const std::map<std::string, std::string> meta{{"role", "test"}};
  const auto text = checkpoint_to_text(p, "tagged", meta);
  const auto ck = checkpoint_from_text(text);
  expect_same(p, ck.params);
  CHECK(ck.tag == "tagged");
  CHECK(ck.meta == meta);
  CHECK(checkpoint_to_text(ck.params, ck.tag, ck.meta) == text);

  const auto dir = std::filesystem::temp_directory_path() / "dplora_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "c.json").string();
  const auto hash = save_checkpoint(path, p, "tagged", meta);
  CHECK(hash == ck.content_hash);
  expect_same(p, load_checkpoint(path).params);
  std::filesystem::remove_all(dir);
}

TEST_CASE("content hash depends on the contents") {
  const auto p = ModelParams::init(tiny(), 4);
  const auto h1 = checkpoint_from_text(checkpoint_to_text(p, "a")).content_hash;
  CHECK(checkpoint_from_text(checkpoint_to_text(p, "b")).content_hash != h1);
  auto q = p.clone();
  q.weight("head.bias").mutable_data()[0] = 1e-12;
  CHECK(checkpoint_from_text(checkpoint_to_text(q, "a")).content_hash != h1);
}

TEST_CASE("corrupted checkpoints are rejected") {
  const auto p = ModelParams::init(tiny(), 4);
  auto text = checkpoint_to_text(p, "a");
  const auto pos = text.find("\"tag\": \"a\"");
  REQUIRE(pos != std::string::npos);
  auto tampered = text;
  tampered.replace(pos, 10, "\"tag\": \"z\"");
  CHECK_THROWS_AS(checkpoint_from_text(tampered), DataError);
  CHECK_THROWS_AS(checkpoint_from_text("not json"), DataError);
  CHECK_THROWS_AS(checkpoint_from_text(R"({"format":"other"})"), DataError);
}

TEST_CASE("model config JSON") {
  const auto c = tiny();
  CHECK(config_from_json(config_to_json(c)) == c);
  CHECK_THROWS_AS(config_from_json(R"({"vocab_size":20})"), DataError);
}
