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

#include "dplora/probe.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dplora/errors.h"
#include "dplora/util.h"

namespace dplora {

namespace {

bool is_special(std::int32_t id) { return id == kPadId || id == kClsId || id == kMaskId; }

std::string header_lines(const std::vector<std::string>& header) {
  std::string out;
  for (const auto& h : header) out += "# " + h + "\n";
  return out;
}

}  // namespace

std::optional<MaskedSequence> mask_suffix(std::span<const std::int32_t> ids, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ContractError("mask_suffix: fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> content;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!is_special(ids[i])) content.push_back(i);
  if (content.size() < kMinProbeLength) return std::nullopt;
  const auto n_mask = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(content.size()) - 1e-12));
  MaskedSequence out{std::vector<std::int32_t>(ids.begin(), ids.end()), {}};
  for (std::size_t i = content.size() - std::max<std::size_t>(n_mask, 1); i < content.size(); ++i) {
    out.ids[content[i]] = kMaskId;
    out.positions.push_back(content[i]);
  }
  return out;
}

std::vector<double> embed_text(const ModelParams& params, std::span<const std::int32_t> ids) {
  if (std::all_of(ids.begin(), ids.end(), [](std::int32_t t) { return t == kPadId; })) {
    throw ContractError("embed_text: sequence has no non-PAD tokens");
  }
  const Tensor hidden = encode(params, ids);
  const std::size_t n = hidden.dim(0), d = hidden.dim(1);
  std::vector<double> v(d, 0.0);
  const auto& h = hidden.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) v[c] += h[i * d + c];
  for (auto& x : v) x /= static_cast<double>(n);
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw NumericError("embed_text: pooled embedding is zero");
  for (auto& x : v) x /= norm;
  return v;
}

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ContractError("cosine: vectors differ in length");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw ContractError("cosine: zero vector");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

std::vector<ProbeItem> sample_probe_set(std::span<const ProbeItem> pool, std::size_t n,
                                        std::uint64_t seed) {
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  order.resize(std::min(n, order.size()));
  std::sort(order.begin(), order.end());
  std::vector<ProbeItem> out;
  for (auto i : order) out.push_back(pool[i]);
  return out;
}

std::vector<ProbeResult> run_probe(std::span<const ProbeModel> models,
                                   std::span<const ProbeItem> items, double fraction,
                                   const ModelParams* embedder) {
  if (models.empty()) throw ContractError("run_probe: no models");
  const std::size_t vocab = models.front().params->config().vocab_size;
  for (const auto& m : models) {
    if (!m.params) throw ContractError("run_probe: model '" + m.tag + "' has no parameters");
    if (m.params->config().vocab_size != vocab) {
      throw ConfigError("run_probe: model '" + m.tag + "' has vocabulary size " +
                        std::to_string(m.params->config().vocab_size) + ", expected " +
                        std::to_string(vocab));
    }
  }
  if (embedder && embedder->config().vocab_size != vocab) {
    throw ConfigError("run_probe: embedding model vocabulary does not match");
  }
  std::vector<std::optional<MaskedSequence>> masks;
  for (const auto& item : items) masks.push_back(mask_suffix(item.tokens, fraction));

  std::vector<ProbeResult> results;
  for (const auto& m : models) {
    const ModelParams& embed_with = embedder ? *embedder : *m.params;
    ProbeResult r;
    r.tag = m.tag;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!masks[i]) {
        ++r.skipped;
        continue;
      }
      const auto completed = forward_complete(*m.params, masks[i]->ids);
      const auto a = embed_text(embed_with, items[i].tokens);
      const auto b = embed_text(embed_with, completed);
      r.item_ids.push_back(items[i].id);
      r.cosines.push_back(cosine(a, b));
    }
    if (!r.cosines.empty()) {
      const double n = static_cast<double>(r.cosines.size());
      r.mean = std::accumulate(r.cosines.begin(), r.cosines.end(), 0.0) / n;
      double ss = 0.0;
      for (double c : r.cosines) ss += (c - r.mean) * (c - r.mean);
      r.std = std::sqrt(ss / n);
    }
    results.push_back(std::move(r));
  }
  return results;
}

std::string probe_table_csv(std::span<const ProbeResult> results,
                            const std::vector<std::string>& header) {
  std::string out = header_lines(header) + "model_tag,item_id,cosine\n";
  for (const auto& r : results)
    for (std::size_t i = 0; i < r.cosines.size(); ++i)
      out += r.tag + "," + r.item_ids[i] + "," + format_double(r.cosines[i]) + "\n";
  return out;
}

std::string probe_summary_csv(std::span<const ProbeResult> results,
                              const std::vector<std::string>& header) {
  std::string out = header_lines(header) + "model_tag,mean,std,n,skipped\n";
  for (const auto& r : results) {
    out += r.tag + "," + format_double(r.mean) + "," + format_double(r.std) + "," +
           std::to_string(r.cosines.size()) + "," + std::to_string(r.skipped) + "\n";
  }
  return out;
}

}  // namespace dplora
