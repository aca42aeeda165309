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

#include "dplora/metrics.h"

#include <sstream>

#include "dplora/errors.h"
#include "dplora/util.h"
#include "json.hpp"

namespace dplora {

ConfusionCounts confusion(const BinaryMatrix& preds, const BinaryMatrix& targets) {
  if (preds.rows != targets.rows || preds.cols != targets.cols ||
      preds.values.size() != preds.rows * preds.cols ||
      targets.values.size() != targets.rows * targets.cols) {
    throw ContractError("confusion: predictions " + std::to_string(preds.rows) + "x" +
                        std::to_string(preds.cols) + " vs targets " + std::to_string(targets.rows) +
                        "x" + std::to_string(targets.cols));
  }
  ConfusionCounts out;
  out.n_samples = preds.rows;
  out.classes.resize(preds.cols);
  for (std::size_t r = 0; r < preds.rows; ++r) {
    for (std::size_t c = 0; c < preds.cols; ++c) {
      const auto p = preds.at(r, c);
      const auto t = targets.at(r, c);
      if (p > 1 || t > 1) throw ContractError("confusion: entries must be 0 or 1");
      auto& k = out.classes[c];
      if (p && t) ++k.tp;
      else if (p) ++k.fp;
      else if (t) ++k.fn;
      else ++k.tn;
    }
  }
  return out;
}

MetricsReport weighted_f1(const ConfusionCounts& counts) {
  MetricsReport report;
  report.n_samples = counts.n_samples;
  std::size_t total_support = 0;
  double weighted = 0.0;
  for (const auto& k : counts.classes) {
    ClassMetrics m;
    m.support = k.support();
    const double tp = static_cast<double>(k.tp);
    if (k.tp + k.fp > 0) m.precision = tp / static_cast<double>(k.tp + k.fp);
    if (k.tp + k.fn > 0) m.recall = tp / static_cast<double>(k.tp + k.fn);
    const std::size_t denom = 2 * k.tp + k.fp + k.fn;
    m.f1 = denom == 0 ? 0.0 : 2.0 * tp / static_cast<double>(denom);
    total_support += m.support;
    weighted += m.f1 * static_cast<double>(m.support);
    report.per_class.push_back(m);
  }
  if (total_support == 0) {
    report.degenerate = true;
    report.weighted_f1 = 0.0;
  } else {
    report.weighted_f1 = weighted / static_cast<double>(total_support);
  }
  return report;
}

BinaryMatrix threshold(const Tensor& probabilities, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("threshold must lie in [0, 1]");
  if (probabilities.rank() != 2) throw ContractError("threshold expects an N x L tensor");
  BinaryMatrix out;
  out.rows = probabilities.dim(0);
  out.cols = probabilities.dim(1);
  out.values.resize(probabilities.numel());
  const auto p = probabilities.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0)) {
      throw ContractError("threshold: probability outside [0, 1] at flat index " + std::to_string(i));
    }
    out.values[i] = p[i] >= t ? 1 : 0;
  }
  return out;
}

std::string MetricsReport::to_text(const std::vector<std::string>& label_names) const {
  nlohmann::ordered_json j;
  j["format"] = "dplora.metrics.v1";
  j["n_samples"] = n_samples;
  j["weighted_f1"] = weighted_f1;
  j["degenerate"] = degenerate;
  auto& classes = j["classes"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    const auto& m = per_class[c];
    nlohmann::ordered_json row;
    row["label"] = c < label_names.size() ? label_names[c] : "class" + std::to_string(c);
    row["precision"] = m.precision;
    row["recall"] = m.recall;
    row["f1"] = m.f1;
    row["support"] = m.support;
    classes.push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

std::string MetricsReport::csv_header(std::size_t n_labels) {
  std::string h = "run_id,epsilon,rank,seed,weighted_f1";
  for (std::size_t c = 0; c < n_labels; ++c) h += ",f1_" + std::to_string(c);
  return h;
}

std::string MetricsReport::csv_row(const std::string& run_id, const std::string& epsilon,
                                   std::size_t rank, std::uint64_t seed) const {
  std::ostringstream out;
  out << run_id << ',' << epsilon << ',' << rank << ',' << seed << ','
      << format_double(weighted_f1);
  for (const auto& m : per_class) out << ',' << format_double(m.f1);
  return out.str();
}

}  // namespace dplora
