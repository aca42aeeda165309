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

#ifndef DPLORA_METRICS_H_
#define DPLORA_METRICS_H_

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dplora/tensor.h"

namespace dplora {

// Row-major N x L matrix of 0/1 entries.
struct BinaryMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> values;

  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct ClassCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;

  std::size_t support() const { return tp + fn; }
  bool operator==(const ClassCounts&) const = default;
};

struct ConfusionCounts {
  std::vector<ClassCounts> classes;
  std::size_t n_samples = 0;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double weighted_f1 = 0.0;
  std::size_t n_samples = 0;
  // Set when no class has any support; weighted_f1 is then 0 by convention.
  bool degenerate = false;

  std::string to_text(const std::vector<std::string>& label_names = {}) const;
  static std::string csv_header(std::size_t n_labels);
  std::string csv_row(const std::string& run_id, const std::string& epsilon, std::size_t rank,
                      std::uint64_t seed) const;
};

// Per-class TP/FP/FN/TN. Throws ContractError on shape mismatch or entries
// other than 0/1.
ConfusionCounts confusion(const BinaryMatrix& preds, const BinaryMatrix& targets);

// F1 = 2TP / (2TP + FP + FN), 0 when the denominator is 0, averaged with
// weights proportional to support.
MetricsReport weighted_f1(const ConfusionCounts& counts);

// 1 where p >= t. Throws ContractError for t outside [0, 1] or probabilities
// outside [0, 1].
BinaryMatrix threshold(const Tensor& probabilities, double t = 0.5);

}  // namespace dplora

#endif  // DPLORA_METRICS_H_
