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

// Bag-of-words logistic regression, one classifier per label. Used as the
// learnability self-check of a corpus: if this cannot separate the labels,
// no experiment on the corpus means anything.

#ifndef DPLORA_BASELINE_H_
#define DPLORA_BASELINE_H_

#include <cstddef>
#include <span>
#include <vector>

#include "dplora/corpus.h"
#include "dplora/metrics.h"

namespace dplora {

struct BowOptions {
  std::size_t epochs = 20;
  double learning_rate = 0.5;
  double l2 = 1e-4;
  std::uint64_t seed = 1;
};

// Binary token-presence features over the vocabulary (reserved ids
// excluded), trained with per-example SGD on the logistic loss.
class BowClassifier {
 public:
  BowClassifier(std::size_t vocab_size, std::size_t n_labels);

  void fit(std::span<const Example> train, const BowOptions& options);
  // N x L probabilities.
  Tensor predict(std::span<const Example> examples) const;

 private:
  std::vector<std::int32_t> features(const Example& ex) const;

  std::size_t vocab_size_;
  std::size_t n_labels_;
  std::vector<double> weights_;  // vocab x labels
  std::vector<double> bias_;
};

inline constexpr double kLearnabilityThreshold = 0.95;

// Trains on `train`, evaluates at threshold 0.5 on `test`.
MetricsReport bow_learnability(std::span<const Example> train, std::span<const Example> test,
                               std::size_t vocab_size, const BowOptions& options = {});

}  // namespace dplora

#endif  // DPLORA_BASELINE_H_
