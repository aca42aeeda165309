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

#include "dplora/baseline.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dplora/errors.h"
#include "dplora/model.h"
#include "dplora/util.h"

namespace dplora {

namespace {

double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

BowClassifier::BowClassifier(std::size_t vocab_size, std::size_t n_labels)
    : vocab_size_(vocab_size),
      n_labels_(n_labels),
      weights_(vocab_size * n_labels, 0.0),
      bias_(n_labels, 0.0) {
  if (vocab_size == 0 || n_labels == 0) throw ContractError("BowClassifier: empty dimensions");
}

std::vector<std::int32_t> BowClassifier::features(const Example& ex) const {
  std::vector<std::int32_t> f;
  for (auto t : ex.tokens) {
    if (t < kNumReservedIds && t != kUnkId) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size_) {
      throw InputError("BowClassifier: token id " + std::to_string(t) + " outside vocabulary");
    }
    f.push_back(t);
  }
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  return f;
}

void BowClassifier::fit(std::span<const Example> train, const BowOptions& options) {
  if (train.empty()) throw ContractError("BowClassifier: empty training set");
  std::vector<std::vector<std::int32_t>> feats;
  for (const auto& ex : train) {
    if (ex.labels.size() != n_labels_) throw ContractError("BowClassifier: label width mismatch");
    feats.push_back(features(ex));
  }
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(options.seed);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    const double lr = options.learning_rate / (1.0 + static_cast<double>(epoch));
    for (auto idx : order) {
      const auto& f = feats[idx];
      for (std::size_t l = 0; l < n_labels_; ++l) {
        double z = bias_[l];
        for (auto t : f) z += weights_[static_cast<std::size_t>(t) * n_labels_ + l];
        const double g = sigmoid_scalar(z) - train[idx].labels[l];
        bias_[l] -= lr * g;
        for (auto t : f) {
          double& w = weights_[static_cast<std::size_t>(t) * n_labels_ + l];
          w -= lr * (g + options.l2 * w);
        }
      }
    }
  }
}

Tensor BowClassifier::predict(std::span<const Example> examples) const {
  if (examples.empty()) throw ContractError("BowClassifier: nothing to predict");
  std::vector<double> out;
  out.reserve(examples.size() * n_labels_);
  for (const auto& ex : examples) {
    const auto f = features(ex);
    for (std::size_t l = 0; l < n_labels_; ++l) {
      double z = bias_[l];
      for (auto t : f) z += weights_[static_cast<std::size_t>(t) * n_labels_ + l];
      out.push_back(sigmoid_scalar(z));
    }
  }
  return Tensor::from({examples.size(), n_labels_}, std::move(out));
}

MetricsReport bow_learnability(std::span<const Example> train, std::span<const Example> test,
                               std::size_t vocab_size, const BowOptions& options) {
  if (train.empty() || test.empty()) throw ContractError("bow_learnability: empty split");
  const std::size_t n_labels = train.front().labels.size();
  BowClassifier clf(vocab_size, n_labels);
  clf.fit(train, options);
  const BinaryMatrix preds = threshold(clf.predict(test), 0.5);
  BinaryMatrix targets{test.size(), n_labels, {}};
  for (const auto& ex : test)
    for (double y : ex.labels) targets.values.push_back(y > 0.5 ? 1 : 0);
  return weighted_f1(confusion(preds, targets));
}

}  // namespace dplora
