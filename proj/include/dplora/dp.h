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

// DP-SGD over an explicit list of trainable tensors.
//
// One step:
//   1. per-sample gradients, each on its own tape;
//   2. each flattened per-sample gradient g is scaled by 1 / max(1, |g|_2 / C);
//   3. the clipped gradients are summed;
//   4. one draw of N(0, (sigma C)^2 I) is added to the sum;
//   5. the noisy sum is divided by the realised batch size;
//   6. plain SGD update of the trainable tensors only.
//
// Noise calibration follows a fixed rule, sigma = 1.25 / epsilon with
// delta = 1 / n^2. No composition accountant is implemented; reports echo the
// configuration and never claim a composed multi-step epsilon.

#ifndef DPLORA_DP_H_
#define DPLORA_DP_H_

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dplora/tensor.h"
#include "dplora/util.h"

namespace dplora {

inline constexpr double kNoiseCalibrationConstant = 1.25;

struct PrivacySpec {
  double epsilon = 1.0;
  double delta = 1e-8;
  double clip_norm = 1.0;
  double noise_multiplier = 1.25;
  double sampling_rate = 1.0;
  std::size_t max_steps = 1;
  std::size_t train_size = 1;

  // sigma == 0 means non-private training; clip_norm may then be +inf.
  bool is_private() const { return noise_multiplier > 0.0; }
  double noise_std() const { return is_private() ? noise_multiplier * clip_norm : 0.0; }
  // Throws ContractError on out-of-range fields.
  void validate() const;
};

// sigma = 1.25 / epsilon, delta = 1 / n^2. Throws ContractError for
// epsilon <= 0 or n < 2.
PrivacySpec calibrate(double epsilon, std::size_t train_size, double clip_norm,
                      double sampling_rate, std::size_t max_steps);

// sigma = 0 and no clipping; the step reduces to mini-batch SGD.
PrivacySpec non_private_spec(std::size_t train_size, double sampling_rate, std::size_t max_steps);

double l2_norm(std::span<const double> v);

// g / max(1, |g|_2 / C). Throws NumericError on non-finite entries and
// ContractError for C <= 0.
std::vector<double> clip_gradient(std::span<const double> g, double clip_norm);

// (clipped_sum + N(0, sigma^2 C^2 I)) / batch_size, drawing one normal per
// component in index order from `rng`.
std::vector<double> add_noise(std::span<const double> clipped_sum, std::size_t batch_size,
                              const PrivacySpec& spec, Rng& rng);

// Each index of 0..n-1 independently with probability q, ascending.
std::vector<std::size_t> poisson_sample(std::size_t n, double q, Rng& rng);

struct DPStepReport {
  std::size_t step = 0;
  std::size_t realized_batch = 0;
  double norm_min = 0.0;
  double norm_mean = 0.0;
  double norm_max = 0.0;
  double fraction_clipped = 0.0;
  double noise_std = 0.0;
  bool skipped = false;  // empty Poisson batch
  bool aborted = false;  // non-finite per-sample gradient, no update applied
  std::string message;

  std::string to_json_line() const;
  static DPStepReport from_json_line(const std::string& line);
};

struct DPStepOptions {
  double learning_rate = 0.1;
  unsigned threads = 1;
  // Re-checks |clipped g|_2 <= C for every sample.
  bool verify_clip = true;
};

// One DP-SGD step over `batch`. Only tensors in `trainable` are written.
// `noise_rng` supplies the Gaussian draw. A non-finite per-sample gradient
// leaves every tensor untouched and returns a report with aborted = true.
DPStepReport dp_step(std::span<const Tensor> trainable, const SampleLossFn<double>& loss_fn,
                     std::span<const std::size_t> batch, const PrivacySpec& spec, Rng& noise_rng,
                     const DPStepOptions& options, std::size_t step_index = 0);

// Concatenates the gradient of each trainable tensor (zeros when absent) in
// list order.
std::vector<double> flatten_gradients(std::span<const Tensor> trainable, const GradientMap& grads);

struct PrivacyReport {
  double epsilon = 0.0;
  double delta = 0.0;
  double noise_multiplier = 0.0;
  double clip_norm = 0.0;
  double sampling_rate = 0.0;
  std::size_t train_size = 0;
  std::size_t max_steps = 0;
  std::size_t steps_taken = 0;
  bool is_private = true;
  std::string calibration;
  std::string note;

  std::string to_text() const;
  static PrivacyReport parse(const std::string& text);
  bool operator==(const PrivacyReport&) const = default;
};

PrivacyReport privacy_report(const PrivacySpec& spec, std::size_t steps_taken);

}  // namespace dplora

#endif  // DPLORA_DP_H_
