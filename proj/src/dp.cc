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

#include "dplora/dp.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "dplora/errors.h"
#include "json.hpp"

namespace dplora {

using nlohmann::json;

namespace {

// Non-finite doubles have no JSON literal; store them as strings.
json number_or_string(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double read_number(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

void PrivacySpec::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("privacy spec: " + msg); };
  if (!(clip_norm > 0.0)) fail("clip_norm must be positive");
  if (!(noise_multiplier >= 0.0) || !std::isfinite(noise_multiplier)) {
    fail("noise_multiplier must be finite and non-negative");
  }
  if (is_private() && !std::isfinite(clip_norm)) fail("private training needs a finite clip_norm");
  if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) fail("sampling_rate must lie in (0, 1]");
  if (max_steps == 0) fail("max_steps must be positive");
  if (train_size == 0) fail("train_size must be positive");
  if (is_private()) {
    if (!(epsilon > 0.0)) fail("epsilon must be positive");
    if (!(delta > 0.0 && delta < 1.0)) fail("delta must lie in (0, 1)");
  }
}

PrivacySpec calibrate(double epsilon, std::size_t train_size, double clip_norm,
                      double sampling_rate, std::size_t max_steps) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw ContractError("calibrate: epsilon must be positive and finite");
  }
  if (train_size < 2) throw ContractError("calibrate: train_size must be at least 2");
  PrivacySpec spec;
  spec.epsilon = epsilon;
  spec.noise_multiplier = kNoiseCalibrationConstant * (1.0 / epsilon);
  const double n = static_cast<double>(train_size);
  spec.delta = 1.0 / (n * n);
  spec.clip_norm = clip_norm;
  spec.sampling_rate = sampling_rate;
  spec.max_steps = max_steps;
  spec.train_size = train_size;
  spec.validate();
  return spec;
}

PrivacySpec non_private_spec(std::size_t train_size, double sampling_rate, std::size_t max_steps) {
  PrivacySpec spec;
  spec.epsilon = std::numeric_limits<double>::infinity();
  spec.delta = 0.0;
  spec.clip_norm = std::numeric_limits<double>::infinity();
  spec.noise_multiplier = 0.0;
  spec.sampling_rate = sampling_rate;
  spec.max_steps = max_steps;
  spec.train_size = train_size;
  spec.validate();
  return spec;
}

double l2_norm(std::span<const double> v) {
  double ss = 0.0;
  for (double x : v) ss += x * x;
  return std::sqrt(ss);
}

std::vector<double> clip_gradient(std::span<const double> g, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ContractError("clip_gradient: clip norm must be positive");
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw NumericError("clip_gradient: non-finite entry at index " + std::to_string(i));
    }
  }
  const double factor = std::max(1.0, l2_norm(g) / clip_norm);
  std::vector<double> out(g.begin(), g.end());
  if (factor > 1.0) {
    for (auto& x : out) x /= factor;
    // Rounding can leave the norm a few ulps above the bound.
    while (l2_norm(out) > clip_norm) {
      for (auto& x : out) x *= 1.0 - 0x1p-52;
    }
  }
  return out;
}

std::vector<double> add_noise(std::span<const double> clipped_sum, std::size_t batch_size,
                              const PrivacySpec& spec, Rng& rng) {
  if (batch_size == 0) throw ContractError("add_noise: batch size must be at least 1");
  std::vector<double> out(clipped_sum.begin(), clipped_sum.end());
  const double std_dev = spec.noise_std();
  if (std_dev > 0.0) {
    std::normal_distribution<double> normal(0.0, std_dev);
    for (auto& x : out) x += normal(rng);
  }
  const double b = static_cast<double>(batch_size);
  for (auto& x : out) x /= b;
  return out;
}

std::vector<std::size_t> poisson_sample(std::size_t n, double q, Rng& rng) {
  if (!(q > 0.0 && q <= 1.0)) throw ContractError("poisson_sample: q must lie in (0, 1]");
  std::vector<std::size_t> out;
  if (q == 1.0) {
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    if (unif(rng) < q) out.push_back(i);
  return out;
}

std::vector<double> flatten_gradients(std::span<const Tensor> trainable, const GradientMap& grads) {
  std::size_t total = 0;
  for (const auto& t : trainable) total += t.numel();
  std::vector<double> flat(total, 0.0);
  std::size_t offset = 0;
  for (const auto& t : trainable) {
    auto it = grads.find(t.id());
    if (it != grads.end()) std::copy(it->second.begin(), it->second.end(), flat.begin() + offset);
    offset += t.numel();
  }
  return flat;
}

DPStepReport dp_step(std::span<const Tensor> trainable, const SampleLossFn<double>& loss_fn,
                     std::span<const std::size_t> batch, const PrivacySpec& spec, Rng& noise_rng,
                     const DPStepOptions& options, std::size_t step_index) {
  DPStepReport report;
  report.step = step_index;
  report.realized_batch = batch.size();
  report.noise_std = spec.noise_std();
  if (batch.empty()) {
    report.skipped = true;
    report.message = "empty Poisson batch; no update";
    return report;
  }
  for (const auto& t : trainable) {
    if (!t.requires_grad()) throw ContractError("dp_step: trainable list holds a frozen tensor");
  }

  std::size_t total = 0;
  for (const auto& t : trainable) total += t.numel();
  std::vector<double> clipped_sum(total, 0.0);
  std::size_t clipped = 0;
  double norm_sum = 0.0;
  report.norm_min = std::numeric_limits<double>::infinity();
  report.norm_max = 0.0;

  auto absorb = [&](std::size_t sample, const GradientMap& grads) -> bool {
    const auto flat = flatten_gradients(trainable, grads);
    for (std::size_t i = 0; i < flat.size(); ++i) {
      if (!std::isfinite(flat[i])) {
        report.aborted = true;
        report.message = "non-finite gradient for sample " + std::to_string(sample) +
                         " at component " + std::to_string(i);
        return false;
      }
    }
    const double norm = l2_norm(flat);
    report.norm_min = std::min(report.norm_min, norm);
    report.norm_max = std::max(report.norm_max, norm);
    norm_sum += norm;
    const double factor = std::max(1.0, norm / spec.clip_norm);
    if (factor > 1.0) ++clipped;
    double clipped_ss = 0.0;
    for (std::size_t i = 0; i < flat.size(); ++i) {
      const double v = factor > 1.0 ? flat[i] / factor : flat[i];
      clipped_ss += v * v;
      clipped_sum[i] += v;
    }
    if (options.verify_clip && std::sqrt(clipped_ss) > spec.clip_norm * (1.0 + 1e-12)) {
      throw NumericError("dp_step: clipped norm exceeds the bound");
    }
    return true;
  };

  if (options.threads > 1) {
    const auto all = per_sample_gradients(loss_fn, batch, options.threads);
    for (std::size_t i = 0; i < batch.size(); ++i)
      if (!absorb(batch[i], all[i])) return report;
  } else {
    for (std::size_t sample : batch)
      if (!absorb(sample, compute_gradients(loss_fn(sample)))) return report;
  }

  report.norm_mean = norm_sum / static_cast<double>(batch.size());
  report.fraction_clipped = static_cast<double>(clipped) / static_cast<double>(batch.size());

  const auto update = add_noise(clipped_sum, batch.size(), spec, noise_rng);
  std::size_t offset = 0;
  for (const auto& t : trainable) {
    Tensor handle = t;
    auto data = handle.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] -= options.learning_rate * update[offset + i];
    }
    offset += data.size();
  }
  return report;
}

std::string DPStepReport::to_json_line() const {
  json j{{"step", step},
         {"realized_batch", realized_batch},
         {"norm_min", number_or_string(realized_batch ? norm_min : 0.0)},
         {"norm_mean", number_or_string(norm_mean)},
         {"norm_max", number_or_string(norm_max)},
         {"fraction_clipped", fraction_clipped},
         {"noise_std", number_or_string(noise_std)},
         {"skipped", skipped},
         {"aborted", aborted},
         {"message", message}};
  return j.dump();
}

DPStepReport DPStepReport::from_json_line(const std::string& line) {
  const json j = json::parse(line);
  DPStepReport r;
  r.step = j.at("step").get<std::size_t>();
  r.realized_batch = j.at("realized_batch").get<std::size_t>();
  r.norm_min = read_number(j.at("norm_min"));
  r.norm_mean = read_number(j.at("norm_mean"));
  r.norm_max = read_number(j.at("norm_max"));
  r.fraction_clipped = j.at("fraction_clipped").get<double>();
  r.noise_std = read_number(j.at("noise_std"));
  r.skipped = j.at("skipped").get<bool>();
  r.aborted = j.at("aborted").get<bool>();
  r.message = j.at("message").get<std::string>();
  return r;
}

PrivacyReport privacy_report(const PrivacySpec& spec, std::size_t steps_taken) {
  PrivacyReport r;
  r.epsilon = spec.epsilon;
  r.delta = spec.delta;
  r.noise_multiplier = spec.noise_multiplier;
  r.clip_norm = spec.clip_norm;
  r.sampling_rate = spec.sampling_rate;
  r.train_size = spec.train_size;
  r.max_steps = spec.max_steps;
  r.steps_taken = steps_taken;
  r.is_private = spec.is_private();
  if (r.is_private) {
    r.calibration = "fixed rule: noise_multiplier = 1.25 / epsilon, delta = 1 / train_size^2";
    r.note =
        "epsilon and delta are the configured calibration targets. No composition or "
        "subsampling accountant was run; this report does not claim a composed epsilon over "
        "the steps taken. Whether epsilon is per-step or total is not established by the "
        "calibration rule.";
  } else {
    r.calibration = "none (non-private training)";
    r.note = "no noise was added; no privacy guarantee applies";
  }
  return r;
}

std::string PrivacyReport::to_text() const {
  json j{{"format", "dplora.privacy_report.v1"},
         {"private", is_private},
         {"epsilon", number_or_string(epsilon)},
         {"delta", delta},
         {"noise_multiplier", noise_multiplier},
         {"clip_norm", number_or_string(clip_norm)},
         {"sampling_rate", sampling_rate},
         {"train_size", train_size},
         {"max_steps", max_steps},
         {"steps_taken", steps_taken},
         {"calibration", calibration},
         {"note", note}};
  return j.dump(2) + "\n";
}

PrivacyReport PrivacyReport::parse(const std::string& text) {
  const json j = json::parse(text);
  if (j.value("format", "") != "dplora.privacy_report.v1") {
    throw DataError("not a dplora privacy report");
  }
  PrivacyReport r;
  r.is_private = j.at("private").get<bool>();
  r.epsilon = read_number(j.at("epsilon"));
  r.delta = j.at("delta").get<double>();
  r.noise_multiplier = j.at("noise_multiplier").get<double>();
  r.clip_norm = read_number(j.at("clip_norm"));
  r.sampling_rate = j.at("sampling_rate").get<double>();
  r.train_size = j.at("train_size").get<std::size_t>();
  r.max_steps = j.at("max_steps").get<std::size_t>();
  r.steps_taken = j.at("steps_taken").get<std::size_t>();
  r.calibration = j.at("calibration").get<std::string>();
  r.note = j.at("note").get<std::string>();
  return r;
}

}  // namespace dplora
