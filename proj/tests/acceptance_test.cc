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

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. `--only 1,3` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dplora/commands.h"
#include "dplora/corpus.h"
#include "dplora/dp.h"
#include "dplora/errors.h"
#include "dplora/metrics.h"
#include "dplora/model.h"
#include "dplora/probe.h"
#include "dplora/runner.h"
#include "dplora/util.h"
#include "gradcheck.h"

namespace fs = std::filesystem;
using namespace dplora;
using testing::grad_check;
using testing::random_tensor;
using testing::weighted_sum;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

struct Stats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation
};

Stats stats(const std::vector<double>& v) {
  Stats s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

double pooled_std(const Stats& a, const Stats& b) {
  return std::sqrt((a.std * a.std + b.std * b.std) / 2.0);
}

// Cells listed in the order their means should not decrease. Passes with no
// inversion, or a single inversion no larger than the pair's pooled std.
Verdict monotone_trend(const std::vector<std::string>& names, const std::vector<Stats>& cells) {
  Verdict v;
  std::ostringstream os;
  std::size_t inversions = 0;
  bool within = true;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    os << names[i] << " " << fmt("%.4f", cells[i].mean) << "+-" << fmt("%.4f", cells[i].std);
    if (i + 1 < cells.size()) os << ", ";
  }
  for (std::size_t i = 0; i + 1 < cells.size(); ++i) {
    const double drop = cells[i].mean - cells[i + 1].mean;
    if (drop > 0.0) {
      ++inversions;
      const double ps = pooled_std(cells[i], cells[i + 1]);
      os << "; inversion " << names[i] << ">" << names[i + 1] << " by " << fmt("%.4f", drop)
         << " (pooled std " << fmt("%.4f", ps) << ")";
      if (drop > ps) within = false;
    }
  }
  v.pass = inversions == 0 || (inversions == 1 && within);
  v.detail = os.str();
  return v;
}

// ---------------------------------------------------------------------------
// 1. gradients

double op_gradcheck_max() {
  Rng rng = make_rng(11);
  double worst = 0.0;
  auto check = [&](const std::vector<std::pair<std::string, Tensor>>& leaves,
                   const std::function<Tensor()>& fn) {
    worst = std::max(worst, grad_check(leaves, fn).max_rel_error);
  };
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({3, 4}, rng);
  const Tensor row = random_tensor({4}, rng);
  const Tensor pos = random_tensor({3, 4}, rng, 0.2, 2.0);
  const Tensor m = random_tensor({4, 5}, rng);
  const Tensor bias = random_tensor({5}, rng);
  const Tensor w = random_tensor({5, 4}, rng);
  check({{"a", a}, {"row", row}}, [&] { return weighted_sum(add(a, row), 1); });
  check({{"a", a}, {"b", b}}, [&] { return weighted_sum(sub(a, b), 2); });
  check({{"a", a}, {"row", row}}, [&] { return weighted_sum(mul(a, row), 3); });
  check({{"a", a}}, [&] { return weighted_sum(scale(a, -1.7), 4); });
  check({{"a", a}, {"m", m}}, [&] { return weighted_sum(matmul(a, m), 5); });
  check({{"a", a}}, [&] { return weighted_sum(transpose(a), 6); });
  check({{"a", a}, {"w", w}, {"bias", bias}}, [&] { return weighted_sum(linear(a, w, &bias), 7); });
  check({{"a", a}}, [&] { return weighted_sum(relu(a), 8); });
  check({{"a", a}}, [&] { return weighted_sum(gelu(a), 9); });
  check({{"a", a}}, [&] { return weighted_sum(sigmoid(a), 10); });
  check({{"a", a}}, [&] { return weighted_sum(exp(a), 11); });
  check({{"pos", pos}}, [&] { return weighted_sum(log(pos), 12); });
  check({{"a", a}}, [&] { return weighted_sum(softmax(a), 13); });
  check({{"a", a}}, [&] { return weighted_sum(layer_norm(a), 14); });
  check({{"a", a}}, [&] { return scale(sum(a), 0.3); });
  check({{"a", a}}, [&] { return scale(mean(a), 0.3); });
  check({{"a", a}}, [&] { return weighted_sum(mean_rows(a), 15); });
  const std::vector<std::int32_t> ids{2, 0, 2, 1};
  check({{"a", a}}, [&] { return weighted_sum(embedding(a, ids), 16); });
  const std::vector<std::size_t> rows{2, 2, 0};
  check({{"a", a}}, [&] { return weighted_sum(select_rows(a, rows), 17); });
  check({{"a", a}}, [&] { return weighted_sum(slice_cols(a, 1, 2), 18); });
  check({{"a", a}, {"b", b}}, [&] { return weighted_sum(concat_cols(std::vector<Tensor>{a, b}), 19); });
  check({{"a", a}, {"b", b}}, [&] { return weighted_sum(concat_rows(std::vector<Tensor>{a, b}), 20); });
  const Tensor targets = Tensor::from({3, 4}, {1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1});
  check({{"a", a}}, [&] { return bce_with_logits(scale(a, 4.0), targets); });
  const std::vector<std::int32_t> classes{3, 0, 1};
  check({{"a", a}}, [&] { return softmax_cross_entropy(a, classes); });
  return worst;
}

Verdict criterion_gradients() {
  const auto t0 = Clock::now();
  const double ops = op_gradcheck_max();

  ModelConfig c;  // default configuration
  auto p = ModelParams::init(c, 21);
  attach_lora(p, attention_projection_ids(c), 4, 1.0, true, 22);
  p.unfreeze_all();
  Rng rng = make_rng(23);
  std::normal_distribution<double> normal(0.0, 0.05);
  for (auto& [target, ad] : p.adapters())
    for (auto& v : ad.b.mutable_data()) v = normal(rng);

  // One encoding feeds both heads: pooled classification and the tied
  // completion head at the masked slot.
  const std::vector<std::int32_t> masked{kClsId, 700, kMaskId};
  const std::vector<std::size_t> slot{2};
  const std::vector<std::int32_t> answer{1500};
  std::vector<double> y(c.n_labels, 0.0);
  y[1] = y[5] = y[9] = 1.0;
  const Tensor targets = Tensor::from({1, c.n_labels}, y);
  const auto loss = [&] {
    const Tensor h = encode(p, masked);
    const Tensor& hb = p.weight("head.bias");
    const Tensor cls = linear(mean_rows(h), p.weight("head.weight"), &hb);
    return add(bce_multilabel_loss(cls, targets),
               softmax_cross_entropy(completion_logits(select_rows(h, slot), p), answer));
  };
  const auto r = grad_check(p.trainable(), loss, 3e-5);
  const double secs = since(t0);
  Verdict v;
  v.pass = ops < 1e-4 && r.max_rel_error < 1e-4 && r.checked == p.trainable_count() && secs < 120.0;
  v.detail = "ops max rel " + fmt("%.2e", ops) + "; model " + std::to_string(r.checked) +
             " parameters, max rel " + fmt("%.2e", r.max_rel_error) + " at " + r.worst + " (analytic " +
             fmt("%.6e", r.worst_analytic) + ", numeric " + fmt("%.6e", r.worst_numeric) + "); " +
             fmt("%.0f s", secs);
  return v;
}

// ---------------------------------------------------------------------------
// 2. DP mechanism

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 40;
  c.max_seq_len = 12;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 24;
  c.n_labels = 4;
  return c;
}

struct ToyData {
  std::vector<std::vector<std::int32_t>> seqs;
  std::vector<Tensor> targets;
};

ToyData toy_data(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  ToyData d;
  Rng rng = make_rng(seed);
  std::uniform_int_distribution<std::int32_t> tok(kNumReservedIds,
                                                  static_cast<std::int32_t>(c.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> len(2, c.max_seq_len);
  std::bernoulli_distribution bit(0.4);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::int32_t> s{kClsId};
    const std::size_t l = len(rng);
    while (s.size() < l) s.push_back(tok(rng));
    d.seqs.push_back(std::move(s));
    std::vector<double> y(c.n_labels);
    for (auto& v : y) v = bit(rng) ? 1.0 : 0.0;
    d.targets.push_back(Tensor::from({1, c.n_labels}, y));
  }
  return d;
}

SampleLossFn<double> toy_loss(const ModelParams& p, const ToyData& d) {
  return [&p, &d](std::size_t i) {
    return bce_multilabel_loss(forward_classify_one(p, d.seqs[i]), d.targets[i]);
  };
}

std::vector<Tensor> trainable_tensors(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : p.trainable()) out.push_back(t);
  return out;
}

Verdict criterion_dp() {
  const auto t0 = Clock::now();
  std::ostringstream os;
  bool pass = true;

  // (a) clipping bound
  {
    Rng rng = make_rng(31);
    std::uniform_int_distribution<std::size_t> dim(1, 64);
    std::uniform_real_distribution<double> log_scale(-3.0, 3.0);
    std::uniform_real_distribution<double> clip(0.1, 10.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    std::size_t violations = 0;
    for (int t = 0; t < 100000; ++t) {
      std::vector<double> g(dim(rng));
      const double s = std::pow(10.0, log_scale(rng));
      for (auto& x : g) x = s * normal(rng);
      const double c = clip(rng);
      const double ratio = l2_norm(clip_gradient(g, c)) / c;
      worst = std::max(worst, ratio);
      if (l2_norm(clip_gradient(g, c)) > c) ++violations;
    }
    pass = pass && violations == 0;
    os << "(a) 1e5 clips, " << violations << " above C, max |g|/C " << fmt("%.17g", worst);
  }
  // (b) noise scale
  {
    Rng rng = make_rng(32);
    const std::vector<double> zeros(10000, 0.0);
    os << "; (b)";
    for (double sigma : {0.125, 1.25, 125.0}) {
      PrivacySpec spec;
      spec.noise_multiplier = sigma;
      spec.clip_norm = 1.0;
      const auto noise = add_noise(zeros, 1, spec, rng);
      const double rel = stats(noise).std / spec.noise_std() - 1.0;
      pass = pass && std::abs(rel) < 0.02;
      os << " sigma " << sigma << " rel " << fmt("%+.4f", rel);
    }
  }
  // (c) sigma = 0 against hand-written SGD on a small transformer with adapters
  {
    const ModelConfig c = small_config();
    const ToyData data = toy_data(c, 24, 33);
    auto dp_model = ModelParams::init(c, 34);
    attach_lora(dp_model, attention_projection_ids(c), 2, 1.0, true, 35);
    Rng init = make_rng(36);
    std::normal_distribution<double> normal(0.0, 0.05);
    for (auto& [target, ad] : dp_model.adapters())
      for (auto& v : ad.b.mutable_data()) v = normal(init);
    auto sgd_model = dp_model.clone();
    const auto dp_params = trainable_tensors(dp_model);
    auto sgd_params = trainable_tensors(sgd_model);
    const auto spec = non_private_spec(data.seqs.size(), 0.25, 30);
    DPStepOptions opt;
    opt.learning_rate = 0.4;
    Rng noise = make_rng(37);
    const auto sgd_loss = toy_loss(sgd_model, data);
    for (std::size_t step = 0; step < 30; ++step) {
      Rng sampler = make_rng(derive_seed(38, {step}));
      const auto batch = poisson_sample(data.seqs.size(), 0.25, sampler);
      dp_step(dp_params, toy_loss(dp_model, data), batch, spec, noise, opt, step);
      if (batch.empty()) continue;
      std::vector<std::vector<double>> sums;
      for (const auto& t : sgd_params) sums.emplace_back(t.numel(), 0.0);
      for (std::size_t i : batch) {
        const auto g = compute_gradients(sgd_loss(i));
        for (std::size_t k = 0; k < sgd_params.size(); ++k) {
          const auto it = g.find(sgd_params[k].id());
          if (it == g.end()) continue;
          for (std::size_t e = 0; e < sums[k].size(); ++e) sums[k][e] += it->second[e];
        }
      }
      const double b = static_cast<double>(batch.size());
      for (std::size_t k = 0; k < sgd_params.size(); ++k) {
        auto d = sgd_params[k].mutable_data();
        for (std::size_t e = 0; e < d.size(); ++e) d[e] -= 0.4 * (sums[k][e] / b);
      }
    }
    bool same = true;
    for (std::size_t k = 0; k < dp_params.size(); ++k)
      same = same && dp_params[k].values() == sgd_params[k].values();
    pass = pass && same;
    os << "; (c) sigma=0 vs SGD over 30 steps " << (same ? "bit-identical" : "DIFFERENT");
  }
  // (d) replace-one sensitivity of the clipped sum
  {
    Rng rng = make_rng(39);
    std::uniform_int_distribution<std::size_t> size(1, 32);
    std::uniform_int_distribution<std::size_t> dim(1, 50);
    std::uniform_real_distribution<double> log_scale(-2.0, 2.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double c = 1.0;
    double worst = 0.0;
    auto draw = [&](std::size_t d) {
      std::vector<double> g(d);
      const double s = std::pow(10.0, log_scale(rng));
      for (auto& x : g) x = s * normal(rng);
      return g;
    };
    for (int t = 0; t < 1000; ++t) {
      const std::size_t b = size(rng), d = dim(rng);
      std::vector<std::vector<double>> batch;
      for (std::size_t i = 0; i < b; ++i) batch.push_back(draw(d));
      auto neighbour = batch;
      neighbour[rng() % b] = draw(d);
      auto clipped_sum = [&](const std::vector<std::vector<double>>& gs) {
        std::vector<double> s(d, 0.0);
        for (const auto& g : gs) {
          const auto cg = clip_gradient(g, c);
          for (std::size_t k = 0; k < d; ++k) s[k] += cg[k];
        }
        return s;
      };
      const auto s1 = clipped_sum(batch), s2 = clipped_sum(neighbour);
      std::vector<double> diff(d);
      for (std::size_t k = 0; k < d; ++k) diff[k] = s1[k] - s2[k];
      worst = std::max(worst, l2_norm(diff) / c);
    }
    pass = pass && worst <= 2.0;
    os << "; (d) 1e3 batches, max sensitivity " << fmt("%.4f", worst) << " C";
  }
  const double secs = since(t0);
  pass = pass && secs < 180.0;
  os << "; " << fmt("%.0f s", secs);
  return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 3. LoRA contracts

std::map<std::string, std::vector<double>> frozen_snapshot(const ModelParams& p) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : p.weights())
    if (!ModelParams::is_head_weight(name)) out[name] = t.values();
  return out;
}

bool bytes_equal(const std::map<std::string, std::vector<double>>& a,
                 const std::map<std::string, std::vector<double>>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [name, v] : a) {
    const auto& w = b.at(name);
    if (v.size() != w.size() || std::memcmp(v.data(), w.data(), v.size() * sizeof(double)) != 0)
      return false;
  }
  return true;
}

TokenBatch token_batch(const std::vector<std::vector<std::int32_t>>& seqs, std::size_t t) {
  TokenBatch b;
  b.batch = seqs.size();
  b.seq_len = t;
  b.ids.assign(b.batch * t, kPadId);
  for (std::size_t r = 0; r < seqs.size(); ++r)
    std::copy(seqs[r].begin(), seqs[r].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * t));
  return b;
}

Verdict criterion_lora() {
  const auto t0 = Clock::now();
  std::ostringstream os;
  bool pass = true;

  // Zero-initialised adapters: bit-exact identity for every rank and target set.
  {
    const ModelConfig c;
    const auto base = ModelParams::init(c, 41);
    Rng rng = make_rng(42);
    std::vector<std::vector<std::int32_t>> seqs;
    for (int r = 0; r < 4; ++r) {
      std::vector<std::int32_t> s{kClsId};
      for (int k = 0; k < 20 + 7 * r; ++k) s.push_back(static_cast<std::int32_t>(4 + rng() % 2000));
      seqs.push_back(s);
    }
    const auto batch = token_batch(seqs, 48);
    const auto ref = forward_classify(base, batch).values();
    bool identical = true;
    for (std::size_t rank : {1, 2, 4, 8}) {
      for (bool ffn : {false, true}) {
        auto p = base.clone();
        auto targets = attention_projection_ids(c);
        if (ffn) {
          const auto f = ffn_projection_ids(c);
          targets.insert(f.begin(), f.end());
        }
        attach_lora(p, targets, rank, 1.0, true, 43 + rank);
        identical = identical && forward_classify(p, batch).values() == ref;
      }
    }
    pass = pass && identical;
    os << "zero-init identity " << (identical ? "bit-exact" : "BROKEN");
  }
  // 500 DP steps leave the backbone bytes alone; merged weights agree.
  {
    const ModelConfig c = small_config();
    const ToyData data = toy_data(c, 40, 44);
    auto p = ModelParams::init(c, 45);
    attach_lora(p, attention_projection_ids(c), 4, 1.0, true, 46);
    const auto before = frozen_snapshot(p);
    const auto checksum = p.backbone_checksum();
    const auto adapters_before = p.adapters().begin()->second.b.values();
    const auto params = trainable_tensors(p);
    const auto spec = calibrate(1.0, data.seqs.size(), 1.0, 0.2, 500);
    DPStepOptions opt;
    opt.learning_rate = 0.5;
    for (std::size_t step = 0; step < 500; ++step) {
      Rng sampler = make_rng(derive_seed(47, {step}));
      Rng noise = make_rng(derive_seed(48, {step}));
      dp_step(params, toy_loss(p, data), poisson_sample(data.seqs.size(), 0.2, sampler), spec,
              noise, opt, step);
    }
    const bool frozen = bytes_equal(before, frozen_snapshot(p)) && p.backbone_checksum() == checksum;
    const bool moved = p.adapters().begin()->second.b.values() != adapters_before;
    pass = pass && frozen && moved;
    os << "; backbone after 500 DP steps " << (frozen ? "byte-identical" : "MODIFIED")
       << (moved ? "" : " (adapters never moved)");

    const auto merged = merge_all(p);
    const auto batch = token_batch(data.seqs, c.max_seq_len);
    const auto x = forward_classify(p, batch).values();
    const auto y = forward_classify(merged, batch).values();
    double diff = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) diff = std::max(diff, std::abs(x[i] - y[i]));
    pass = pass && diff <= 1e-10;
    os << "; merge max diff " << fmt("%.2e", diff);
  }
  // Closed-form trainable counts.
  {
    const ModelConfig c;
    const std::size_t head = c.n_labels * c.d_model + c.n_labels;
    bool counts = true;
    os << "; counts";
    for (std::size_t r : {1, 2, 4, 8}) {
      auto p = ModelParams::init(c, 49);
      attach_lora(p, attention_projection_ids(c), r, 1.0, true, 50);
      const std::size_t attn = c.n_layers * 4 * r * (c.d_model + c.d_model);
      auto q = ModelParams::init(c, 49);
      auto targets = attention_projection_ids(c);
      const auto f = ffn_projection_ids(c);
      targets.insert(f.begin(), f.end());
      attach_lora(q, targets, r, 1.0, false, 50);
      const std::size_t ffn = c.n_layers * 2 * r * (c.d_ff + c.d_model);
      const bool ok = p.trainable_count() == attn + head && q.trainable_count() == attn + ffn;
      counts = counts && ok;
      os << " r" << r << "=" << p.trainable_count() << (ok ? "" : "(WRONG)");
    }
    pass = pass && counts;
  }
  const double secs = since(t0);
  pass = pass && secs < 120.0;
  os << "; " << fmt("%.0f s", secs);
  return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 4-6. privacy-utility experiments on the 2000-patient corpus

struct Experiment {
  Vocabulary vocab;
  ModelParams backbone;
  Dataset data;
  std::map<std::string, double> f1;  // run key -> weighted F1
  double setup_seconds = 0.0;
};

// Backbone pretrained on a separate public corpus with its own vocabulary.
struct PublicBackbone {
  Vocabulary vocab;
  ModelParams params;
  double seconds = 0.0;
};

const PublicBackbone& public_backbone() {
  static const PublicBackbone bb = [] {
    const auto t0 = Clock::now();
    SyntheticOptions o;
    o.n_patients = 2000;
    o.seed = 1001;
    o.max_reports = 1;
    const auto records = generate_synthetic_corpus(o);
    std::vector<std::string> texts;
    for (const auto& r : records) texts.push_back(model_text(aggregate_patient_text(std::span(&r, 1))));
    auto vt = build_vocab_and_tokenize(texts, 2048, 64);
    ModelConfig mc;
    mc.vocab_size = vt.vocab.size();
    mc.max_seq_len = 64;
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.n_layers = 2;
    mc.d_ff = 64;
    mc.n_labels = 14;
    PretrainOptions po;
    po.epochs = 8;
    po.learning_rate = 3e-3;
    po.seed = 5;
    progress("pretraining public backbone");
    PublicBackbone out{vt.vocab, pretrain_backbone(mc, vt.sequences, po), 0.0};
    out.seconds = since(t0);
    return out;
  }();
  return bb;
}

RunConfig utility_config() {
  RunConfig c;
  c.lora_scale = 8.0;
  c.learning_rate = 1.0;
  c.epochs = 10;
  c.expected_batch = 64.0;
  c.clip_norm = 1.0;
  return c;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

Experiment& utility_experiment() {
  static Experiment e = [] {
    Experiment x;
    const auto& bb = public_backbone();
    SyntheticOptions o;
    o.n_patients = 2000;
    o.seed = 7;
    o.max_reports = 1;
    auto records = generate_synthetic_corpus(o);
    auto manifest = split_by_patient(records, {0.8, 0.1, 0.1}, 7);
    x.data = make_dataset(std::move(records), std::move(manifest), bb.vocab, 64);
    x.vocab = bb.vocab;
    x.backbone = bb.params;
    x.setup_seconds = bb.seconds;
    return x;
  }();
  return e;
}

double run_utility(TrainMode mode, std::optional<double> eps, std::optional<std::size_t> rank,
                   std::uint64_t seed, double* seconds = nullptr) {
  auto& e = utility_experiment();
  const std::string key = mode_name(mode) + "/" + (eps ? format_double(*eps) : "-") + "/" +
                          (rank ? std::to_string(*rank) : "-") + "/" + std::to_string(seed);
  const auto it = e.f1.find(key);
  if (it != e.f1.end()) return it->second;
  RunConfig c = utility_config();
  c.mode = mode;
  if (eps) c.epsilon = *eps;
  if (rank) c.rank = *rank;
  const auto t0 = Clock::now();
  const double f1 = train_and_evaluate(c, e.backbone, e.data, seed).metrics.weighted_f1;
  const double secs = since(t0);
  if (seconds) *seconds += secs;
  progress(key + " f1 " + fmt("%.4f", f1) + fmt(" (%.0f s)", secs));
  e.f1[key] = f1;
  return f1;
}

const std::vector<double> kEpsilons{0.01, 0.1, 1.0, 10.0};

Stats dp_cell(double eps, std::size_t rank, double* seconds = nullptr) {
  std::vector<double> v;
  for (auto s : kSeeds) v.push_back(run_utility(TrainMode::kDpLora, eps, rank, s, seconds));
  return stats(v);
}

Stats lora_cell(std::size_t rank) {
  std::vector<double> v;
  for (auto s : kSeeds) v.push_back(run_utility(TrainMode::kLora, std::nullopt, rank, s));
  return stats(v);
}

Verdict criterion_privacy_utility() {
  const auto t0 = Clock::now();
  utility_experiment();
  const double setup = since(t0);
  double train_seconds = 0.0;
  std::vector<Stats> cells;
  std::vector<std::string> names;
  for (double eps : kEpsilons) {
    cells.push_back(dp_cell(eps, 4, &train_seconds));
    names.push_back("eps " + format_double(eps));
  }
  Verdict v = monotone_trend(names, cells);
  const double gap = cells.back().mean - cells.front().mean;
  // The backbone is shared by later criteria; its pretraining counts here.
  const double secs = setup + train_seconds;
  v.pass = v.pass && gap >= 0.05 && secs < 1800.0;
  v.detail += "; eps10 - eps0.01 = " + fmt("%.4f", gap) + "; " + fmt("%.0f s", secs);
  return v;
}

Verdict criterion_method_ordering() {
  std::vector<double> full;
  for (auto s : kSeeds) full.push_back(run_utility(TrainMode::kFullFt, std::nullopt, std::nullopt, s));
  const Stats f = stats(full);
  const Stats l = lora_cell(4);
  Stats best;
  double best_eps = 0.0;
  for (double eps : kEpsilons) {
    const Stats d = dp_cell(eps, 4);
    if (eps == kEpsilons.front() || d.mean > best.mean) {
      best = d;
      best_eps = eps;
    }
  }
  Verdict v;
  v.pass = f.mean - l.mean >= -0.02 && l.mean - best.mean >= -0.02;
  v.detail = "full-ft " + fmt("%.4f", f.mean) + ", lora " + fmt("%.4f", l.mean) +
             ", best dp-lora (eps " + format_double(best_eps) + ") " + fmt("%.4f", best.mean) +
             "; gaps " + fmt("%+.4f", f.mean - l.mean) + ", " + fmt("%+.4f", l.mean - best.mean);
  return v;
}

Verdict criterion_rank() {
  const std::vector<std::size_t> ranks{1, 2, 4, 8};
  std::vector<Stats> cells;
  std::vector<std::string> names;
  for (auto r : ranks) {
    cells.push_back(lora_cell(r));
    names.push_back("r" + std::to_string(r));
  }
  Verdict v = monotone_trend(names, cells);
  std::size_t not_dominant = 0;
  std::ostringstream os;
  for (auto s : kSeeds) {
    std::vector<double> f;
    for (auto r : ranks) f.push_back(run_utility(TrainMode::kDpLora, 1.0, r, s));
    bool dominates = true;
    for (std::size_t i = 0; i + 1 < f.size(); ++i) dominates = dominates && f.back() > f[i];
    if (!dominates) ++not_dominant;
    os << " s" << s << "[";
    for (std::size_t i = 0; i < f.size(); ++i) os << (i ? " " : "") << fmt("%.3f", f[i]);
    os << "]";
  }
  v.pass = v.pass && not_dominant >= 3;
  v.detail = "non-private " + v.detail + "; eps=1 r8 not dominant in " +
             std::to_string(not_dominant) + "/5 seeds:" + os.str();
  return v;
}

// ---------------------------------------------------------------------------
// 7. memorization on a 200-report corpus

Verdict criterion_memorization() {
  const auto t0 = Clock::now();
  const auto& bb = public_backbone();
  SyntheticOptions o;
  o.n_patients = 200;
  o.seed = 202;
  o.max_reports = 1;
  auto records = generate_synthetic_corpus(o);
  auto manifest = split_by_patient(records, {0.8, 0.1, 0.1}, 202);
  const Dataset data = make_dataset(std::move(records), std::move(manifest), bb.vocab, 64);
  std::vector<ProbeItem> pool;
  for (const auto& ex : data.train) pool.push_back({ex.patient_id, ex.tokens});
  const auto items = sample_probe_set(pool, 100, 1);

  RunConfig base;
  base.lora_scale = 8.0;
  base.learning_rate = 0.1;
  base.epochs = 30;
  base.expected_batch = 16.0;
  base.mlm_weight = 1.0;
  base.mask_fraction = 0.3;
  // Listed weakest privacy first.
  const std::vector<std::optional<double>> arms{std::nullopt, 10.0, 1.0, 0.1, 0.01};
  std::vector<std::vector<double>> per_arm(arms.size());
  for (auto seed : kSeeds) {
    std::vector<ModelParams> models;
    for (const auto& eps : arms) {
      RunConfig c = base;
      c.mode = eps ? TrainMode::kDpLora : TrainMode::kLora;
      if (eps) c.epsilon = *eps;
      models.push_back(train_and_evaluate(c, bb.params, data, seed).params);
    }
    std::vector<ProbeModel> pm;
    for (std::size_t i = 0; i < models.size(); ++i) pm.push_back({"m" + std::to_string(i), &models[i]});
    const auto results = run_probe(pm, items, 0.3);
    std::ostringstream line;
    line << "probe seed " << seed << ":";
    for (std::size_t i = 0; i < results.size(); ++i) {
      per_arm[i].push_back(results[i].mean);
      line << " " << fmt("%.4f", results[i].mean);
    }
    progress(line.str());
  }
  std::vector<Stats> cells;
  std::vector<std::string> names;
  for (std::size_t i = arms.size(); i-- > 0;) {
    cells.push_back(stats(per_arm[i]));
    names.push_back(arms[i] ? "eps " + format_double(*arms[i]) : "non-private");
  }
  Verdict v = monotone_trend(names, cells);
  const Stats& np = cells.back();
  const Stats& strict = cells.front();
  const double margin = (np.mean - strict.mean) / pooled_std(np, strict);
  v.pass = v.pass && margin >= 2.0;
  v.detail += "; non-private - eps0.01 = " + fmt("%.2f", margin) + " pooled std; " +
              fmt("%.0f s", since(t0));
  return v;
}

// ---------------------------------------------------------------------------
// 8. weighted F1 against the definition

BinaryMatrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double p) {
  std::bernoulli_distribution b(p);
  BinaryMatrix m{rows, cols, std::vector<std::uint8_t>(rows * cols)};
  for (auto& v : m.values) v = b(rng) ? 1 : 0;
  return m;
}

double oracle_weighted_f1(const BinaryMatrix& p, const BinaryMatrix& t) {
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < p.cols; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t r = 0; r < p.rows; ++r) {
      const bool pp = p.at(r, c), tt = t.at(r, c);
      tp += pp && tt;
      fp += pp && !tt;
      fn += !pp && tt;
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
    num += f1 * (tp + fn);
    den += tp + fn;
  }
  return den > 0 ? num / den : 0.0;
}

Verdict criterion_metrics() {
  Rng rng = make_rng(81);
  std::uniform_int_distribution<std::size_t> rows(1, 200), cols(1, 20);
  std::uniform_real_distribution<double> prob(0.02, 0.9);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t r = rows(rng), c = cols(rng);
    const auto truth = random_matrix(r, c, rng, prob(rng));
    const auto pred = random_matrix(r, c, rng, prob(rng));
    worst = std::max(worst, std::abs(weighted_f1(confusion(pred, truth)).weighted_f1 -
                                     oracle_weighted_f1(pred, truth)));
  }
  const BinaryMatrix p{4, 2, {1, 0, 1, 0, 1, 0, 0, 0}};
  const BinaryMatrix t{4, 2, {1, 0, 1, 0, 1, 0, 0, 1}};
  const double hand = weighted_f1(confusion(p, t)).weighted_f1;
  return {worst <= 1e-12 && hand == 0.75,
          "1000 instances, max |diff| " + fmt("%.2e", worst) + "; hand case " + fmt("%.17g", hand)};
}

// ---------------------------------------------------------------------------
// 9. pipeline

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path().string());
  return out;
}

Verdict criterion_pipeline() {
  std::ostringstream os;
  bool pass = true;

  // Every label vector up to length 6 over the four codes.
  {
    const std::map<int, std::uint8_t> table{{1, 1}, {0, 0}, {-1, 0}, {2, 0}};
    const std::vector<int> codes{1, 0, -1, 2};
    std::size_t checked = 0;
    bool ok = true;
    for (std::size_t len = 1; len <= 6; ++len) {
      std::vector<std::size_t> digit(len, 0);
      while (true) {
        std::vector<int> raw(len);
        LabelVector want(len);
        for (std::size_t i = 0; i < len; ++i) {
          raw[i] = codes[digit[i]];
          want[i] = table.at(raw[i]);
        }
        ok = ok && normalize_labels(raw) == want;
        ++checked;
        std::size_t i = 0;
        while (i < len && ++digit[i] == codes.size()) digit[i++] = 0;
        if (i == len) break;
      }
    }
    for (int bad : {-3, -2, 3, 4, 99}) {
      try {
        normalize_labels(std::vector<int>{bad});
        ok = false;
      } catch (const DataError&) {
      }
    }
    pass = pass && ok;
    os << "normalization " << checked << " vectors " << (ok ? "ok" : "WRONG");
  }
  // Patient-level disjointness over random corpora.
  {
    Rng rng = make_rng(91);
    std::size_t leaks = 0, lost = 0, tested = 0;
    while (tested < 1000) {
      const std::size_t patients = 3 + rng() % 60;
      std::vector<ReportRecord> corpus;
      for (std::size_t p = 0; p < patients; ++p) {
        const std::size_t reports = 1 + rng() % 4;
        for (std::size_t r = 0; r < reports; ++r)
          corpus.push_back(ReportRecord{"p" + std::to_string(p),
                                        "r" + std::to_string(p) + "_" + std::to_string(r), "f", "i",
                                        {1, 0}});
      }
      std::shuffle(corpus.begin(), corpus.end(), rng);
      const auto m = split_by_patient(corpus, {0.6, 0.2, 0.2}, rng());
      ++tested;
      std::map<std::string, std::string> owner;
      for (const auto& r : corpus) owner[r.report_id] = r.patient_id;
      std::map<std::string, std::set<std::string>> sets;
      std::size_t total = 0;
      for (const auto& [split, ids] : m.reports) {
        total += ids.size();
        for (const auto& id : ids) sets[split].insert(owner.at(id));
      }
      if (total != corpus.size()) ++lost;
      for (auto a = sets.begin(); a != sets.end(); ++a)
        for (auto b = std::next(a); b != sets.end(); ++b)
          for (const auto& pid : a->second)
            if (b->second.count(pid)) ++leaks;
    }
    pass = pass && leaks == 0 && lost == 0;
    os << "; " << tested << " random splits, " << leaks << " shared patients, " << lost
       << " with lost reports";
  }
  // Byte-identical reruns of every verb.
  {
    const fs::path root = fs::temp_directory_path() / "dplora_acceptance_rerun";
    auto run_all = [&] {
      fs::remove_all(root);
      fs::create_directories(root);
      GenOptions g;
      g.patients = 80;
      g.max_reports = 2;
      g.corpus_out = (root / "corpus.jsonl").string();
      g.manifest_out = (root / "manifest.json").string();
      cmd_gen(g);
      RunConfig c;
      c.model.d_model = 8;
      c.model.n_heads = 2;
      c.model.n_layers = 1;
      c.model.d_ff = 16;
      c.model.max_seq_len = 48;
      c.epochs = 2;
      c.expected_batch = 16;
      c.corpus = g.corpus_out;
      c.manifest = g.manifest_out;
      c.out_dir = (root / "dp").string();
      cmd_train(c);
      c.mode = TrainMode::kLora;
      c.mlm_weight = 0.5;
      c.out_dir = (root / "np").string();
      cmd_train(c);
      RunConfig s = c;
      s.mode = TrainMode::kDpLora;
      s.mlm_weight = 0.0;
      s.epsilons = {0.1, 10.0};
      s.ranks = {1, 4};
      s.seeds = {1, 2};
      s.out_dir = (root / "sweep").string();
      cmd_sweep(s);
      ProbeCommandOptions po;
      po.checkpoints = {{"np", (root / "np/checkpoint.json").string()},
                        {"dp", (root / "dp/checkpoint.json").string()}};
      po.items = 20;
      c.out_dir = (root / "probe").string();
      cmd_probe(c, po);
      return snapshot_tree(root);
    };
    const auto first = run_all();
    const auto second = run_all();
    std::size_t differing = 0;
    for (const auto& [path, bytes] : first) {
      const auto it = second.find(path);
      if (it == second.end() || it->second != bytes) ++differing;
    }
    if (first.size() != second.size()) ++differing;
    fs::remove_all(root);
    pass = pass && differing == 0 && first.size() >= 15;
    os << "; rerun of gen/train/sweep/probe: " << first.size() << " files, " << differing
       << " differ";
  }
  return {pass, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    }
  }
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient correctness", criterion_gradients},
      {"dp mechanism", criterion_dp},
      {"lora contracts", criterion_lora},
      {"privacy-utility trend", criterion_privacy_utility},
      {"method ordering", criterion_method_ordering},
      {"rank interaction", criterion_rank},
      {"memorization trend", criterion_memorization},
      {"metrics oracle", criterion_metrics},
      {"pipeline oracles", criterion_pipeline},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    std::cerr << "criterion " << id << ": " << criteria[i].first << std::endl;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first
              << "): " << v.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
