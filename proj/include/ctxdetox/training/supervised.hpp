// Copyright 2026 The ctxdetox Authors.
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

// Supervised prefix training with static (context-independent) prefixes.
//
// A two-prefix bank is trained with lm_weight * L_LM + disc_weight * L_disc.
// L_LM is the nll of r under the prefix of the example's category; L_disc
// is the cross-entropy of recovering that category from the two
// prefix-conditioned likelihoods, p(k | c, r) = softmax_k(-nll_k).
// A single-prefix variant trains plain prefix-tuning.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ctxdetox/core/adamw.hpp"
#include "ctxdetox/core/parallel.hpp"
#include "ctxdetox/prefix/prefix.hpp"
#include "ctxdetox/training/hierarchical.hpp"

namespace ctxdetox::training {

struct SupervisedConfig {
  int steps = 1500;
  int batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double lm_weight = 0.8;
  double disc_weight = 0.2;
  std::uint64_t seed = 42;
  int slots = 5;
  int small_dim = 64;

  void validate() const {
    require(steps >= 0 && batch >= 1 && lr > 0, "SupervisedConfig: invalid steps/batch/lr");
    require(lm_weight >= 0 && disc_weight >= 0, "SupervisedConfig: weights must be nonnegative");
    require(slots >= 1 && small_dim >= 1, "SupervisedConfig: prefix dimensions must be positive");
  }
};

/// Labelled example for static-prefix training.
struct CategorizedExample {
  const DialogueExample* ex = nullptr;
  int category = 0;
};

struct SupervisedStep {
  int step = 0;
  double lm = 0;
  double disc = 0;
  double total = 0;
};

/// Cross-entropy of the true category under softmax(-nll); with equal
/// likelihoods this is ln 2.
inline double discriminative_loss(double nll0, double nll1, int category) {
  const double a = -nll0, b = -nll1;
  const double mx = std::max(a, b);
  const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
  return lse - (category == 0 ? a : b);
}

template <typename T>
struct BankStats {
  double lm = 0, disc = 0;
};

/// Weighted objective on one batch; per-example gradients into `slots`.
template <typename T>
BankStats<T> evaluate_bank_batch(const LMParams<T>& lm, const PrefixBank<T>& bank,
                                 std::span<const CategorizedExample> batch, double lm_weight, double disc_weight,
                                 std::vector<PrefixBank<T>>* slots) {
  const std::size_t B = batch.size();
  require(B > 0, "evaluate_bank_batch: empty batch");
  const Matrix<T> flat[2] = {bank[0].materialize(), bank[1].materialize()};
  const tinylm::KVPrefix<T> kv[2] = {prefix::to_kv(flat[0], lm.config), prefix::to_kv(flat[1], lm.config)};
  std::vector<double> nll_own(B), disc(B);
  parallel_for(B, [&](std::size_t b) {
    const auto& ce = batch[b];
    const auto ctx = tinylm::dialogue_context(ce.ex->c);
    const auto tgt = tinylm::dialogue_target(ce.ex->r);
    double nll[2];
    tinylm::KVPrefix<T> dkv[2];
    for (int k = 0; k < 2; ++k) {
      if (slots) {
        dkv[k] = tinylm::KVPrefix<T>::zeros(lm.config.n_layers, kv[k].length(), lm.config.hidden);
        tinylm::GradSink<T> sink{nullptr, &dkv[k], nullptr};
        nll[k] = static_cast<double>(tinylm::nll_with_grad<T>(lm, ctx, tgt, &kv[k], T(1), sink));
      } else {
        nll[k] = static_cast<double>(tinylm::nll<T>(lm, ctx, tgt, &kv[k]));
      }
    }
    nll_own[b] = nll[ce.category];
    disc[b] = discriminative_loss(nll[0], nll[1], ce.category);
    if (!slots) return;
    // d/dnll_k of (lm_weight * nll_c + disc_weight * L_disc) = lm_weight*[k==c] + disc_weight*([k==c] - p_k)
    const double a = -nll[0], bb = -nll[1];
    const double mx = std::max(a, bb);
    const double z = std::exp(a - mx) + std::exp(bb - mx);
    const double p[2] = {std::exp(a - mx) / z, std::exp(bb - mx) / z};
    auto& g = (*slots)[b];
    prefix::zero_all<T>(g);
    for (int k = 0; k < 2; ++k) {
      const double is_c = k == ce.category ? 1.0 : 0.0;
      const double coef = (lm_weight * is_c + disc_weight * (is_c - p[k])) / static_cast<double>(B);
      if (coef == 0.0) continue;
      Matrix<T> d = prefix::flatten(dkv[k]);
      for (T& v : d.flat()) v *= static_cast<T>(coef);
      bank[k].backward(d, g[k]);
    }
  });
  BankStats<T> s;
  for (std::size_t b = 0; b < B; ++b) {
    s.lm += nll_own[b];
    s.disc += disc[b];
  }
  s.lm /= static_cast<double>(B);
  s.disc /= static_cast<double>(B);
  return s;
}

/// Trains a two-prefix bank; category k examples are drawn with equal
/// frequency per batch.
template <typename T>
PrefixBank<T> train_prefix_bank(const LMParams<T>& lm, std::span<const CategorizedExample> data,
                                const SupervisedConfig& cfg, std::vector<SupervisedStep>* trace = nullptr,
                                const PrefixBank<T>* init = nullptr) {
  cfg.validate();
  require(lm.frozen, "train_prefix_bank: the backbone must be frozen");
  std::vector<int> labels;
  std::size_t count[2] = {0, 0};
  for (const auto& ce : data) {
    require(ce.category == 0 || ce.category == 1, "train_prefix_bank: category must be 0 or 1");
    labels.push_back(ce.category);
    ++count[ce.category];
  }
  require(count[0] > 0 && count[1] > 0, "train_prefix_bank: category ", count[0] ? 1 : 0, " is empty");
  const auto shape = prefix::PrefixShape::for_lm(lm.config, cfg.slots, cfg.small_dim);
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x42414e4bu));
  PrefixBank<T> bank = init ? *init : PrefixBank<T>::random(shape, rng);
  PrefixBank<T> grad = bank.zeros_like();
  std::vector<PrefixBank<T>> slots(static_cast<std::size_t>(cfg.batch), grad);
  AdamW<T> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  register_params(opt, bank, grad);

  StratifiedSampler sampler(labels, static_cast<std::size_t>(cfg.batch), cfg.seed, /*balanced=*/true);
  std::vector<CategorizedExample> batch(static_cast<std::size_t>(cfg.batch));
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next();
    for (std::size_t b = 0; b < idx.size(); ++b) batch[b] = data[idx[b]];
    const auto s = evaluate_bank_batch<T>(lm, bank, batch, cfg.lm_weight, cfg.disc_weight, &slots);
    const double total = cfg.lm_weight * s.lm + cfg.disc_weight * s.disc;
    require(std::isfinite(total), "train_prefix_bank: non-finite loss at step ", step);
    prefix::zero_all<T>(grad);
    for (auto& g : slots) prefix::add_scaled<T>(grad, g);
    opt.step();
    if (trace) trace->push_back({step, s.lm, s.disc, total});
  }
  return bank;
}

/// Plain prefix-tuning: one reparameterized prefix trained by nll.
template <typename T>
prefix::ReparamPrefix<T> train_single_prefix(const LMParams<T>& lm, std::span<const DialogueExample* const> data,
                                             const SupervisedConfig& cfg, std::vector<SupervisedStep>* trace = nullptr) {
  cfg.validate();
  require(lm.frozen, "train_single_prefix: the backbone must be frozen");
  require(!data.empty(), "train_single_prefix: empty training set");
  const auto shape = prefix::PrefixShape::for_lm(lm.config, cfg.slots, cfg.small_dim);
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x50524546u));
  auto pfx = prefix::ReparamPrefix<T>::random(shape, rng);
  auto grad = pfx.zeros_like();
  const std::size_t B = static_cast<std::size_t>(cfg.batch);
  std::vector<prefix::ReparamPrefix<T>> slots(B, grad);
  std::vector<double> loss(B);
  AdamW<T> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  register_params(opt, pfx, grad);
  tinylm::EpochSampler sampler(data.size(), cfg.seed);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(B);
    const Matrix<T> flat = pfx.materialize();
    const auto kv = prefix::to_kv(flat, lm.config);
    parallel_for(B, [&](std::size_t b) {
      const auto ctx = tinylm::dialogue_context(data[idx[b]]->c);
      const auto tgt = tinylm::dialogue_target(data[idx[b]]->r);
      auto dkv = tinylm::KVPrefix<T>::zeros(lm.config.n_layers, kv.length(), lm.config.hidden);
      tinylm::GradSink<T> sink{nullptr, &dkv, nullptr};
      loss[b] = static_cast<double>(
          tinylm::nll_with_grad<T>(lm, ctx, tgt, &kv, static_cast<T>(cfg.lm_weight / static_cast<double>(B)), sink));
      prefix::zero_all<T>(slots[b]);
      pfx.backward(prefix::flatten(dkv), slots[b]);
    });
    double l = 0;
    for (double v : loss) l += v;
    l /= static_cast<double>(B);
    require(std::isfinite(l), "train_single_prefix: non-finite loss at step ", step);
    prefix::zero_all<T>(grad);
    for (auto& g : slots) prefix::add_scaled<T>(grad, g);
    opt.step();
    if (trace) trace->push_back({step, l, 0.0, cfg.lm_weight * l});
  }
  return pfx;
}

/// Toxicity bank: category = t_r (0 = non-offensive response).
template <typename T>
PrefixBank<T> train_toxicity_bank(const LMParams<T>& lm, std::span<const DialogueExample> split,
                                  const SupervisedConfig& cfg, std::vector<SupervisedStep>* trace = nullptr) {
  std::vector<CategorizedExample> data;
  for (const auto& ex : split) data.push_back({&ex, ex.t_r});
  return train_prefix_bank<T>(lm, data, cfg, trace);
}

inline void write_supervised_trace(const std::vector<SupervisedStep>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write loss trace ", path.string());
  out << "step,L_LM,L_disc,total\n";
  for (const auto& r : rows)
    out << r.step << ',' << fmt_real(r.lm) << ',' << fmt_real(r.disc) << ',' << fmt_real(r.total) << '\n';
  require(out.good(), "write failed for ", path.string());
}

}  // namespace ctxdetox::training
