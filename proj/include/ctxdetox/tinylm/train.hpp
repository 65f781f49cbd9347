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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "ctxdetox/core/adamw.hpp"
#include "ctxdetox/core/parallel.hpp"
#include "ctxdetox/corpus/oracles.hpp"
#include "ctxdetox/tinylm/inference.hpp"

namespace ctxdetox::tinylm {

/// Dialogue formatting shared by every module: the model conditions on
/// [BOS] c [SEP] and predicts r [EOS].
inline std::vector<int> dialogue_context(std::span<const int> c) {
  std::vector<int> out;
  out.reserve(c.size() + 2);
  out.push_back(corpus::Vocab::kBos);
  out.insert(out.end(), c.begin(), c.end());
  out.push_back(corpus::Vocab::kSep);
  return out;
}

inline std::vector<int> dialogue_target(std::span<const int> r) {
  std::vector<int> out(r.begin(), r.end());
  out.push_back(corpus::Vocab::kEos);
  return out;
}

struct LMTrainConfig {
  int steps = 2000;
  int batch = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::uint64_t seed = 42;
};

/// Mean per-token loss of each step.
using LossTrace = std::vector<double>;

/// Global-norm gradient clipping; returns the pre-clip norm.
template <typename T>
double clip_grad_norm(std::span<T> g, double max_norm) {
  double s = 0;
  for (T v : g) s += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(s);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (T& v : g) v *= f;
  }
  return norm;
}

/// Draws minibatches by walking seeded permutations of the index range.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    require(n > 0, "EpochSampler: empty dataset");
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    while (out.size() < k) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::mt19937_64 rng_;
  std::size_t pos_ = 0;
};

/// Next-token training on formatted dialogues. The whole sequence after BOS
/// is predicted so the model also learns the context distribution.
template <typename T>
LossTrace train_lm(LMParams<T>& p, std::span<const corpus::DialogueExample> data,
                   const LMTrainConfig& cfg,
                   const std::function<void(int, double)>& on_step = nullptr) {
  require(!p.frozen, "train_lm: parameters are frozen");
  require(cfg.steps >= 0 && cfg.batch > 0, "train_lm: steps and batch must be positive");
  require(!data.empty(), "train_lm: empty training split");
  std::vector<std::vector<int>> seqs;
  seqs.reserve(data.size());
  for (const auto& ex : data) {
    std::vector<int> s = dialogue_context(ex.c);
    const auto t = dialogue_target(ex.r);
    s.insert(s.end(), t.begin(), t.end());
    require(static_cast<int>(s.size()) - 1 <= p.config.max_seq, "train_lm: sequence of length ",
            s.size(), " exceeds max_seq ", p.config.max_seq);
    seqs.push_back(std::move(s));
  }

  const std::size_t B = static_cast<std::size_t>(cfg.batch);
  std::vector<T> grad(p.count(), T(0));
  std::vector<std::vector<T>> slot(B, std::vector<T>(p.count()));
  std::vector<double> slot_loss(B);
  AdamW<T> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  opt.add(std::span<T>(p.values), std::span<const T>(grad));
  EpochSampler sampler(seqs.size(), cfg.seed);
  LossTrace trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));

  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next(B);
    std::size_t tokens = 0;
    for (std::size_t i : idx) tokens += seqs[i].size() - 1;
    const T scale = T(1) / static_cast<T>(tokens);
    parallel_for(B, [&](std::size_t b) {
      std::fill(slot[b].begin(), slot[b].end(), T(0));
      GradSink<T> sink{&slot[b], nullptr, nullptr};
      const auto& s = seqs[idx[b]];
      slot_loss[b] = static_cast<double>(nll_with_grad<T>(
          p, std::span<const int>(s.data(), 1), std::span<const int>(s.data() + 1, s.size() - 1),
          nullptr, scale, sink));
    });
    std::fill(grad.begin(), grad.end(), T(0));
    double loss = 0;
    for (std::size_t b = 0; b < B; ++b) {
      loss += slot_loss[b];
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += slot[b][i];
    }
    loss /= static_cast<double>(tokens);
    require(std::isfinite(loss), "train_lm: non-finite loss at step ", step);
    clip_grad_norm(std::span<T>(grad), cfg.clip_norm);
    opt.step();
    trace.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  return trace;
}

/// Mean per-token nll of r given c over a split.
template <typename T>
double mean_token_nll(const LMParams<T>& p, std::span<const corpus::DialogueExample> data) {
  std::vector<double> loss(data.size());
  std::vector<std::size_t> count(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto ctx = dialogue_context(data[i].c);
    const auto tgt = dialogue_target(data[i].r);
    loss[i] = static_cast<double>(nll(p, std::span<const int>(ctx), std::span<const int>(tgt)));
    count[i] = tgt.size();
  });
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    s += loss[i];
    n += count[i];
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace ctxdetox::tinylm
