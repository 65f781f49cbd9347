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

// Offense classifier for contexts: token embeddings, mean pooling, one
// ReLU layer and a logistic output.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ctxdetox/core/adamw.hpp"
#include "ctxdetox/core/container.hpp"
#include "ctxdetox/core/parallel.hpp"
#include "ctxdetox/corpus/generate.hpp"
#include "ctxdetox/tinylm/train.hpp"

namespace ctxdetox::baselines {

using corpus::DialogueExample;

struct ClassifierConfig {
  int embed_dim = 32;
  int hidden = 32;
  int epochs = 4;
  int batch = 32;
  double lr = 3e-3;
  double weight_decay = 0.0;
  double threshold = 0.5;
  std::uint64_t seed = 42;
};

struct ClassifierMetrics {
  double accuracy = 0;
  double f1 = 0;
  double precision = 0;
  double recall = 0;
  std::size_t n = 0;
};

class OffenseClassifier {
 public:
  OffenseClassifier() = default;
  OffenseClassifier(int vocab, const ClassifierConfig& cfg)
      : threshold_(cfg.threshold),
        emb_(static_cast<std::size_t>(vocab), static_cast<std::size_t>(cfg.embed_dim)),
        w1_(static_cast<std::size_t>(cfg.embed_dim), static_cast<std::size_t>(cfg.hidden)),
        b1_(1, static_cast<std::size_t>(cfg.hidden)),
        w2_(static_cast<std::size_t>(cfg.hidden), 1),
        b2_(1, 1) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x434c53u));
    fill_normal(emb_.flat(), rng, 0.1);
    fill_normal(w1_.flat(), rng, 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
    fill_normal(w2_.flat(), rng, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)));
  }

  double threshold() const { return threshold_; }

  /// P(offensive | tokens).
  double probability(std::span<const int> tokens) const {
    Pass p;
    run(tokens, p);
    return p.prob;
  }

  int verdict(std::span<const int> tokens) const { return probability(tokens) >= threshold_ ? 1 : 0; }

  /// Mean binary cross-entropy gradient step data; returns the loss.
  double accumulate_grad(std::span<const int> tokens, int label, double scale, OffenseClassifier& g) const {
    Pass p;
    run(tokens, p);
    const std::size_t H = w1_.cols(), E = emb_.cols();
    const double dz = (p.prob - label) * scale;
    g.b2_.data()[0] += static_cast<float>(dz);
    std::vector<double> dh(H);
    for (std::size_t j = 0; j < H; ++j) {
      g.w2_.data()[j] += static_cast<float>(dz * p.hidden[j]);
      dh[j] = p.hidden[j] > 0 ? dz * w2_.data()[j] : 0.0;
      g.b1_.data()[j] += static_cast<float>(dh[j]);
    }
    std::vector<double> dpool(E, 0.0);
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t j = 0; j < H; ++j) {
        g.w1_(e, j) += static_cast<float>(p.pooled[e] * dh[j]);
        dpool[e] += w1_(e, j) * dh[j];
      }
    const double inv = 1.0 / static_cast<double>(tokens.size());
    for (int t : tokens)
      for (std::size_t e = 0; e < E; ++e) g.emb_(static_cast<std::size_t>(t), e) += static_cast<float>(dpool[e] * inv);
    const double pr = std::clamp(p.prob, 1e-12, 1 - 1e-12);
    return -(label ? std::log(pr) : std::log(1 - pr));
  }

  OffenseClassifier zeros_like() const {
    OffenseClassifier z;
    z.threshold_ = threshold_;
    z.emb_ = Matrix<float>(emb_.rows(), emb_.cols());
    z.w1_ = Matrix<float>(w1_.rows(), w1_.cols());
    z.b1_ = Matrix<float>(b1_.rows(), b1_.cols());
    z.w2_ = Matrix<float>(w2_.rows(), w2_.cols());
    z.b2_ = Matrix<float>(b2_.rows(), b2_.cols());
    return z;
  }

  std::vector<Matrix<float>*> tensors() { return {&emb_, &w1_, &b1_, &w2_, &b2_}; }

  void save_into(Container& c) const {
    c.add("classifier.emb", emb_);
    c.add("classifier.w1", w1_);
    c.add("classifier.b1", b1_);
    c.add("classifier.w2", w2_);
    c.add("classifier.b2", b2_);
    c.meta["classifier_threshold"] = threshold_;
  }

  static OffenseClassifier load_from(const Container& c) {
    OffenseClassifier k;
    k.emb_ = c.matrix<float>("classifier.emb");
    k.w1_ = c.matrix<float>("classifier.w1");
    k.b1_ = c.matrix<float>("classifier.b1");
    k.w2_ = c.matrix<float>("classifier.w2");
    k.b2_ = c.matrix<float>("classifier.b2");
    k.threshold_ = c.meta.at("classifier_threshold").get<double>();
    require(k.w1_.rows() == k.emb_.cols() && k.b1_.cols() == k.w1_.cols() && k.w2_.rows() == k.w1_.cols(),
            "offense classifier tensors have inconsistent shapes");
    return k;
  }

 private:
  struct Pass {
    std::vector<double> pooled, hidden;
    double prob = 0;
  };

  void run(std::span<const int> tokens, Pass& p) const {
    require(!tokens.empty(), "offense classifier: empty input");
    const std::size_t E = emb_.cols(), H = w1_.cols();
    p.pooled.assign(E, 0.0);
    for (int t : tokens) {
      require(t >= 0 && static_cast<std::size_t>(t) < emb_.rows(), "offense classifier: token ", t, " out of range");
      for (std::size_t e = 0; e < E; ++e) p.pooled[e] += emb_(static_cast<std::size_t>(t), e);
    }
    for (double& v : p.pooled) v /= static_cast<double>(tokens.size());
    p.hidden.assign(H, 0.0);
    double z = b2_.data()[0];
    for (std::size_t j = 0; j < H; ++j) {
      double a = b1_.data()[j];
      for (std::size_t e = 0; e < E; ++e) a += p.pooled[e] * w1_(e, j);
      p.hidden[j] = std::max(a, 0.0);
      z += p.hidden[j] * w2_.data()[j];
    }
    p.prob = 1.0 / (1.0 + std::exp(-z));
  }

  double threshold_ = 0.5;
  Matrix<float> emb_, w1_, b1_, w2_, b2_;
};

/// Trains on context offensiveness labels after balancing the two classes by
/// oversampling. Neutral-stance examples are kept.
inline OffenseClassifier train_offense_classifier(std::span<const DialogueExample> split, int vocab,
                                                  const ClassifierConfig& cfg) {
  std::size_t count[2] = {0, 0};
  for (const auto& ex : split) ++count[ex.t_c];
  require(count[0] > 0 && count[1] > 0, "train_offense_classifier: split has a single context class");
  const std::vector<DialogueExample> balanced = corpus::balance_with_oversampling(
      std::vector<DialogueExample>(split.begin(), split.end()), [](const DialogueExample& e) { return e.t_c; },
      derive_seed(cfg.seed, 0x42414cu));

  OffenseClassifier model(vocab, cfg);
  OffenseClassifier grad = model.zeros_like();
  AdamW<float> opt(AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  {
    auto v = model.tensors();
    auto g = grad.tensors();
    for (std::size_t i = 0; i < v.size(); ++i) opt.add(v[i]->flat(), std::span<const float>(g[i]->storage()));
  }
  const std::size_t B = static_cast<std::size_t>(cfg.batch);
  const std::size_t steps_per_epoch = (balanced.size() + B - 1) / B;
  tinylm::EpochSampler sampler(balanced.size(), cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      for (auto* t : grad.tensors()) t->fill(0.0f);
      for (std::size_t i : sampler.next(B))
        model.accumulate_grad(balanced[i].c, balanced[i].t_c, 1.0 / static_cast<double>(B), grad);
      opt.step();
    }
  }
  return model;
}

inline ClassifierMetrics evaluate_classifier(const OffenseClassifier& k, std::span<const DialogueExample> split) {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& ex : split) {
    const int v = k.verdict(ex.c);
    if (v && ex.t_c) ++tp;
    else if (v && !ex.t_c) ++fp;
    else if (!v && ex.t_c) ++fn;
    else ++tn;
  }
  ClassifierMetrics m;
  m.n = split.size();
  m.accuracy = m.n ? static_cast<double>(tp + tn) / static_cast<double>(m.n) : 0.0;
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

}  // namespace ctxdetox::baselines
