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

// Scoring and sampling on top of the transformer: next-token nll with
// gradients, incremental decoding, top-k/top-p sampling, perplexity.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "ctxdetox/corpus/vocab.hpp"
#include "ctxdetox/tinylm/model.hpp"

namespace ctxdetox::tinylm {

namespace detail {

inline std::vector<int> join_inputs(std::span<const int> context, std::span<const int> target) {
  require(!context.empty(), "nll: empty context");
  require(!target.empty(), "nll: empty target");
  std::vector<int> in(context.begin(), context.end());
  in.insert(in.end(), target.begin(), target.end() - 1);
  return in;
}

}  // namespace detail

/// Sum over target tokens of -log p(target_t | prefix, context, target_<t).
template <typename T>
T nll(const LMParams<T>& p, std::span<const int> context, std::span<const int> target,
      const std::type_identity_t<KVPrefix<T>>* prefix = nullptr) {
  const std::vector<int> in = detail::join_inputs(context, target);
  ForwardCache<T> c;
  forward(p, ForwardInput<T>{in, nullptr, prefix, 0, true}, c);
  const std::size_t first = context.size() - 1;
  const std::size_t V = static_cast<std::size_t>(p.config.vocab);
  T total = 0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    const T* row = c.logits.row(first + t);
    total += kernels::log_sum_exp(row, V) - row[target[t]];
  }
  return total;
}

/// nll plus reverse-mode gradients scaled by `scale`, accumulated into `sink`.
template <typename T>
T nll_with_grad(const LMParams<T>& p, std::span<const int> context, std::span<const int> target,
                const std::type_identity_t<KVPrefix<T>>* prefix, std::type_identity_t<T> scale,
                GradSink<T>& sink) {
  const std::vector<int> in = detail::join_inputs(context, target);
  ForwardCache<T> c;
  forward(p, ForwardInput<T>{in, nullptr, prefix, 0, true}, c);
  const std::size_t first = context.size() - 1;
  const std::size_t V = static_cast<std::size_t>(p.config.vocab);
  Matrix<T> dlogits(in.size(), V);
  T total = 0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    const std::size_t i = first + t;
    std::copy(c.logits.row(i), c.logits.row(i) + V, dlogits.row(i));
    T* g = dlogits.row(i);
    const T lse = kernels::softmax_inplace(g, V);
    total += lse - c.logits(i, static_cast<std::size_t>(target[t]));
    g[target[t]] -= T(1);
    for (std::size_t v = 0; v < V; ++v) g[v] *= scale;
  }
  backward(p, c, &dlogits, static_cast<const Matrix<T>*>(nullptr), sink);
  return total;
}

/// exp(mean per-token nll) of `text` given `context`.
template <typename T>
double perplexity(const LMParams<T>& p, std::span<const int> context, std::span<const int> text) {
  require(!text.empty(), "perplexity: empty text");
  return std::exp(static_cast<double>(nll(p, context, text)) / static_cast<double>(text.size()));
}

/// Unconditional perplexity: the text is scored after a lone BOS token.
template <typename T>
double perplexity(const LMParams<T>& p, std::span<const int> text) {
  const int bos[] = {corpus::Vocab::kBos};
  return perplexity(p, std::span<const int>(bos), text);
}

struct GenConfig {
  int top_k = 50;
  double top_p = 0.9;
  double temperature = 1.0;
  int max_new_tokens = 12;
  int num_completions = 10;

  void validate() const {
    require(top_k >= 1, "GenConfig: top_k must be >= 1");
    require(top_p > 0.0 && top_p <= 1.0, "GenConfig: top_p must lie in (0, 1]");
    require(temperature > 0.0, "GenConfig: temperature must be positive");
    require(max_new_tokens >= 1 && num_completions >= 1, "GenConfig: counts must be positive");
  }
};

/// Distribution that sample_next draws from, as (token, probability) pairs
/// ordered by decreasing probability.
template <typename T>
std::vector<std::pair<int, double>> filtered_distribution(std::span<const T> logits,
                                                          const GenConfig& gen) {
  const std::size_t V = logits.size();
  std::vector<double> prob(V);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < V; ++v) {
    prob[v] = static_cast<double>(logits[v]) / gen.temperature;
    mx = std::max(mx, prob[v]);
  }
  double z = 0;
  for (double& x : prob) z += (x = std::exp(x - mx));
  for (double& x : prob) x /= z;

  std::vector<int> order(V);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(gen.top_k), V);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](int a, int b) { return prob[a] != prob[b] ? prob[a] > prob[b] : a < b; });
  order.resize(k);
  double mass_k = 0;
  for (int t : order) mass_k += prob[t];

  std::vector<std::pair<int, double>> kept;
  double cum = 0;
  for (int t : order) {
    kept.emplace_back(t, prob[t]);
    cum += prob[t] / mass_k;
    if (cum >= gen.top_p) break;
  }
  double mass = 0;
  for (const auto& kv : kept) mass += kv.second;
  for (auto& kv : kept) kv.second /= mass;
  return kept;
}

template <typename T>
int sample_next(std::span<const T> logits, const GenConfig& gen, std::mt19937_64& rng) {
  // Inverse CDF over the kept tokens in vocabulary order.
  auto dist = filtered_distribution(logits, gen);
  std::sort(dist.begin(), dist.end());
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0;
  for (const auto& [tok, pr] : dist) {
    cum += pr;
    if (u < cum) return tok;
  }
  return dist.back().first;
}

/// Incremental decoder that carries the key/value activations of every row
/// consumed so far (prefix slots first).
template <typename T>
class Decoder {
 public:
  Decoder(const LMParams<T>& p, const KVPrefix<T>* prefix) : p_(p) {
    if (prefix && prefix->length() > 0) {
      prefix->check_against(p.config);
      past_ = *prefix;
    }
  }

  /// Consumes `tokens` and returns the logits after the last one.
  std::span<const T> feed(std::span<const int> tokens) {
    forward(p_, ForwardInput<T>{tokens, nullptr, past_.length() > 0 ? &past_ : nullptr, position_, true},
            cache_);
    past_.keys.resize(cache_.layers.size());
    past_.values.resize(cache_.layers.size());
    for (std::size_t l = 0; l < cache_.layers.size(); ++l) {
      past_.keys[l] = cache_.layers[l].kfull;
      past_.values[l] = cache_.layers[l].vfull;
    }
    position_ += static_cast<int>(tokens.size());
    const std::size_t V = static_cast<std::size_t>(p_.config.vocab);
    return {cache_.logits.row(cache_.logits.rows() - 1), V};
  }

  int position() const { return position_; }
  int rows_used() const { return past_.length(); }
  bool full() const { return past_.length() >= p_.config.max_seq || position_ >= p_.config.max_seq; }

 private:
  const LMParams<T>& p_;
  KVPrefix<T> past_;
  ForwardCache<T> cache_;
  int position_ = 0;
};

/// Samples one continuation of `context`. The returned tokens exclude EOS.
template <typename T>
std::vector<int> sample(const LMParams<T>& p, std::span<const int> context,
                        const std::type_identity_t<KVPrefix<T>>* prefix,
                        const GenConfig& gen, std::uint64_t rng_seed) {
  gen.validate();
  require(!context.empty(), "sample: empty context");
  std::mt19937_64 rng(rng_seed);
  Decoder<T> dec(p, prefix);
  std::span<const T> logits = dec.feed(context);
  std::vector<int> out;
  for (int step = 0; step < gen.max_new_tokens; ++step) {
    const int tok = sample_next(logits, gen, rng);
    if (tok == corpus::Vocab::kEos) break;
    out.push_back(tok);
    if (step + 1 == gen.max_new_tokens || dec.full()) break;
    const int one[] = {tok};
    logits = dec.feed(std::span<const int>(one));
  }
  return out;
}

}  // namespace ctxdetox::tinylm
