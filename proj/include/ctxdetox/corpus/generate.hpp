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
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ctxdetox/corpus/oracles.hpp"
#include "ctxdetox/corpus/vocab.hpp"

namespace ctxdetox::corpus {

/// Probabilities over the four stance classes, in {support, deny, comment, query} order.
using StanceMix = std::array<double, 4>;

struct CorpusConfig {
  int n_train_prefix = 1000;
  int n_train_classifier = 4794;
  int n_dev = 300;
  int n_test = 300;
  /// Quotas of the prefix-training split over cases 1..4.
  std::array<double, 4> case_mix = {0.25, 0.25, 0.25, 0.25};
  double p_marked_context = 0.5;
  double p_toxic_response = 0.1;
  /// Extra chance that a supportive reply to a marked context repeats a marked token.
  double p_echo_support = 0.5;
  double sycophancy_rate = 0.4;
  double heldout_marked_fraction = 0.3;
  /// Stance distribution of replies to unmarked contexts.
  StanceMix unmarked_stance_mix = {0.45, 0.45, 0.07, 0.03};
  /// Distribution over {deny, comment, query} for non-supportive replies to marked contexts.
  std::array<double, 3> marked_nonsupport_mix = {0.75, 0.17, 0.08};
  LexiconSizes lexicon;
  int context_min_len = 4;
  int context_max_len = 8;
  int response_min_len = 4;
  int response_max_len = 8;
  std::uint64_t seed = 42;

  void validate() const {
    auto prob = [](double p, const char* name) {
      require(p >= 0.0 && p <= 1.0, "corpus config: ", name, " must lie in [0,1], got ", p);
    };
    require(n_train_prefix > 0 && n_train_classifier > 0 && n_dev > 0 && n_test > 0,
            "corpus config: split counts must be positive");
    double cm = 0.0;
    for (double p : case_mix) {
      prob(p, "case_mix entry");
      cm += p;
    }
    require(std::abs(cm - 1.0) < 1e-9, "corpus config: case_mix must sum to 1, got ", cm);
    prob(p_marked_context, "p_marked_context");
    prob(p_toxic_response, "p_toxic_response");
    prob(p_echo_support, "p_echo_support");
    prob(sycophancy_rate, "sycophancy_rate");
    prob(heldout_marked_fraction, "heldout_marked_fraction");
    double us = 0.0;
    for (double p : unmarked_stance_mix) {
      prob(p, "unmarked_stance_mix entry");
      us += p;
    }
    require(std::abs(us - 1.0) < 1e-9, "corpus config: unmarked_stance_mix must sum to 1");
    double ms = 0.0;
    for (double p : marked_nonsupport_mix) {
      prob(p, "marked_nonsupport_mix entry");
      ms += p;
    }
    require(std::abs(ms - 1.0) < 1e-9, "corpus config: marked_nonsupport_mix must sum to 1");
    require(context_min_len >= 2 && context_min_len <= context_max_len,
            "corpus config: bad context length range");
    require(response_min_len >= 4 && response_min_len <= response_max_len,
            "corpus config: bad response length range (min 4)");
  }

  /// Probability that a raw example falls into case k (1..4).
  double case_mass(int k) const {
    const double pm = p_marked_context;
    switch (k) {
      case 1: return (1.0 - pm) * unmarked_stance_mix[1];
      case 2: return (1.0 - pm) * unmarked_stance_mix[0];
      case 3: return pm * (1.0 - sycophancy_rate) * marked_nonsupport_mix[0];
      case 4: return pm * sycophancy_rate;
      default: fail("case index out of range: ", k);
    }
  }
};

enum class SplitId : int { kTrainPrefix = 0, kTrainClassifier = 1, kDev = 2, kTest = 3 };

inline constexpr std::array<SplitId, 4> kAllSplits = {SplitId::kTrainPrefix, SplitId::kTrainClassifier,
                                                      SplitId::kDev, SplitId::kTest};

inline std::string split_name(SplitId s) {
  switch (s) {
    case SplitId::kTrainPrefix: return "train_prefix";
    case SplitId::kTrainClassifier: return "train_classifier";
    case SplitId::kDev: return "dev";
    case SplitId::kTest: return "test";
  }
  return "?";
}

struct Corpus {
  Vocab vocab;
  CorpusConfig config;
  std::vector<DialogueExample> train_prefix;
  std::vector<DialogueExample> train_classifier;
  std::vector<DialogueExample> dev;
  std::vector<DialogueExample> test;

  std::vector<DialogueExample>& split(SplitId s) {
    switch (s) {
      case SplitId::kTrainPrefix: return train_prefix;
      case SplitId::kTrainClassifier: return train_classifier;
      case SplitId::kDev: return dev;
      case SplitId::kTest: return test;
    }
    fail("bad split id");
  }
  const std::vector<DialogueExample>& split(SplitId s) const {
    return const_cast<Corpus*>(this)->split(s);
  }
};

namespace detail {

template <typename Rng>
int pick(const std::vector<int>& ids, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, ids.size() - 1);
  return ids[d(rng)];
}

template <typename Rng>
bool coin(double p, Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

template <typename Rng>
int uniform_int(int lo, int hi, Rng& rng) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

template <typename Rng, std::size_t N>
int draw(const std::array<double, N>& probs, Rng& rng) {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  int last_positive = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (probs[i] <= 0.0) continue;
    last_positive = static_cast<int>(i);
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return last_positive;
}

/// Generates one raw example. `marked_pool` is the lexicon marked contexts draw from.
template <typename Rng>
DialogueExample raw_example(const CorpusConfig& cfg, const Vocab& vocab,
                            const std::vector<int>& marked_pool, Rng& rng) {
  const bool marked = coin(cfg.p_marked_context, rng);
  const int topic = pick(vocab.topic, rng);

  const int clen = uniform_int(cfg.context_min_len, cfg.context_max_len, rng);
  TokenSeq c{topic};
  int context_mark = -1;
  if (marked) {
    context_mark = pick(marked_pool, rng);
    c.push_back(context_mark);
    if (clen >= 4 && coin(0.2, rng)) c.push_back(pick(marked_pool, rng));
  }
  while (static_cast<int>(c.size()) < clen) c.push_back(pick(vocab.filler, rng));
  std::shuffle(c.begin(), c.end(), rng);

  Stance stance;
  if (!marked) {
    stance = static_cast<Stance>(draw(cfg.unmarked_stance_mix, rng));
  } else if (coin(cfg.sycophancy_rate, rng)) {
    stance = Stance::kSupport;
  } else {
    stance = static_cast<Stance>(1 + draw(cfg.marked_nonsupport_mix, rng));
  }

  const int rlen = uniform_int(cfg.response_min_len, cfg.response_max_len, rng);
  // Stance words open the response; topic, echo and filler follow in random order.
  TokenSeq r;
  switch (stance) {
    case Stance::kSupport:
      r.push_back(pick(vocab.support, rng));
      if (coin(0.3, rng)) r.push_back(pick(vocab.support, rng));
      break;
    case Stance::kDeny:
      r.push_back(pick(vocab.deny, rng));
      if (coin(0.3, rng)) r.push_back(pick(vocab.deny, rng));
      break;
    case Stance::kQuery: r.push_back(vocab.query_marker); break;
    case Stance::kComment: break;
  }
  TokenSeq body{topic};
  bool toxic = coin(cfg.p_toxic_response, rng);
  if (marked && stance == Stance::kSupport && coin(cfg.p_echo_support, rng)) toxic = true;
  if (toxic) {
    // Responses only ever carry train-visible marked tokens.
    const bool echo_ok = context_mark >= 0 &&
                         vocab.lexicon_of(context_mark) == Lexicon::kTrainMarked;
    body.push_back(echo_ok ? context_mark : pick(vocab.train_marked, rng));
  }
  while (static_cast<int>(r.size() + body.size()) < rlen) body.push_back(pick(vocab.filler, rng));
  std::shuffle(body.begin(), body.end(), rng);
  r.insert(r.end(), body.begin(), body.end());
  return label_example(std::move(c), std::move(r), vocab);
}

inline std::vector<int> quotas(const std::array<double, 4>& mix, int n) {
  std::vector<int> q(4);
  std::vector<std::pair<double, int>> rem;
  int total = 0;
  for (int k = 0; k < 4; ++k) {
    const double exact = mix[static_cast<std::size_t>(k)] * n;
    q[static_cast<std::size_t>(k)] = static_cast<int>(std::floor(exact));
    total += q[static_cast<std::size_t>(k)];
    rem.emplace_back(exact - std::floor(exact), k);
  }
  std::stable_sort(rem.begin(), rem.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; total < n; ++i, ++total) ++q[static_cast<std::size_t>(rem[i % 4].second)];
  return q;
}

}  // namespace detail

/// Produces the four splits. Deterministic in config.seed.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const std::vector<int> q = detail::quotas(cfg.case_mix, cfg.n_train_prefix);
  for (int k = 1; k <= 4; ++k) {
    if (q[static_cast<std::size_t>(k - 1)] > 0 && cfg.case_mass(k) <= 0.0)
      fail("corpus config requests ", q[static_cast<std::size_t>(k - 1)],
           " prefix-training examples of case ", k, " but that case has zero probability mass");
  }

  Corpus out;
  out.config = cfg;
  std::mt19937_64 vocab_rng(derive_seed(cfg.seed, 0x766f6361ULL));
  out.vocab = build_vocab(cfg.lexicon, cfg.heldout_marked_fraction, vocab_rng);
  const Vocab& v = out.vocab;
  const std::vector<int> all_marked = v.all_marked();

  auto rng_for = [&](SplitId s) {
    return std::mt19937_64(derive_seed(cfg.seed, 0x73706c6974ULL, static_cast<std::uint64_t>(s)));
  };

  {
    auto rng = rng_for(SplitId::kTrainClassifier);
    for (int i = 0; i < cfg.n_train_classifier; ++i)
      out.train_classifier.push_back(detail::raw_example(cfg, v, v.train_marked, rng));
  }
  {
    // Raw pool, neutral discard, then per-case fill with oversampling.
    auto rng = rng_for(SplitId::kTrainPrefix);
    std::array<std::vector<DialogueExample>, 4> cells;
    long drawn = 0;
    const long cap = 1000L * cfg.n_train_prefix + 100000L;
    auto deficient = [&] {
      for (int k = 0; k < 4; ++k)
        if (q[static_cast<std::size_t>(k)] > 0 && cells[static_cast<std::size_t>(k)].empty())
          return true;
      return false;
    };
    while (drawn < cfg.n_train_prefix || deficient()) {
      require(drawn < cap, "corpus generation could not populate every requested case");
      DialogueExample ex = detail::raw_example(cfg, v, v.train_marked, rng);
      ++drawn;
      if (!ex.s_r) continue;
      cells[static_cast<std::size_t>(case_of(ex) - 1)].push_back(std::move(ex));
    }
    for (int k = 0; k < 4; ++k) {
      auto& cell = cells[static_cast<std::size_t>(k)];
      const int want = q[static_cast<std::size_t>(k)];
      if (want == 0) continue;
      const std::size_t have = cell.size();
      for (int i = 0; i < want; ++i) {
        if (static_cast<std::size_t>(i) < have) {
          out.train_prefix.push_back(cell[static_cast<std::size_t>(i)]);
        } else {
          std::uniform_int_distribution<std::size_t> d(0, have - 1);
          out.train_prefix.push_back(cell[d(rng)]);
        }
      }
    }
    std::shuffle(out.train_prefix.begin(), out.train_prefix.end(), rng);
  }
  {
    auto rng = rng_for(SplitId::kDev);
    for (int i = 0; i < cfg.n_dev; ++i) out.dev.push_back(detail::raw_example(cfg, v, all_marked, rng));
  }
  {
    auto rng = rng_for(SplitId::kTest);
    for (int i = 0; i < cfg.n_test; ++i)
      out.test.push_back(detail::raw_example(cfg, v, all_marked, rng));
  }
  return out;
}

/// Oversamples every label class up to the largest class size.
///
/// Output keeps the input order and appends uniform-with-replacement
/// resamples, class by class in ascending label order.
template <typename Example, typename KeyFn>
std::vector<Example> balance_with_oversampling(const std::vector<Example>& examples, KeyFn key,
                                               std::uint64_t seed) {
  std::map<long, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < examples.size(); ++i)
    classes[static_cast<long>(key(examples[i]))].push_back(i);
  require(!classes.empty(), "balance_with_oversampling: no examples");
  std::size_t target = 0;
  for (const auto& [label, idx] : classes) {
    require(!idx.empty(), "balance_with_oversampling: empty class ", label);
    target = std::max(target, idx.size());
  }
  std::vector<Example> out = examples;
  std::mt19937_64 rng(seed);
  for (const auto& [label, idx] : classes) {
    std::uniform_int_distribution<std::size_t> d(0, idx.size() - 1);
    for (std::size_t n = idx.size(); n < target; ++n) out.push_back(examples[idx[d(rng)]]);
  }
  return out;
}

/// Variant that takes the expected label set, so an absent class is an error
/// rather than silently ignored.
template <typename Example, typename KeyFn>
std::vector<Example> balance_with_oversampling(const std::vector<Example>& examples, KeyFn key,
                                               const std::vector<long>& labels, std::uint64_t seed) {
  for (long label : labels) {
    const bool present = std::any_of(examples.begin(), examples.end(),
                                     [&](const Example& e) { return static_cast<long>(key(e)) == label; });
    require(present, "balance_with_oversampling: empty class ", label);
  }
  return balance_with_oversampling(examples, key, seed);
}

}  // namespace ctxdetox::corpus
