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

// Stance shift, support score, self-toxicity and perplexity over generation
// sets, all scored with the corpus oracles.

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "ctxdetox/corpus/oracles.hpp"
#include "ctxdetox/eval/generation.hpp"

namespace ctxdetox::eval {

using corpus::Stance;
using corpus::StanceScores;
using corpus::Vocab;

enum class ShiftMode { kFourWay, kThreeWay };

/// Oracle class scores averaged over one item's completions, in
/// {support, deny, comment, query} order.
using ClassMeans = std::array<double, 4>;

inline ClassMeans class_means(const GenerationItem& item, const Vocab& vocab) {
  ClassMeans m{};
  require(!item.completions.empty(), "class_means: example ", item.example_id, " has no completions");
  for (const auto& c : item.completions) {
    const StanceScores s = corpus::stance_oracle(c.tokens, vocab);
    for (Stance st : corpus::kAllStances) m[static_cast<std::size_t>(st)] += s[st];
  }
  for (double& v : m) v /= static_cast<double>(item.completions.size());
  return m;
}

/// Sum of absolute per-class differences; three-way merges comment and query.
inline double example_shift(const ClassMeans& a, const ClassMeans& b, ShiftMode mode) {
  double s = std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]);
  if (mode == ShiftMode::kFourWay)
    s += std::abs(a[2] - b[2]) + std::abs(a[3] - b[3]);
  else
    s += std::abs((a[2] - b[2]) + (a[3] - b[3]));
  return s;
}

inline void check_same_examples(const GenerationSet& a, const GenerationSet& b) {
  require(a.items.size() == b.items.size(), "stance_shift: generation sets cover ", a.items.size(), " and ",
          b.items.size(), " examples");
  for (std::size_t i = 0; i < a.items.size(); ++i)
    require(a.items[i].example_id == b.items[i].example_id && a.items[i].context == b.items[i].context,
            "stance_shift: example ", i, " differs between '", a.method, "' and '", b.method, "'");
}

/// Per-example shifts over inoffensive contexts, in item order.
inline std::vector<double> per_example_shift(const GenerationSet& controlled, const GenerationSet& reference,
                                             const Vocab& vocab, ShiftMode mode) {
  check_same_examples(controlled, reference);
  std::vector<double> out;
  for (std::size_t i = 0; i < controlled.items.size(); ++i) {
    if (controlled.items[i].t_c != 0) continue;
    out.push_back(example_shift(class_means(controlled.items[i], vocab), class_means(reference.items[i], vocab), mode));
  }
  return out;
}

inline double stance_shift(const GenerationSet& controlled, const GenerationSet& reference, const Vocab& vocab,
                           ShiftMode mode) {
  const auto v = per_example_shift(controlled, reference, vocab, mode);
  require(!v.empty(), "stance_shift: no inoffensive contexts in the test set");
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Mean oracle support probability over completions of offensive contexts.
inline double support_stance_score(const GenerationSet& set, const Vocab& vocab) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& it : set.items) {
    if (it.t_c != 1) continue;
    for (const auto& c : it.completions) {
      s += corpus::stance_oracle(c.tokens, vocab).support;
      ++n;
    }
  }
  require(n > 0, "support_stance_score: no offensive contexts in the test set");
  return s / static_cast<double>(n);
}

/// Fraction of completions containing a marked token.
inline double self_toxicity(const GenerationSet& set, const Vocab& vocab) {
  std::size_t hits = 0, n = 0;
  for (const auto& it : set.items)
    for (const auto& c : it.completions) {
      hits += static_cast<std::size_t>(corpus::offense_oracle(c.tokens, vocab));
      ++n;
    }
  return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

struct PerplexityResult {
  double mean = 0;
  std::size_t scored = 0;
  std::size_t skipped_empty = 0;
};

/// Mean perplexity of each completion given its context under `ref`.
inline PerplexityResult perplexity_metric(const LMParams<float>& ref, const GenerationSet& set) {
  std::vector<const GenerationItem*> owner;
  std::vector<const Completion*> comps;
  for (const auto& it : set.items)
    for (const auto& c : it.completions) {
      owner.push_back(&it);
      comps.push_back(&c);
    }
  std::vector<double> ppl(comps.size(), 0.0);
  parallel_for(comps.size(), [&](std::size_t i) {
    if (comps[i]->tokens.empty()) return;
    ppl[i] = tinylm::perplexity(ref, tinylm::dialogue_context(owner[i]->context), comps[i]->tokens);
  });
  PerplexityResult r;
  for (std::size_t i = 0; i < comps.size(); ++i) {
    if (comps[i]->tokens.empty()) {
      ++r.skipped_empty;
      continue;
    }
    r.mean += ppl[i];
    ++r.scored;
  }
  if (r.scored) r.mean /= static_cast<double>(r.scored);
  return r;
}

/// Per-class oracle means and toxicity over completions, split by context
/// offensiveness.
struct StanceBreakdown {
  ClassMeans inoffensive_context{};
  ClassMeans offensive_context{};
  double toxicity_inoffensive = 0;
  double toxicity_offensive = 0;
  std::size_t n_inoffensive = 0;
  std::size_t n_offensive = 0;
};

inline StanceBreakdown stance_breakdown(const GenerationSet& set, const Vocab& vocab) {
  StanceBreakdown b;
  for (const auto& it : set.items)
    for (const auto& c : it.completions) {
      const StanceScores s = corpus::stance_oracle(c.tokens, vocab);
      auto& dst = it.t_c ? b.offensive_context : b.inoffensive_context;
      for (Stance st : corpus::kAllStances) dst[static_cast<std::size_t>(st)] += s[st];
      (it.t_c ? b.toxicity_offensive : b.toxicity_inoffensive) += corpus::offense_oracle(c.tokens, vocab);
      ++(it.t_c ? b.n_offensive : b.n_inoffensive);
    }
  const double n1 = static_cast<double>(std::max<std::size_t>(b.n_offensive, 1));
  const double n0 = static_cast<double>(std::max<std::size_t>(b.n_inoffensive, 1));
  for (double& v : b.offensive_context) v /= n1;
  for (double& v : b.inoffensive_context) v /= n0;
  b.toxicity_offensive /= n1;
  b.toxicity_inoffensive /= n0;
  return b;
}

}  // namespace ctxdetox::eval
