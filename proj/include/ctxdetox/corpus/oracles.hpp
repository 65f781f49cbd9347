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
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "ctxdetox/corpus/vocab.hpp"

namespace ctxdetox::corpus {

enum class Stance : int { kSupport = 0, kDeny = 1, kComment = 2, kQuery = 3 };

inline constexpr std::array<Stance, 4> kAllStances = {Stance::kSupport, Stance::kDeny,
                                                      Stance::kComment, Stance::kQuery};

inline std::string_view stance_name(Stance s) {
  switch (s) {
    case Stance::kSupport: return "support";
    case Stance::kDeny: return "deny";
    case Stance::kComment: return "comment";
    case Stance::kQuery: return "query";
  }
  return "?";
}

inline Stance parse_stance(std::string_view s) {
  for (Stance st : kAllStances)
    if (stance_name(st) == s) return st;
  fail("unknown stance label '", s, "'");
}

/// Class probabilities returned by the stance oracle.
struct StanceScores {
  double support = 0.0;
  double deny = 0.0;
  double comment = 0.0;
  double query = 0.0;

  double operator[](Stance s) const {
    switch (s) {
      case Stance::kSupport: return support;
      case Stance::kDeny: return deny;
      case Stance::kComment: return comment;
      case Stance::kQuery: return query;
    }
    return 0.0;
  }

  double sum() const { return support + deny + comment + query; }

  // Ties resolve toward the later class in {support, deny, comment, query}
  // order for support vs. deny, so support must strictly win to count.
  Stance argmax() const {
    Stance best = Stance::kDeny;
    double best_v = deny;
    if (support > best_v) {
      best = Stance::kSupport;
      best_v = support;
    }
    if (comment > best_v) {
      best = Stance::kComment;
      best_v = comment;
    }
    if (query > best_v) best = Stance::kQuery;
    return best;
  }
};

inline constexpr double kStanceSmoothing = 0.1;

/// 1 iff the sequence contains any marked token (train or heldout).
inline int offense_oracle(std::span<const int> seq, const Vocab& vocab) {
  int hit = 0;
  for (int id : seq)
    if (vocab.is_marked(id)) hit = 1;
  return hit;
}

inline StanceScores stance_oracle(std::span<const int> seq, const Vocab& vocab) {
  int n_s = 0, n_d = 0, q = 0;
  for (int id : seq) {
    switch (vocab.lexicon_of(id)) {
      case Lexicon::kSupport: ++n_s; break;
      case Lexicon::kDeny: ++n_d; break;
      case Lexicon::kQuery: q = 1; break;
      default: break;
    }
  }
  StanceScores s;
  if (n_s == 0 && n_d == 0) {
    if (q == 0)
      s.comment = 1.0;
    else
      s.query = 1.0;
    return s;
  }
  const double eps = kStanceSmoothing;
  const double denom = n_s + n_d + 2.0 * eps + q;
  s.support = (n_s + eps) / denom;
  s.deny = (n_d + eps) / denom;
  s.query = q / denom;
  s.comment = std::max(0.0, 1.0 - s.support - s.deny - s.query);
  return s;
}

/// One (context, response, t_c, t_r, s_r) training tuple.
///
/// s_r is empty for neutral-stance (comment/query) responses.
struct DialogueExample {
  TokenSeq c;
  TokenSeq r;
  int t_c = 0;
  int t_r = 0;
  std::optional<int> s_r;
  Stance stance4 = Stance::kComment;

  friend bool operator==(const DialogueExample&, const DialogueExample&) = default;
};

/// Builds a fully oracle-consistent example from raw token sequences.
inline DialogueExample label_example(TokenSeq c, TokenSeq r, const Vocab& vocab) {
  DialogueExample ex;
  ex.t_c = offense_oracle(c, vocab);
  ex.t_r = offense_oracle(r, vocab);
  ex.stance4 = stance_oracle(r, vocab).argmax();
  if (ex.stance4 == Stance::kSupport)
    ex.s_r = 1;
  else if (ex.stance4 == Stance::kDeny)
    ex.s_r = 0;
  ex.c = std::move(c);
  ex.r = std::move(r);
  return ex;
}

/// Case number 1..4 (t_c, s_r) = (0,0), (0,1), (1,0), (1,1).
inline int case_of(const DialogueExample& ex) {
  require(ex.s_r.has_value(), "case_of: neutral-stance example");
  return 1 + 2 * ex.t_c + *ex.s_r;
}

}  // namespace ctxdetox::corpus
