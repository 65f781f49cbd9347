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
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctxdetox/core/common.hpp"

namespace ctxdetox::corpus {

using TokenSeq = std::vector<int>;

enum class Lexicon : std::uint8_t {
  kSpecial,
  kTopic,
  kTrainMarked,
  kHeldoutMarked,
  kSupport,
  kDeny,
  kQuery,
  kFiller,
};

struct LexiconSizes {
  int topic = 24;
  int marked = 20;
  int support = 10;
  int deny = 10;
  int filler = 50;
};

/// Token inventory of the synthetic dialogue language.
///
/// Ids are laid out as: specials, topic, marked (train then heldout),
/// support, deny, query marker, filler. Lexicons are pairwise disjoint and,
/// together with the specials, cover every id.
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kSep = 3;
  static constexpr int kReadout = 4;
  static constexpr int kNumSpecial = 5;

  std::vector<std::string> tokens;
  std::vector<int> topic;
  std::vector<int> train_marked;
  std::vector<int> heldout_marked;
  std::vector<int> support;
  std::vector<int> deny;
  int query_marker = -1;
  std::vector<int> filler;

  int size() const { return static_cast<int>(tokens.size()); }

  Lexicon lexicon_of(int id) const {
    require(id >= 0 && id < size(), "unknown token id ", id, " (vocab size ", size(), ")");
    return kinds_[static_cast<std::size_t>(id)];
  }

  bool is_marked(int id) const {
    const Lexicon k = lexicon_of(id);
    return k == Lexicon::kTrainMarked || k == Lexicon::kHeldoutMarked;
  }

  std::vector<int> all_marked() const {
    std::vector<int> out = train_marked;
    out.insert(out.end(), heldout_marked.begin(), heldout_marked.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  void check_sequence(std::span<const int> seq) const {
    for (int id : seq) (void)lexicon_of(id);
  }

  /// Rebuilds the per-id lexicon table from the lexicon lists and validates
  /// the partition invariants.
  void finalize() {
    kinds_.assign(tokens.size(), Lexicon::kSpecial);
    std::vector<int> seen(tokens.size(), 0);
    for (int i = 0; i < kNumSpecial; ++i) {
      require(i < size(), "vocab smaller than special block");
      seen[static_cast<std::size_t>(i)] = 1;
    }
    auto mark = [&](const std::vector<int>& ids, Lexicon k) {
      for (int id : ids) {
        require(id >= kNumSpecial && id < size(), "lexicon id out of range: ", id);
        require(seen[static_cast<std::size_t>(id)] == 0, "lexicons overlap at id ", id);
        seen[static_cast<std::size_t>(id)] = 1;
        kinds_[static_cast<std::size_t>(id)] = k;
      }
    };
    mark(topic, Lexicon::kTopic);
    mark(train_marked, Lexicon::kTrainMarked);
    mark(heldout_marked, Lexicon::kHeldoutMarked);
    mark(support, Lexicon::kSupport);
    mark(deny, Lexicon::kDeny);
    mark({query_marker}, Lexicon::kQuery);
    mark(filler, Lexicon::kFiller);
    for (std::size_t i = 0; i < seen.size(); ++i)
      require(seen[i] == 1, "token id ", i, " belongs to no lexicon");
    require(!heldout_marked.empty(), "heldout marked lexicon must be nonempty");
    require(!train_marked.empty(), "train marked lexicon must be nonempty");
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.tokens == b.tokens && a.topic == b.topic && a.train_marked == b.train_marked &&
           a.heldout_marked == b.heldout_marked && a.support == b.support && a.deny == b.deny &&
           a.query_marker == b.query_marker && a.filler == b.filler;
  }

 private:
  std::vector<Lexicon> kinds_;
};

/// Builds the vocabulary. The train/heldout split of the marked lexicon is
/// drawn from `rng`; everything else is positional.
inline Vocab build_vocab(const LexiconSizes& sizes, double heldout_fraction, std::mt19937_64& rng) {
  require(sizes.topic > 0 && sizes.marked > 1 && sizes.support > 0 && sizes.deny > 0 &&
              sizes.filler > 0,
          "lexicon sizes must be positive (marked >= 2)");
  Vocab v;
  v.tokens = {"<pad>", "<bos>", "<eos>", "<sep>", "<readout>"};
  auto block = [&](const char* stem, int n) {
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) {
      ids.push_back(v.size());
      v.tokens.push_back(str_cat(stem, i < 10 ? "0" : "", i));
    }
    return ids;
  };
  v.topic = block("topic_", sizes.topic);
  std::vector<int> marked = block("mark_", sizes.marked);
  v.support = block("sup_", sizes.support);
  v.deny = block("deny_", sizes.deny);
  v.query_marker = v.size();
  v.tokens.push_back("<query>");
  v.filler = block("fill_", sizes.filler);

  int n_heldout = static_cast<int>(std::lround(heldout_fraction * sizes.marked));
  n_heldout = std::clamp(n_heldout, 1, sizes.marked - 1);
  std::shuffle(marked.begin(), marked.end(), rng);
  v.heldout_marked.assign(marked.begin(), marked.begin() + n_heldout);
  v.train_marked.assign(marked.begin() + n_heldout, marked.end());
  std::sort(v.heldout_marked.begin(), v.heldout_marked.end());
  std::sort(v.train_marked.begin(), v.train_marked.end());
  v.finalize();
  return v;
}

}  // namespace ctxdetox::corpus
