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

#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "ctxdetox/corpus/vocab.hpp"
#include "ctxdetox/eval/generation.hpp"
#include "ctxdetox/eval/metrics.hpp"
#include "ctxdetox/eval/report.hpp"

namespace ctxdetox::eval {
namespace {

namespace fs = std::filesystem;

const Vocab& TestVocab() {
  static const Vocab v = [] {
    std::mt19937_64 rng(3);
    return corpus::build_vocab(corpus::LexiconSizes{}, 0.3, rng);
  }();
  return v;
}

GenerationItem Item(std::size_t id, int t_c, std::vector<std::vector<int>> completions) {
  GenerationItem it;
  it.example_id = id;
  it.context = {TestVocab().topic[0], TestVocab().filler[0]};
  it.t_c = t_c;
  for (auto& c : completions) it.completions.push_back({std::move(c), 0});
  return it;
}

GenerationSet RandomSet(std::string name, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(Vocab::kNumSpecial, TestVocab().size() - 1), len(0, 7);
  GenerationSet s;
  s.method = std::move(name);
  for (std::size_t i = 0; i < 40; ++i) {
    std::vector<std::vector<int>> comps(6);
    for (auto& c : comps)
      for (int n = len(rng); n > 0; --n) c.push_back(tok(rng));
    s.items.push_back(Item(i, static_cast<int>(i % 2), std::move(comps)));
  }
  return s;
}

tinylm::LMParams<float> ToyLM() {
  tinylm::LMConfig c;
  c.n_layers = 1;
  c.hidden = 16;
  c.n_heads = 2;
  c.vocab = TestVocab().size();
  c.max_seq = 40;
  c.seed = 4;
  return tinylm::init_lm<float>(c);
}

TEST(StanceShift, HandExample) {
  const ClassMeans a = {0.3, 0.2, 0.4, 0.1}, b = {0.25, 0.25, 0.35, 0.15};
  EXPECT_NEAR(example_shift(a, b, ShiftMode::kFourWay), 0.20, 1e-12);
  EXPECT_NEAR(example_shift(a, b, ShiftMode::kThreeWay), 0.10, 1e-12);
}

TEST(StanceShift, SelfShiftIsZeroAndThreeWayNeverExceedsFourWay) {
  const auto a = RandomSet("a", 1), b = RandomSet("b", 2);
  EXPECT_EQ(stance_shift(a, a, TestVocab(), ShiftMode::kFourWay), 0.0);
  EXPECT_EQ(stance_shift(a, a, TestVocab(), ShiftMode::kThreeWay), 0.0);
  const auto four = per_example_shift(a, b, TestVocab(), ShiftMode::kFourWay);
  const auto three = per_example_shift(a, b, TestVocab(), ShiftMode::kThreeWay);
  ASSERT_EQ(four.size(), 20u);  // inoffensive contexts only
  for (std::size_t i = 0; i < four.size(); ++i) {
    EXPECT_LE(three[i], four[i]);
    EXPECT_LE(four[i], 2.0 + 1e-12);
  }
  EXPECT_GT(stance_shift(a, b, TestVocab(), ShiftMode::kFourWay), 0.0);
}

TEST(StanceShift, ThreeWayNeverExceedsFourWayInFloatingPoint) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> count(0, 10);
  auto means = [&] {
    ClassMeans m{};
    for (double& x : m) x = count(rng) / 10.0;
    return m;
  };
  for (int i = 0; i < 100000; ++i) {
    const ClassMeans a = means(), b = means();
    ASSERT_LE(example_shift(a, b, ShiftMode::kThreeWay), example_shift(a, b, ShiftMode::kFourWay)) << i;
  }
}

TEST(StanceShift, RejectsMismatchedSets) {
  const auto a = RandomSet("a", 1);
  auto b = RandomSet("b", 2);
  b.items.pop_back();
  EXPECT_THROW(stance_shift(a, b, TestVocab(), ShiftMode::kFourWay), Error);
  b = RandomSet("b", 2);
  b.items[3].context.push_back(TestVocab().filler[1]);
  EXPECT_THROW(stance_shift(a, b, TestVocab(), ShiftMode::kFourWay), Error);
}

TEST(ClassMeans, SingleCompletionIsItsOracleScore) {
  const auto& v = TestVocab();
  const auto it = Item(0, 0, {{v.support[0], v.support[1], v.deny[0]}});
  const auto m = class_means(it, v);
  const auto s = corpus::stance_oracle(it.completions[0].tokens, v);
  EXPECT_EQ(m[0], s.support);
  EXPECT_EQ(m[1], s.deny);
  EXPECT_THROW(class_means(Item(1, 0, {}), v), Error);
}

TEST(SupportScore, AveragesOverOffensiveContextsOnly) {
  const auto& v = TestVocab();
  GenerationSet s;
  s.items.push_back(Item(0, 1, {{v.support[0]}, {v.filler[0]}}));
  s.items.push_back(Item(1, 0, {{v.support[0], v.support[1]}}));  // ignored
  // One support token: (1 + 0.1) / (1 + 0.2); no stance tokens: 0.
  EXPECT_NEAR(support_stance_score(s, v), 0.5 * (1.1 / 1.2), 1e-12);
  s.items.erase(s.items.begin());
  EXPECT_THROW(support_stance_score(s, v), Error);
}

TEST(SelfToxicity, CountsCompletionsWithMarkedTokens) {
  const auto& v = TestVocab();
  GenerationSet s;
  s.items.push_back(Item(0, 0, {{v.train_marked[0]}, {v.filler[0]}, {}}));
  s.items.push_back(Item(1, 1, {{v.filler[1], v.heldout_marked[0]}}));
  EXPECT_DOUBLE_EQ(self_toxicity(s, v), 0.5);
  const auto b = stance_breakdown(s, v);
  EXPECT_EQ(b.n_inoffensive, 3u);
  EXPECT_EQ(b.n_offensive, 1u);
  EXPECT_NEAR(b.toxicity_inoffensive, 1.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(b.toxicity_offensive, 1.0);
  EXPECT_DOUBLE_EQ(b.offensive_context[2], 1.0);  // comment
}

TEST(Breakdown, ClassMeansSumToOne) {
  const auto b = stance_breakdown(RandomSet("a", 5), TestVocab());
  double s0 = 0, s1 = 0;
  for (int k = 0; k < 4; ++k) {
    s0 += b.inoffensive_context[static_cast<std::size_t>(k)];
    s1 += b.offensive_context[static_cast<std::size_t>(k)];
  }
  EXPECT_NEAR(s0, 1.0, 1e-12);
  EXPECT_NEAR(s1, 1.0, 1e-12);
}

TEST(Perplexity, MeanOverNonEmptyCompletions) {
  const auto lm = ToyLM();
  const auto& v = TestVocab();
  GenerationSet s;
  s.items.push_back(Item(0, 0, {{v.filler[0], v.filler[1]}, {}, {v.support[0]}}));
  const auto r = perplexity_metric(lm, s);
  EXPECT_EQ(r.scored, 2u);
  EXPECT_EQ(r.skipped_empty, 1u);
  const auto ctx = tinylm::dialogue_context(s.items[0].context);
  const double expected = 0.5 * (tinylm::perplexity(lm, ctx, s.items[0].completions[0].tokens) +
                                 tinylm::perplexity(lm, ctx, s.items[0].completions[2].tokens));
  EXPECT_NEAR(r.mean, expected, 1e-9);
  // An untrained model is close to uniform over the vocabulary.
  EXPECT_GT(r.mean, 0.3 * v.size());
}

class GenerationTest : public ::testing::Test {
 protected:
  GenerationTest() : lm_(ToyLM()) {
    const auto& v = TestVocab();
    for (int i = 0; i < 6; ++i) {
      corpus::DialogueExample ex;
      ex.c = {v.topic[static_cast<std::size_t>(i)], v.filler[0], v.filler[1]};
      ex.t_c = i % 2;
      test_.push_back(ex);
    }
    gen_.num_completions = 3;
    gen_.max_new_tokens = 5;
  }
  tinylm::LMParams<float> lm_;
  std::vector<corpus::DialogueExample> test_;
  tinylm::GenConfig gen_;
};

TEST_F(GenerationTest, DeterministicAndSharesSeedsAcrossMethods) {
  const auto a = generate_set(lm_, Controller::uncontrolled(), test_, gen_, 9);
  const auto b = generate_set(lm_, Controller::uncontrolled(), test_, gen_, 9);
  ASSERT_EQ(a.completion_count(), 18u);
  Matrix<float> p(2, static_cast<std::size_t>(lm_.config.prefix_dim()));
  std::mt19937_64 rng(1);
  fill_normal(p.flat(), rng, 1.0);
  const auto c = generate_set(lm_, Controller::static_prefix("x", p), test_, gen_, 9);
  EXPECT_EQ(c.method, "x");
  bool any_diff = false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    EXPECT_EQ(a.items[i].t_c, test_[i].t_c);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(a.items[i].completions[k].tokens, b.items[i].completions[k].tokens);
      EXPECT_EQ(a.items[i].completions[k].seed, completion_seed(9, i, static_cast<int>(k)));
      EXPECT_EQ(c.items[i].completions[k].seed, a.items[i].completions[k].seed);
      any_diff |= c.items[i].completions[k].tokens != a.items[i].completions[k].tokens;
    }
  }
  EXPECT_TRUE(any_diff);
}

TEST_F(GenerationTest, ReportRoundTripsThroughJson) {
  const auto ref = generate_set(lm_, Controller::uncontrolled(), test_, gen_, 9);
  const auto other = generate_set(lm_, Controller::uncontrolled(), test_, gen_, 10);
  const auto r = build_report(other, &ref, test_, TestVocab(), lm_);
  ASSERT_TRUE(r.stance_shift_4way.has_value());
  EXPECT_LE(*r.stance_shift_3way, *r.stance_shift_4way);
  const fs::path dir = fs::temp_directory_path() / "ctxdetox_eval_test";
  fs::remove_all(dir);
  write_report(r, dir / "r.json", dir / "r.txt");
  const auto back = read_report(dir / "r.json");
  EXPECT_EQ(back.method, r.method);
  EXPECT_EQ(back.test_split_hash, test_split_hash(test_));
  EXPECT_EQ(back.stance_shift_4way, r.stance_shift_4way);
  EXPECT_EQ(back.support_stance, r.support_stance);
  EXPECT_EQ(back.perplexity.mean, r.perplexity.mean);
  EXPECT_EQ(back.breakdown.offensive_context, r.breakdown.offensive_context);
  EXPECT_EQ(back.n_completions, 18u);
  const auto base = build_report(ref, nullptr, test_, TestVocab(), lm_);
  EXPECT_FALSE(base.stance_shift_4way.has_value());
}

EvalReport Named(std::string m, std::optional<double> shift) {
  EvalReport r;
  r.method = std::move(m);
  r.test_split_hash = "h";
  r.stance_shift_4way = shift;
  r.stance_shift_3way = shift;
  return r;
}

TEST(Comparison, UncontrolledFirstThenAscendingShift) {
  const auto ordered = order_for_comparison(
      {Named("b", 0.3), Named("a", 0.1), Named(kUncontrolled, std::nullopt), Named("c", 0.1)});
  ASSERT_EQ(ordered.size(), 4u);
  EXPECT_EQ(ordered[0].method, kUncontrolled);
  EXPECT_EQ(ordered[1].method, "a");
  EXPECT_EQ(ordered[2].method, "c");
  EXPECT_EQ(ordered[3].method, "b");
  const auto csv = comparison_csv(ordered);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 + 3 * 5);
  EXPECT_NE(comparison_text(ordered).find("-"), std::string::npos);
}

TEST(Comparison, RejectsReportsFromDifferentTestSplits) {
  auto b = Named("b", 0.2);
  b.test_split_hash = "other";
  EXPECT_THROW(order_for_comparison({Named("a", 0.1), b}), Error);
}

}  // namespace
}  // namespace ctxdetox::eval
