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
#include <fstream>
#include <map>
#include <random>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "ctxdetox/corpus/generate.hpp"
#include "ctxdetox/tinylm/checkpoint.hpp"
#include "ctxdetox/tinylm/inference.hpp"
#include "ctxdetox/tinylm/model.hpp"
#include "ctxdetox/tinylm/train.hpp"

namespace ctxdetox::tinylm {
namespace {

LMConfig SmallConfig(std::uint64_t seed = 42) {
  LMConfig c;
  c.n_layers = 2;
  c.hidden = 8;
  c.n_heads = 2;
  c.vocab = 11;
  c.max_seq = 16;
  c.ffn_mult = 2;
  c.init_std = 0.3;  // large enough that gradients are far from zero
  c.seed = seed;
  return c;
}

template <typename T>
KVPrefix<T> RandomPrefix(const LMConfig& c, int slots, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto kv = KVPrefix<T>::zeros(c.n_layers, slots, c.hidden);
  for (int l = 0; l < c.n_layers; ++l) {
    fill_normal(kv.keys[static_cast<std::size_t>(l)].flat(), rng, 0.5);
    fill_normal(kv.values[static_cast<std::size_t>(l)].flat(), rng, 0.5);
  }
  return kv;
}

template <typename T>
Matrix<T> LogitsOf(const LMParams<T>& p, const std::vector<int>& toks,
                   const std::type_identity_t<KVPrefix<T>>* past,
                   int offset = 0) {
  ForwardCache<T> c;
  forward(p, ForwardInput<T>{toks, nullptr, past, offset, true}, c);
  return c.logits;
}

TEST(InitLm, SameSeedGivesIdenticalParameters) {
  EXPECT_EQ(init_lm<float>(SmallConfig(42)).values, init_lm<float>(SmallConfig(42)).values);
}

TEST(InitLm, DifferentSeedsDiffer) {
  EXPECT_NE(init_lm<float>(SmallConfig(42)).values, init_lm<float>(SmallConfig(43)).values);
}

TEST(InitLm, ParameterCountMatchesHandCount) {
  // V=11 E=8 S=16 F=16 L=2.
  // embeddings 11*8 + 16*8 = 216
  // per layer: ln 2*2*8=32, qkvo 4*(64+8)=288, ffn 8*16+16+16*8+8=280 -> 600
  // head: lnf 16, w_out 88, b_out 11 -> 115
  const std::size_t hand = 216 + 2 * 600 + 115;
  const LMConfig c = SmallConfig();
  EXPECT_EQ(parameter_count(c), hand);
  EXPECT_EQ(init_lm<float>(c).count(), hand);
  EXPECT_EQ(ParamLayout::build(c).total, hand);
}

TEST(InitLm, RejectsIndivisibleHeads) {
  LMConfig c = SmallConfig();
  c.n_heads = 3;
  EXPECT_THROW(init_lm<float>(c), Error);
}

TEST(InitLm, AllValuesFinite) {
  for (float v : init_lm<float>(SmallConfig()).values) ASSERT_TRUE(std::isfinite(v));
}

TEST(Forward, EmptyPrefixIsIdentity) {
  const auto p = init_lm<double>(SmallConfig());
  const std::vector<int> x = {1, 5, 7, 3, 2};
  const auto empty = KVPrefix<double>::zeros(p.config.n_layers, 0, p.config.hidden);
  EXPECT_EQ(LogitsOf(p, x, nullptr), LogitsOf(p, x, &empty));
}

TEST(Forward, KvCacheEquivalence) {
  const auto p = init_lm<double>(SmallConfig());
  const std::vector<int> s = {1, 4, 9, 6};
  const std::vector<int> x = {3, 8, 2, 5, 10};
  std::vector<int> sx = s;
  sx.insert(sx.end(), x.begin(), x.end());
  const auto full = LogitsOf(p, sx, nullptr);

  ForwardCache<double> cs;
  forward(p, ForwardInput<double>{s, nullptr, nullptr, 0, false}, cs);
  auto kv = KVPrefix<double>::zeros(p.config.n_layers, static_cast<int>(s.size()), p.config.hidden);
  for (std::size_t l = 0; l < kv.keys.size(); ++l) {
    kv.keys[l] = cs.layers[l].kfull;
    kv.values[l] = cs.layers[l].vfull;
  }
  const auto tail = LogitsOf(p, x, &kv, static_cast<int>(s.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t v = 0; v < 11; ++v) EXPECT_NEAR(tail(i, v), full(s.size() + i, v), 1e-5);
}

TEST(Forward, KvCacheEquivalenceFloat) {
  const auto p = init_lm<float>(SmallConfig(7));
  const std::vector<int> s = {1, 2, 3, 4, 5};
  const std::vector<int> x = {6, 7, 8};
  std::vector<int> sx = s;
  sx.insert(sx.end(), x.begin(), x.end());
  const auto full = LogitsOf(p, sx, nullptr);
  Decoder<float> dec(p, nullptr);
  dec.feed(s);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const int t[] = {x[i]};
    const auto row = dec.feed(t);
    for (std::size_t v = 0; v < 11; ++v) EXPECT_NEAR(row[v], full(s.size() + i, v), 1e-5);
  }
}

TEST(Forward, Causality) {
  const auto p = init_lm<double>(SmallConfig());
  const auto prefix = RandomPrefix<double>(p.config, 3, 5);
  std::vector<int> a = {1, 4, 6, 8, 9, 10, 2};
  std::vector<int> b = a;
  std::swap(b[4], b[6]);  // positions after i = 4
  const auto la = LogitsOf(p, a, &prefix), lb = LogitsOf(p, b, &prefix);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t v = 0; v < 11; ++v) EXPECT_EQ(la(i, v), lb(i, v));
  bool changed = false;
  for (std::size_t v = 0; v < 11; ++v) changed |= la(4, v) != lb(4, v);
  EXPECT_TRUE(changed);
}

TEST(Forward, AttentionRowsHavePrefixPlusPositionLength) {
  const auto p = init_lm<double>(SmallConfig());
  const auto prefix = RandomPrefix<double>(p.config, 4, 11);
  ForwardCache<double> c;
  const std::vector<int> x = {1, 2, 3, 4, 5, 6};
  forward(p, ForwardInput<double>{x, nullptr, &prefix, 0, true}, c);
  for (int l = 0; l < p.config.n_layers; ++l)
    for (int h = 0; h < p.config.n_heads; ++h)
      for (int i = 0; i < 6; ++i) {
        const auto row = c.attention_row(l, h, i);
        ASSERT_EQ(row.size(), static_cast<std::size_t>(4 + i + 1));
        double s = 0;
        for (double w : row) s += w;
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
}

TEST(Forward, OutputSoftmaxSumsToOne) {
  const auto p = init_lm<double>(SmallConfig());
  const auto l = LogitsOf(p, {1, 5, 9, 3}, nullptr);
  for (std::size_t i = 0; i < l.rows(); ++i) {
    std::vector<double> row(l.row(i), l.row(i) + l.cols());
    kernels::softmax_inplace(row.data(), row.size());
    double s = 0;
    for (double v : row) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Forward, RejectsOverflowAndBadTokens) {
  const auto p = init_lm<double>(SmallConfig());
  const auto prefix = RandomPrefix<double>(p.config, 4, 1);
  std::vector<int> long_seq(13, 5);
  EXPECT_THROW(LogitsOf(p, long_seq, &prefix), Error);  // 13 + 4 > 16
  EXPECT_NO_THROW(LogitsOf(p, std::vector<int>(12, 5), &prefix));
  EXPECT_THROW(LogitsOf(p, {1, 11}, nullptr), Error);
  EXPECT_THROW(LogitsOf(p, {1, -1}, nullptr), Error);
}

LMParams<double> UniformModel() {
  auto p = init_lm<double>(SmallConfig());
  std::fill(p.values.begin() + static_cast<std::ptrdiff_t>(p.layout.w_out), p.values.end(), 0.0);
  return p;
}

TEST(Nll, UniformLogitsGiveTLogV) {
  const auto p = UniformModel();
  const std::vector<int> c = {1, 4, 3}, r = {5, 6, 7, 2};
  EXPECT_NEAR(nll(p, std::span<const int>(c), std::span<const int>(r)), 4 * std::log(11.0), 1e-12);
}

TEST(Nll, MatchesIncrementalDecoding) {
  const auto p = init_lm<double>(SmallConfig());
  const auto prefix = RandomPrefix<double>(p.config, 2, 3);
  const std::vector<int> c = {1, 4, 3}, r = {5, 6, 7, 2};
  Decoder<double> dec(p, &prefix);
  auto logits = dec.feed(c);
  double logprod = 0;
  for (int t : r) {
    std::vector<double> row(logits.begin(), logits.end());
    kernels::softmax_inplace(row.data(), row.size());
    logprod += std::log(row[static_cast<std::size_t>(t)]);
    const int one[] = {t};
    logits = dec.feed(one);
  }
  EXPECT_NEAR(nll(p, std::span<const int>(c), std::span<const int>(r), &prefix), -logprod, 1e-10);
}

TEST(Nll, DoubledTargetIsLarger) {
  const auto p = init_lm<double>(SmallConfig());
  const std::vector<int> c = {1, 4, 3}, r = {5, 6, 7};
  std::vector<int> rr = r;
  rr.insert(rr.end(), r.begin(), r.end());
  EXPECT_GT(nll(p, std::span<const int>(c), std::span<const int>(rr)),
            nll(p, std::span<const int>(c), std::span<const int>(r)));
}

TEST(Nll, EmptyTargetIsAnError) {
  const auto p = init_lm<double>(SmallConfig());
  const std::vector<int> c = {1}, r;
  EXPECT_THROW(nll(p, std::span<const int>(c), std::span<const int>(r)), Error);
}

// Scalar test objective touching logits, hidden states, prefix and tail rows.
struct Objective {
  std::vector<int> tokens = {1, 4, 7, 3, 9};
  Matrix<double> tail;
  Matrix<double> hidden_weights;
  std::vector<int> targets;

  explicit Objective(const LMConfig& c) {
    std::mt19937_64 rng(99);
    tail = Matrix<double>(2, static_cast<std::size_t>(c.hidden));
    fill_normal(tail.flat(), rng, 0.5);
    hidden_weights = Matrix<double>(7, static_cast<std::size_t>(c.hidden));
    fill_normal(hidden_weights.flat(), rng, 1.0);
    targets = {4, 7, 3, 9, 2, 5, 6};
  }

  double value(const LMParams<double>& p, const KVPrefix<double>& prefix, ForwardCache<double>& c) const {
    forward(p, ForwardInput<double>{tokens, &tail, &prefix, 0, true}, c);
    double f = 0;
    const std::size_t V = static_cast<std::size_t>(p.config.vocab);
    for (std::size_t i = 0; i < 7; ++i) {
      f += kernels::log_sum_exp(c.logits.row(i), V) - c.logits(i, static_cast<std::size_t>(targets[i]));
      f += kernels::dot(c.hidden.row(i), hidden_weights.row(i), hidden_weights.cols());
    }
    return f;
  }

  void gradient(const LMParams<double>& p, const KVPrefix<double>& prefix, GradSink<double>& sink) const {
    ForwardCache<double> c;
    value(p, prefix, c);
    const std::size_t V = static_cast<std::size_t>(p.config.vocab);
    Matrix<double> dl = c.logits;
    for (std::size_t i = 0; i < 7; ++i) {
      kernels::softmax_inplace(dl.row(i), V);
      dl(i, static_cast<std::size_t>(targets[i])) -= 1.0;
    }
    backward(p, c, &dl, &hidden_weights, sink);
  }
};

double RelErr(double a, double b) { return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b)); }

TEST(Gradients, ParametersMatchFiniteDifferences) {
  auto p = init_lm<double>(SmallConfig());
  const auto prefix = RandomPrefix<double>(p.config, 3, 17);
  Objective obj(p.config);
  std::vector<double> g(p.count(), 0.0);
  GradSink<double> sink{&g, nullptr, nullptr};
  obj.gradient(p, prefix, sink);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, p.count() - 1);
  ForwardCache<double> c;
  int checked = 0;
  // Every named tensor at least once, plus random coordinates.
  std::vector<std::size_t> coords;
  for (const auto& e : p.layout.entries) coords.push_back(e.offset + (e.rows * e.cols) / 2);
  for (int i = 0; i < 200; ++i) coords.push_back(pick(rng));
  for (std::size_t k : coords) {
    const double h = 1e-5, orig = p.values[k];
    p.values[k] = orig + h;
    const double fp = obj.value(p, prefix, c);
    p.values[k] = orig - h;
    const double fm = obj.value(p, prefix, c);
    p.values[k] = orig;
    const double fd = (fp - fm) / (2 * h);
    if (std::abs(fd) < 1e-7 && std::abs(g[k]) < 1e-7) continue;  // position rows never touched
    EXPECT_LE(RelErr(fd, g[k]), 1e-4) << "coordinate " << k << " fd=" << fd << " analytic=" << g[k];
    ++checked;
  }
  EXPECT_GT(checked, 150);
}

TEST(Gradients, PrefixAndTailMatchFiniteDifferences) {
  const auto p = init_lm<double>(SmallConfig());
  auto prefix = RandomPrefix<double>(p.config, 3, 17);
  Objective obj(p.config);
  auto gpast = KVPrefix<double>::zeros(p.config.n_layers, 3, p.config.hidden);
  Matrix<double> gtail(2, static_cast<std::size_t>(p.config.hidden));
  GradSink<double> sink{nullptr, &gpast, &gtail};
  obj.gradient(p, prefix, sink);
  ForwardCache<double> c;
  const double h = 1e-5;
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t k = 0; k < prefix.keys[l].size(); k += 3) {
      for (int which = 0; which < 2; ++which) {
        auto& m = which ? prefix.values[l] : prefix.keys[l];
        const auto& gm = which ? gpast.values[l] : gpast.keys[l];
        const double orig = m.data()[k];
        m.data()[k] = orig + h;
        const double fp = obj.value(p, prefix, c);
        m.data()[k] = orig - h;
        const double fm = obj.value(p, prefix, c);
        m.data()[k] = orig;
        EXPECT_LE(RelErr((fp - fm) / (2 * h), gm.data()[k]), 1e-4);
      }
    }
  for (std::size_t k = 0; k < obj.tail.size(); ++k) {
    const double orig = obj.tail.data()[k];
    obj.tail.data()[k] = orig + h;
    const double fp = obj.value(p, prefix, c);
    obj.tail.data()[k] = orig - h;
    const double fm = obj.value(p, prefix, c);
    obj.tail.data()[k] = orig;
    EXPECT_LE(RelErr((fp - fm) / (2 * h), gtail.data()[k]), 1e-4);
  }
}

TEST(Gradients, NllWithGradMatchesNll) {
  const auto p = init_lm<double>(SmallConfig());
  auto prefix = RandomPrefix<double>(p.config, 2, 8);
  const std::vector<int> c = {1, 4, 3}, r = {5, 6, 2};
  auto g = KVPrefix<double>::zeros(p.config.n_layers, 2, p.config.hidden);
  GradSink<double> sink{nullptr, &g, nullptr};
  const double v = nll_with_grad(p, std::span<const int>(c), std::span<const int>(r), &prefix, 1.0, sink);
  EXPECT_NEAR(v, nll(p, std::span<const int>(c), std::span<const int>(r), &prefix), 1e-12);
  const double h = 1e-5;
  auto& k0 = prefix.keys[1];
  for (std::size_t k = 0; k < k0.size(); ++k) {
    const double orig = k0.data()[k];
    k0.data()[k] = orig + h;
    const double fp = nll(p, std::span<const int>(c), std::span<const int>(r), &prefix);
    k0.data()[k] = orig - h;
    const double fm = nll(p, std::span<const int>(c), std::span<const int>(r), &prefix);
    k0.data()[k] = orig;
    EXPECT_LE(RelErr((fp - fm) / (2 * h), g.keys[1].data()[k]), 1e-4);
  }
}

TEST(Gradients, FrozenBackboneRejectsParameterGradients) {
  auto p = init_lm<double>(SmallConfig());
  p.frozen = true;
  std::vector<double> g(p.count());
  GradSink<double> sink{&g, nullptr, nullptr};
  const std::vector<int> c = {1, 4}, r = {5, 2};
  EXPECT_THROW(nll_with_grad(p, std::span<const int>(c), std::span<const int>(r), nullptr, 1.0, sink), Error);
}

TEST(Sample, TopKOneIsGreedy) {
  const auto p = init_lm<float>(SmallConfig());
  GenConfig gen;
  gen.top_k = 1;
  gen.max_new_tokens = 8;
  const std::vector<int> ctx = {1, 4, 3};
  const auto out = sample<float>(p, ctx, nullptr, gen, 123);
  Decoder<float> dec(p, nullptr);
  auto logits = dec.feed(ctx);
  std::vector<int> greedy;
  for (int s = 0; s < 8; ++s) {
    const int t = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (t == corpus::Vocab::kEos) break;
    greedy.push_back(t);
    const int one[] = {t};
    if (s + 1 < 8) logits = dec.feed(one);
  }
  EXPECT_EQ(out, greedy);
}

TEST(Sample, SameSeedSameOutput) {
  const auto p = init_lm<float>(SmallConfig());
  GenConfig gen;
  const std::vector<int> ctx = {1, 4, 3};
  EXPECT_EQ(sample<float>(p, ctx, nullptr, gen, 9), sample<float>(p, ctx, nullptr, gen, 9));
}

TEST(Sample, UnfilteredMatchesSoftmaxChiSquare) {
  const std::vector<double> logits = {0.3, -1.2, 2.0, 0.0, 0.7, -0.4, 1.1, -2.5};
  GenConfig gen;
  gen.top_k = static_cast<int>(logits.size());
  gen.top_p = 1.0;
  std::vector<double> prob = logits;
  kernels::softmax_inplace(prob.data(), prob.size());
  std::mt19937_64 rng(2024);
  std::vector<double> counts(logits.size(), 0.0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) counts[static_cast<std::size_t>(sample_next<double>(logits, gen, rng))] += 1;
  double chi2 = 0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    const double e = n * prob[v];
    chi2 += (counts[v] - e) * (counts[v] - e) / e;
  }
  boost::math::chi_squared dist(static_cast<double>(logits.size() - 1));
  EXPECT_GT(1.0 - boost::math::cdf(dist, chi2), 0.01);
}

TEST(Sample, NucleusKeepsSmallestCoveringSetAndArgmax) {
  // probs after softmax of log(p): .5 .3 .15 .05
  const std::vector<double> logits = {std::log(0.3), std::log(0.05), std::log(0.5), std::log(0.15)};
  GenConfig gen;
  gen.top_p = 0.75;
  auto d = filtered_distribution<double>(logits, gen);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].first, 2);
  EXPECT_EQ(d[1].first, 0);
  EXPECT_NEAR(d[0].second, 0.5 / 0.8, 1e-12);
  gen.top_p = 0.01;
  d = filtered_distribution<double>(logits, gen);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].first, 2);
  // top-k applies first; nucleus mass is measured on the renormalized top-k set.
  gen.top_k = 2;
  gen.top_p = 0.7;
  d = filtered_distribution<double>(logits, gen);
  ASSERT_EQ(d.size(), 2u);  // .5/.8 = .625 < .7
}

TEST(Sample, TemperatureSharpens) {
  const std::vector<double> logits = {1.0, 0.0};
  GenConfig gen;
  gen.top_p = 1.0;
  gen.temperature = 0.5;
  const auto d = filtered_distribution<double>(logits, gen);
  EXPECT_NEAR(d[0].second, 1.0 / (1.0 + std::exp(-2.0)), 1e-12);
}

TEST(GenConfig, ValidatesRanges) {
  GenConfig g;
  g.top_k = 0;
  EXPECT_THROW(g.validate(), Error);
  g = GenConfig{};
  g.top_p = 0.0;
  EXPECT_THROW(g.validate(), Error);
  g = GenConfig{};
  g.temperature = 0.0;
  EXPECT_THROW(g.validate(), Error);
}

TEST(Perplexity, UniformModelGivesVocabSize) {
  const auto p = UniformModel();
  const std::vector<int> text = {5, 6, 7, 8};
  EXPECT_NEAR(perplexity(p, std::span<const int>(text)), 11.0, 1e-9);
}

TEST(Perplexity, SingleTokenIsExpNll) {
  const auto p = init_lm<double>(SmallConfig());
  const std::vector<int> text = {6}, bos = {corpus::Vocab::kBos};
  EXPECT_NEAR(perplexity(p, std::span<const int>(text)),
              std::exp(nll(p, std::span<const int>(bos), std::span<const int>(text))), 1e-12);
  const std::vector<int> empty;
  EXPECT_THROW(perplexity(p, std::span<const int>(empty)), Error);
}

class TrainLmTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    corpus::CorpusConfig cc;
    cc.n_train_prefix = 200;
    cc.n_train_classifier = 400;
    cc.n_dev = 60;
    cc.n_test = 60;
    corpus_ = new corpus::Corpus(corpus::generate_corpus(cc));
  }
  static void TearDownTestSuite() { delete corpus_; }
  static LMConfig Config() {
    LMConfig c;
    c.n_layers = 1;
    c.hidden = 32;
    c.n_heads = 2;
    c.vocab = corpus_->vocab.size();
    c.max_seq = 32;
    return c;
  }
  static corpus::Corpus* corpus_;
};
corpus::Corpus* TrainLmTest::corpus_ = nullptr;

TEST_F(TrainLmTest, InitialLossNearLogVAndDevNllDrops) {
  auto p = init_lm<float>(Config());
  const double before = mean_token_nll(p, corpus_->dev);
  LMTrainConfig tc;
  tc.steps = 150;
  tc.batch = 8;
  const auto trace = train_lm(p, corpus_->train_classifier, tc);
  const double logv = std::log(static_cast<double>(p.config.vocab));
  EXPECT_NEAR(trace.front(), logv, 0.1 * logv);
  EXPECT_LT(mean_token_nll(p, corpus_->dev), before);
  const auto& ex = corpus_->train_classifier[0];
  std::vector<int> text = dialogue_context(ex.c);
  text.erase(text.begin());
  const auto tgt = dialogue_target(ex.r);
  text.insert(text.end(), tgt.begin(), tgt.end());
  EXPECT_LT(perplexity(p, std::span<const int>(text)), static_cast<double>(p.config.vocab));
}

TEST_F(TrainLmTest, DeterministicGivenSeed) {
  LMTrainConfig tc;
  tc.steps = 5;
  tc.batch = 4;
  auto a = init_lm<float>(Config()), b = init_lm<float>(Config());
  EXPECT_EQ(train_lm(a, corpus_->train_classifier, tc), train_lm(b, corpus_->train_classifier, tc));
  EXPECT_EQ(a.values, b.values);
}

TEST_F(TrainLmTest, FrozenParamsRefuseTraining) {
  auto p = init_lm<float>(Config());
  p.frozen = true;
  EXPECT_THROW(train_lm(p, corpus_->train_classifier, LMTrainConfig{}), Error);
}

TEST(Checkpoint, RoundTripAndCorruptionDetection) {
  const auto dir = std::filesystem::temp_directory_path() / "ctxdetox_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "lm.bin";
  const auto p = init_lm<float>(SmallConfig());
  save_lm(p, path);
  const auto q = load_lm(path);
  EXPECT_EQ(q.config, p.config);
  EXPECT_EQ(q.values, p.values);
  EXPECT_TRUE(q.frozen);
  EXPECT_EQ(backbone_hash(q), backbone_hash(p));

  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(-4, std::ios::end);
    const char junk[4] = {1, 2, 3, 4};
    f.write(junk, 4);
  }
  EXPECT_THROW(load_lm(path), Error);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ctxdetox::tinylm
