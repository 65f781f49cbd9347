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
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "ctxdetox/training/hierarchical.hpp"
#include "ctxdetox/training/supervised.hpp"

namespace ctxdetox::training {
namespace {

using prefix::MetaPrefixModel;
using tinylm::LMConfig;
using prefix::PrefixShape;

LMConfig ToyConfig() {
  LMConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.n_heads = 2;
  c.vocab = 20;
  c.max_seq = 24;
  c.ffn_mult = 2;
  c.init_std = 0.3;
  c.seed = 7;
  return c;
}

template <typename T>
LMParams<T> FrozenToy() {
  auto p = tinylm::init_lm<T>(ToyConfig());
  p.frozen = true;
  return p;
}

/// Random labelled examples over content tokens 5..19. Every (t_c, s_r) pair
/// appears when n >= 4.
std::vector<DialogueExample> ToyExamples(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(5, 19), len(2, 4);
  std::vector<DialogueExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    DialogueExample ex;
    for (int k = len(rng); k > 0; --k) ex.c.push_back(tok(rng));
    for (int k = len(rng); k > 0; --k) ex.r.push_back(tok(rng));
    ex.t_c = static_cast<int>(i % 2);
    ex.s_r = static_cast<int>((i / 2) % 2);
    ex.t_r = static_cast<int>((i / 4) % 2);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<const DialogueExample*> Pointers(const std::vector<DialogueExample>& v) {
  std::vector<const DialogueExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

struct ToyModel {
  PrefixShape shape;
  MetaPrefixModel<double> meta;
  PrefixBank<double> tox;
};

ToyModel MakeToyModel(const LMParams<double>& lm, std::uint64_t seed) {
  ToyModel m;
  m.shape = PrefixShape::for_lm(lm.config, 2, 4);
  m.meta = MetaPrefixModel<double>::random(lm.config, m.shape, seed);
  std::mt19937_64 rng(seed + 1);
  // Spread the readout inputs so that generated prefixes differ visibly.
  fill_normal(m.meta.readout_embeddings.flat(), rng, 0.5);
  m.tox = PrefixBank<double>::random(m.shape, rng);
  return m;
}

TEST(MetaIndex, TruthTable) {
  EXPECT_EQ(meta_index(1, 1), 1);
  EXPECT_EQ(meta_index(0, 1), 0);
  EXPECT_EQ(meta_index(1, 0), 0);
  EXPECT_EQ(meta_index(0, 0), 0);
  DialogueExample neutral;
  EXPECT_THROW(meta_index(neutral), Error);
}

TEST(LossArithmetic, WorkedExamples) {
  EXPECT_NEAR(hinge_sq(0.8, 0.5), 0.09, 1e-9);
  EXPECT_EQ(hinge_sq(0.8, 0.8), 0.0);
  EXPECT_EQ(hinge_sq(0.8, 1.3), 0.0);
  EXPECT_EQ(hinge_sq_grad(0.8, 1.3), 0.0);
  const std::vector<double> zero = {0, 0}, e1 = {0.3, 0.4};
  EXPECT_NEAR(context_loss_from_means(zero, e1, 0.8), 0.09, 1e-9);
  EXPECT_NEAR(context_loss_from_means(e1, e1, 0.8), 0.64, 1e-9);
  const LossWeights w;
  EXPECT_NEAR(combine_losses(w, Ablation::kFull, 2.0, 0.09, 0.64), 1.283, 1e-9);
  EXPECT_EQ(combine_losses(w, Ablation::kNoBoth, 2.0, 0.09, 0.64), 0.5 * 2.0);
  EXPECT_EQ(combine_losses(LossWeights{1, 0, 0, 0.8}, Ablation::kFull, 2.0, 0.09, 0.64), 2.0);
}

TEST(LossArithmetic, DiscriminativeSymmetryIsLnTwo) {
  EXPECT_NEAR(discriminative_loss(3.7, 3.7, 0), std::log(2.0), 1e-12);
  EXPECT_NEAR(discriminative_loss(3.7, 3.7, 1), std::log(2.0), 1e-12);
  EXPECT_GT(discriminative_loss(1.0, 5.0, 1), discriminative_loss(1.0, 5.0, 0));
  EXPECT_GE(discriminative_loss(1.0, 50.0, 0), 0.0);
}

TEST(Ablation, NamesRoundTrip) {
  for (Ablation a : {Ablation::kFull, Ablation::kNoStance, Ablation::kNoContext, Ablation::kNoBoth})
    EXPECT_EQ(parse_ablation(ablation_name(a)), a);
  EXPECT_THROW(parse_ablation("none"), Error);
}

TEST(TrainConfig, ToxicityRateMayNotExceedMetaRate) {
  TrainConfig c;
  c.lr_toxicity = c.lr_meta * 2;
  EXPECT_THROW(c.validate(), Error);
}

class LossTest : public ::testing::Test {
 protected:
  LossTest() : lm_(FrozenToy<double>()), model_(MakeToyModel(lm_, 100)), data_(ToyExamples(8, 5)) {}
  LMParams<double> lm_;
  ToyModel model_;
  std::vector<DialogueExample> data_;
};

TEST_F(LossTest, StanceLossIsZeroWithoutOffensiveContexts) {
  std::vector<const DialogueExample*> batch;
  for (const auto& e : data_)
    if (e.t_c == 0) batch.push_back(&e);
  EXPECT_EQ(stance_contrastive_loss(lm_, model_.meta, model_.tox, batch, 10.0), 0.0);
  // Only one class present: the context term is skipped.
  EXPECT_FALSE(context_contrastive_loss(lm_, model_.meta, model_.tox, batch, 0.8).has_value());
}

TEST_F(LossTest, StanceIndicatorScaling) {
  const auto all = Pointers(data_);
  std::vector<const DialogueExample*> off;
  for (const auto* e : all)
    if (e->t_c == 1) off.push_back(e);
  const double margin = 10.0;
  const double full = stance_contrastive_loss(lm_, model_.meta, model_.tox, all, margin);
  const double sub = stance_contrastive_loss(lm_, model_.meta, model_.tox, off, margin);
  EXPECT_GT(full, 0.0);
  EXPECT_NEAR(full, sub * static_cast<double>(off.size()) / static_cast<double>(all.size()), 1e-12);
  const double per_offensive = stance_contrastive_loss(lm_, model_.meta, model_.tox, all, margin,
                                                       StanceReduction::kOffensiveMean);
  EXPECT_NEAR(per_offensive, sub, 1e-12);
}

TEST_F(LossTest, HingesAreBoundedByMarginSquared) {
  for (double margin : {0.1, 0.8, 3.0, 50.0}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto data = ToyExamples(6, seed);
      const auto batch = Pointers(data);
      const double ls = stance_contrastive_loss(lm_, model_.meta, model_.tox, batch, margin);
      const auto lc = context_contrastive_loss(lm_, model_.meta, model_.tox, batch, margin);
      ASSERT_TRUE(lc.has_value());
      EXPECT_GE(ls, 0.0);
      EXPECT_LE(ls, margin * margin);
      EXPECT_GE(*lc, 0.0);
      EXPECT_LE(*lc, margin * margin);
    }
  }
}

TEST_F(LossTest, EqualMetaEntriesGiveZeroStanceDistance) {
  auto meta = model_.meta;
  meta.bank[1] = meta.bank[0];
  const auto r = evaluate_batch(lm_, meta, model_.tox, Pointers(data_), LossWeights{}, Ablation::kFull);
  EXPECT_EQ(r.d_s_mean, 0.0);
  EXPECT_NEAR(r.stance, 0.64 * 4.0 / 8.0, 1e-12);
}

TEST_F(LossTest, LmLossIsMeanOfPerExampleLosses) {
  const auto all = Pointers(data_);
  double sum = 0;
  for (const auto* e : all) sum += lm_loss(lm_, model_.meta, model_.tox, std::vector<const DialogueExample*>{e});
  EXPECT_NEAR(lm_loss(lm_, model_.meta, model_.tox, all), sum / static_cast<double>(all.size()), 1e-12);
}

TEST_F(LossTest, UniformBackboneGivesLengthTimesLogV) {
  auto uniform = lm_;
  std::fill(uniform.values.begin() + static_cast<std::ptrdiff_t>(uniform.layout.w_out), uniform.values.end(), 0.0);
  const DialogueExample& ex = data_[3];
  const double want = static_cast<double>(ex.r.size() + 1) * std::log(20.0);
  EXPECT_NEAR(lm_loss(uniform, model_.meta, model_.tox, std::vector<const DialogueExample*>{&ex}), want, 1e-12);
}

TEST_F(LossTest, TotalUnderAblations) {
  const auto all = Pointers(data_);
  const LossWeights w{0.5, 0.3, 0.4, 10.0};
  const auto full = evaluate_batch(lm_, model_.meta, model_.tox, all, w, Ablation::kFull);
  EXPECT_NEAR(full.total, 0.5 * full.lm + 0.3 * full.stance + 0.4 * full.context, 1e-12);
  const auto none = evaluate_batch(lm_, model_.meta, model_.tox, all, w, Ablation::kNoBoth);
  EXPECT_EQ(none.total, 0.5 * none.lm);
  EXPECT_EQ(none.stance, 0.0);
  EXPECT_EQ(none.context, 0.0);
  EXPECT_EQ(none.d_s_mean, full.d_s_mean);
  EXPECT_EQ(none.d_c, full.d_c);
  EXPECT_EQ(total_loss(lm_, model_.meta, model_.tox, all, LossWeights{1, 0, 0, 0.8}, Ablation::kFull),
            lm_loss(lm_, model_.meta, model_.tox, all));
}

// Central finite differences on 20 sampled alpha/beta coordinates.
void CheckGradient(const LMParams<double>& lm, ToyModel m, std::span<const DialogueExample* const> batch,
                   const LossWeights& w, std::uint64_t seed) {
  std::vector<HierGrad<double>> slots(batch.size(), HierGrad<double>::zeros_like(m.meta, m.tox));
  evaluate_batch(lm, m.meta, m.tox, batch, w, Ablation::kFull, StanceReduction::kBatchMean, &slots);
  auto grad = HierGrad<double>::zeros_like(m.meta, m.tox);
  for (auto& s : slots) grad.add(s);

  auto values = prefix::tensors_of<double>(m.meta);
  for (auto* t : prefix::tensors_of<double>(m.tox)) values.push_back(t);
  auto grads = prefix::tensors_of<double>(grad.meta);
  for (auto* t : prefix::tensors_of<double>(grad.tox)) grads.push_back(t);

  std::mt19937_64 rng(seed);
  const double h = 1e-6;
  int nonzero = 0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(rng);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, values[t]->size() - 1)(rng);
    const double keep = values[t]->data()[i];
    values[t]->data()[i] = keep + h;
    const double up = evaluate_batch(lm, m.meta, m.tox, batch, w, Ablation::kFull).total;
    values[t]->data()[i] = keep - h;
    const double down = evaluate_batch(lm, m.meta, m.tox, batch, w, Ablation::kFull).total;
    values[t]->data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double an = grads[t]->data()[i];
    nonzero += an != 0.0;
    EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(1e-4, std::abs(fd))) << "tensor " << t << " index " << i;
  }
  EXPECT_GT(nonzero, 5);
}

TEST_F(LossTest, LmGradientMatchesFiniteDifferences) {
  CheckGradient(lm_, model_, Pointers(data_), LossWeights{1, 0, 0, 0.8}, 1);
}

TEST_F(LossTest, StanceGradientMatchesFiniteDifferences) {
  CheckGradient(lm_, model_, Pointers(data_), LossWeights{0, 1, 0, 10.0}, 2);
}

TEST_F(LossTest, ContextGradientMatchesFiniteDifferences) {
  CheckGradient(lm_, model_, Pointers(data_), LossWeights{0, 0, 1, 10.0}, 3);
}

TEST_F(LossTest, TotalGradientMatchesFiniteDifferences) {
  CheckGradient(lm_, model_, Pointers(data_), LossWeights{0.5, 0.3, 0.4, 10.0}, 4);
}

TEST(StratifiedSampler, BatchesHoldBothClasses) {
  std::vector<int> labels(100, 0);
  for (int i = 0; i < 10; ++i) labels[static_cast<std::size_t>(i * 7)] = 1;
  StratifiedSampler prop(labels, 16, 1);
  StratifiedSampler bal(labels, 16, 1, true);
  for (int s = 0; s < 20; ++s) {
    int ones = 0;
    for (auto i : prop.next()) ones += labels[i];
    EXPECT_EQ(ones, 2);
    ones = 0;
    for (auto i : bal.next()) ones += labels[i];
    EXPECT_EQ(ones, 8);
  }
}

class TrainTest : public ::testing::Test {
 protected:
  TrainTest() : lm_(FrozenToy<float>()), data_(ToyExamples(32, 9)) {
    const auto shape = PrefixShape::for_lm(lm_.config, 2, 4);
    std::mt19937_64 rng(10);
    tox_ = PrefixBank<float>::random(shape, rng);
    cfg_.steps = 6;
    cfg_.batch = 4;
    cfg_.slots = 2;
    cfg_.small_dim = 4;
  }
  HierarchicalResult<float> Run(Ablation a) {
    auto c = cfg_;
    c.ablation = a;
    return train_hierarchical<float>(lm_, data_, LossWeights{}, c, tox_);
  }
  LMParams<float> lm_;
  std::vector<DialogueExample> data_;
  PrefixBank<float> tox_;
  TrainConfig cfg_;
};

TEST_F(TrainTest, DeterministicAndBackboneUntouched) {
  const auto hash = tinylm::backbone_hash(lm_);
  const auto a = Run(Ablation::kFull);
  const auto b = Run(Ablation::kFull);
  EXPECT_EQ(tinylm::backbone_hash(lm_), hash);
  ASSERT_EQ(a.trace.size(), 6u);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    EXPECT_EQ(a.trace[i].loss.total, b.trace[i].loss.total);
    EXPECT_EQ(a.trace[i].loss.d_c, b.trace[i].loss.d_c);
  }
  EXPECT_EQ(a.meta.readout_projection, b.meta.readout_projection);
  EXPECT_EQ(a.tox[0].w, b.tox[0].w);
  // Alpha and beta both moved.
  EXPECT_NE(a.tox[0].w, tox_[0].w);
  const auto init = MetaPrefixModel<float>::random(lm_.config, PrefixShape::for_lm(lm_.config, 2, 4),
                                                   derive_seed(cfg_.seed, 0x4d455441u));
  EXPECT_NE(a.meta.readout_projection, init.readout_projection);
}

TEST_F(TrainTest, AblationsShareInitAndBatchOrder) {
  const auto full = Run(Ablation::kFull);
  const auto none = Run(Ablation::kNoBoth);
  // Same initial parameters and first batch, so the first LM loss agrees exactly.
  EXPECT_EQ(full.trace[0].loss.lm, none.trace[0].loss.lm);
  EXPECT_EQ(full.trace[0].loss.d_c, none.trace[0].loss.d_c);
  for (const auto& r : none.trace) {
    EXPECT_EQ(r.loss.total, 0.5 * r.loss.lm);
    EXPECT_EQ(r.loss.stance, 0.0);
    EXPECT_EQ(r.loss.context, 0.0);
  }
}

TEST_F(TrainTest, RejectsNeutralExamplesAndUnfrozenBackbone) {
  auto data = data_;
  data[3].s_r.reset();
  EXPECT_THROW(train_hierarchical<float>(lm_, data, LossWeights{}, cfg_, tox_), Error);
  auto open = lm_;
  open.frozen = false;
  EXPECT_THROW(train_hierarchical<float>(open, data_, LossWeights{}, cfg_, tox_), Error);
}

TEST(Supervised, EqualBankGivesLnTwoPerExample) {
  const auto lm = FrozenToy<double>();
  const auto shape = PrefixShape::for_lm(lm.config, 2, 4);
  std::mt19937_64 rng(3);
  auto bank = PrefixBank<double>::random(shape, rng);
  bank[1] = bank[0];
  const auto data = ToyExamples(6, 4);
  std::vector<CategorizedExample> batch;
  for (const auto& e : data) batch.push_back({&e, e.t_r});
  const auto s = evaluate_bank_batch<double>(lm, bank, batch, 0.8, 0.2, nullptr);
  EXPECT_NEAR(s.disc, std::log(2.0), 1e-12);
}

TEST(Supervised, BankGradientMatchesFiniteDifferences) {
  const auto lm = FrozenToy<double>();
  const auto shape = PrefixShape::for_lm(lm.config, 2, 4);
  std::mt19937_64 rng(5);
  auto bank = PrefixBank<double>::random(shape, rng);
  const auto data = ToyExamples(6, 6);
  std::vector<CategorizedExample> batch;
  for (const auto& e : data) batch.push_back({&e, e.t_r});
  std::vector<PrefixBank<double>> slots(batch.size(), bank.zeros_like());
  evaluate_bank_batch<double>(lm, bank, batch, 0.8, 0.2, &slots);
  auto grad = bank.zeros_like();
  for (auto& s : slots) prefix::add_scaled<double>(grad, s);
  auto objective = [&]() {
    const auto s = evaluate_bank_batch<double>(lm, bank, batch, 0.8, 0.2, nullptr);
    return 0.8 * s.lm + 0.2 * s.disc;
  };
  auto values = prefix::tensors_of<double>(bank);
  auto grads = prefix::tensors_of<double>(grad);
  std::mt19937_64 pick(7);
  const double h = 1e-6;
  for (int k = 0; k < 20; ++k) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, values.size() - 1)(pick);
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, values[t]->size() - 1)(pick);
    const double keep = values[t]->data()[i];
    values[t]->data()[i] = keep + h;
    const double up = objective();
    values[t]->data()[i] = keep - h;
    const double down = objective();
    values[t]->data()[i] = keep;
    const double fd = (up - down) / (2 * h);
    EXPECT_LE(std::abs(fd - grads[t]->data()[i]), 1e-4 * std::max(1e-4, std::abs(fd)));
  }
}

TEST(Supervised, EmptyCategoryIsAnError) {
  auto lm = FrozenToy<float>();
  auto data = ToyExamples(8, 8);
  for (auto& e : data) e.t_r = 0;
  SupervisedConfig cfg;
  cfg.steps = 1;
  cfg.batch = 4;
  cfg.slots = 2;
  cfg.small_dim = 4;
  EXPECT_THROW(train_toxicity_bank<float>(lm, data, cfg), Error);
}

TEST(Supervised, TrainingLowersObjectiveAndKeepsBackbone) {
  auto lm = FrozenToy<float>();
  const auto hash = tinylm::backbone_hash(lm);
  const auto data = ToyExamples(32, 12);
  SupervisedConfig cfg;
  cfg.steps = 40;
  cfg.batch = 8;
  cfg.lr = 1e-2;
  cfg.slots = 2;
  cfg.small_dim = 4;
  std::vector<SupervisedStep> trace;
  const auto bank = train_toxicity_bank<float>(lm, data, cfg, &trace);
  ASSERT_EQ(trace.size(), 40u);
  double early = 0, late = 0;
  for (int i = 0; i < 5; ++i) {
    early += trace[static_cast<std::size_t>(i)].total;
    late += trace[trace.size() - 1 - static_cast<std::size_t>(i)].total;
  }
  EXPECT_LT(late, early);
  EXPECT_EQ(tinylm::backbone_hash(lm), hash);
  EXPECT_EQ(bank[0].materialize().rows(), 2u);
  EXPECT_EQ(bank[1].materialize().cols(), static_cast<std::size_t>(lm.config.prefix_dim()));
}

}  // namespace
}  // namespace ctxdetox::training
