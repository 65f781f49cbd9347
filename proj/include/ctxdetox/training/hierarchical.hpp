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

// Training of the hierarchical control prefixes.
//
// Per example the meta prefix h_alpha^{m_r} generates a stance prefix from
// the context; it is added to the toxicity prefix h_beta^{t_r} and the sum is
// injected into the frozen LM to score the response. Two hinge terms shape
// the generated prefixes:
//   stance   max(m - |f(h1, c) - f(h0, c)|, 0)^2  on offensive contexts
//   context  max(m - |mean_0 f(h0, c) - mean_1 f(h0, c)|, 0)^2
// where mean_k averages over the minibatch examples with t_c = k.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxdetox/core/adamw.hpp"
#include "ctxdetox/core/parallel.hpp"
#include "ctxdetox/corpus/oracles.hpp"
#include "ctxdetox/prefix/prefix.hpp"
#include "ctxdetox/tinylm/inference.hpp"
#include "ctxdetox/tinylm/train.hpp"

namespace ctxdetox::training {

using corpus::DialogueExample;
using prefix::MetaPrefixModel;
using prefix::PrefixBank;
using tinylm::LMParams;

/// 1 exactly when the context is offensive and the response supports it.
inline int meta_index(int t_c, int s_r) {
  require((t_c == 0 || t_c == 1) && (s_r == 0 || s_r == 1), "meta_index: inputs must be binary");
  return t_c & s_r;
}

inline int meta_index(const DialogueExample& ex) {
  require(ex.s_r.has_value(), "meta_index: example has a neutral stance (s_r undefined)");
  return meta_index(ex.t_c, *ex.s_r);
}

struct LossWeights {
  double lm = 0.5;       // w1
  double stance = 0.3;   // w2
  double context = 0.4;  // w3
  double margin = 0.8;   // m

  void validate() const {
    require(lm >= 0 && stance >= 0 && context >= 0, "LossWeights: weights must be nonnegative");
    require(margin > 0, "LossWeights: margin must be positive");
  }
};

enum class Ablation { kFull, kNoStance, kNoContext, kNoBoth };

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoStance: return "no_Ls";
    case Ablation::kNoContext: return "no_Lc";
    case Ablation::kNoBoth: return "no_both";
  }
  return "?";
}

inline Ablation parse_ablation(std::string_view s) {
  for (Ablation a : {Ablation::kFull, Ablation::kNoStance, Ablation::kNoContext, Ablation::kNoBoth})
    if (ablation_name(a) == s) return a;
  fail("unknown ablation '", s, "' (expected full, no_Ls, no_Lc or no_both)");
}

inline bool uses_stance_term(Ablation a) { return a == Ablation::kFull || a == Ablation::kNoContext; }
inline bool uses_context_term(Ablation a) { return a == Ablation::kFull || a == Ablation::kNoStance; }

/// How the stance term is averaged over a minibatch.
enum class StanceReduction {
  kBatchMean,      // divide by the batch size, zero terms included
  kOffensiveMean,  // divide by the number of offensive-context examples
};

struct TrainConfig {
  int steps = 3000;
  int batch = 16;
  double lr_meta = 2e-3;
  double lr_toxicity = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 42;
  Ablation ablation = Ablation::kFull;
  StanceReduction stance_reduction = StanceReduction::kBatchMean;
  int slots = 5;        // M
  int small_dim = 64;   // P

  void validate() const {
    require(steps >= 0 && batch >= 2, "TrainConfig: steps >= 0 and batch >= 2 required");
    require(lr_meta > 0 && lr_toxicity > 0, "TrainConfig: learning rates must be positive");
    require(lr_toxicity <= lr_meta, "TrainConfig: lr_toxicity must not exceed lr_meta");
    require(slots >= 1 && small_dim >= 1, "TrainConfig: prefix dimensions must be positive");
  }
};

/// max(m - d, 0)^2
inline double hinge_sq(double margin, double d) {
  const double h = std::max(margin - d, 0.0);
  return h * h;
}

/// d/dd of hinge_sq.
inline double hinge_sq_grad(double margin, double d) { return -2.0 * std::max(margin - d, 0.0); }

/// Context hinge from two class-mean prefixes given as flat vectors.
inline double context_loss_from_means(std::span<const double> mean0, std::span<const double> mean1,
                                      double margin) {
  require(mean0.size() == mean1.size(), "context_loss_from_means: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < mean0.size(); ++i) s += (mean0[i] - mean1[i]) * (mean0[i] - mean1[i]);
  return hinge_sq(margin, std::sqrt(s));
}

inline double combine_losses(const LossWeights& w, Ablation a, double lm, double stance, double context) {
  return w.lm * lm + (uses_stance_term(a) ? w.stance * stance : 0.0) +
         (uses_context_term(a) ? w.context * context : 0.0);
}

struct LossBreakdown {
  double lm = 0;        // mean nll per example
  double stance = 0;    // reported 0 when ablated
  double context = 0;   // reported 0 when ablated or skipped
  double total = 0;
  double d_s_mean = 0;  // mean stance distance over offensive-context examples (diagnostic)
  double d_c = 0;       // distance between the class means (diagnostic, 0 if skipped)
  bool context_skipped = false;
};

/// Gradient container for the two trainable sets: alpha (meta model) and beta (toxicity bank).
template <typename T>
struct HierGrad {
  MetaPrefixModel<T> meta;
  PrefixBank<T> tox;

  static HierGrad zeros_like(const MetaPrefixModel<T>& m, const PrefixBank<T>& t) {
    return {m.zeros_like(), t.zeros_like()};
  }
  void add(HierGrad& o) {
    prefix::add_scaled<T>(meta, o.meta);
    prefix::add_scaled<T>(tox, o.tox);
  }
  void zero() {
    prefix::zero_all<T>(meta);
    prefix::zero_all<T>(tox);
  }
};

namespace detail {

template <typename T>
double sq_dist(const Matrix<T>& a, const Matrix<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    s += d * d;
  }
  return s;
}

template <typename T>
struct ExampleState {
  int m_r = 0;
  bool has_other = false;
  prefix::StanceGenCache<T> cache_own, cache_other;
  Matrix<T> gen_own, gen_other;  // f(h^{m_r}, c), f(h^{1-m_r}, c)
  Matrix<T> dlm;                 // d(weighted LM term)/d(injected prefix)
  Matrix<T> d_own, d_other;
  double nll = 0;

  const Matrix<T>& gen_zero() const { return m_r == 0 ? gen_own : gen_other; }
  Matrix<T>& grad_zero() { return m_r == 0 ? d_own : d_other; }
};

}  // namespace detail

/// Evaluates the weighted objective on one batch and, when `grad_slots` is
/// non-null (one slot per example), accumulates per-example gradients.
template <typename T>
LossBreakdown evaluate_batch(const LMParams<T>& lm, const MetaPrefixModel<T>& meta, const PrefixBank<T>& tox,
                             std::span<const DialogueExample* const> batch, const LossWeights& w, Ablation ablation,
                             StanceReduction reduction = StanceReduction::kBatchMean,
                             std::vector<HierGrad<T>>* grad_slots = nullptr) {
  require(!batch.empty(), "evaluate_batch: empty batch");
  require(lm.frozen, "evaluate_batch: the backbone must be frozen");
  w.validate();
  const std::size_t B = batch.size();
  const bool want_grad = grad_slots != nullptr;
  if (want_grad) require(grad_slots->size() >= B, "evaluate_batch: not enough gradient slots");
  const Matrix<T> meta_flat[2] = {meta.bank[0].materialize(), meta.bank[1].materialize()};
  const Matrix<T> tox_flat[2] = {tox[0].materialize(), tox[1].materialize()};
  const T w_lm = static_cast<T>(w.lm);

  std::vector<detail::ExampleState<T>> st(B);
  parallel_for(B, [&](std::size_t b) {
    const DialogueExample& ex = *batch[b];
    auto& s = st[b];
    s.m_r = meta_index(ex);
    s.gen_own = prefix::stance_prefix_forward(lm, meta_flat[s.m_r], meta.readout_embeddings,
                                              meta.readout_projection, ex.c, s.cache_own);
    s.has_other = ex.t_c == 1;
    if (s.has_other)
      s.gen_other = prefix::stance_prefix_forward(lm, meta_flat[1 - s.m_r], meta.readout_embeddings,
                                                  meta.readout_projection, ex.c, s.cache_other);
    const auto kv = prefix::to_kv(prefix::combine(s.gen_own, tox_flat[ex.t_r]), lm.config);
    const auto ctx = tinylm::dialogue_context(ex.c);
    const auto tgt = tinylm::dialogue_target(ex.r);
    if (want_grad) {
      auto dkv = prefix::KVPrefix<T>::zeros(lm.config.n_layers, kv.length(), lm.config.hidden);
      tinylm::GradSink<T> sink{nullptr, &dkv, nullptr};
      s.nll = static_cast<double>(tinylm::nll_with_grad<T>(lm, ctx, tgt, &kv, w_lm / static_cast<T>(B), sink));
      s.dlm = prefix::flatten(dkv);
    } else {
      s.nll = static_cast<double>(tinylm::nll<T>(lm, ctx, tgt, &kv));
    }
  });

  LossBreakdown out;
  for (const auto& s : st) out.lm += s.nll;
  out.lm /= static_cast<double>(B);

  const bool stance_on = uses_stance_term(ablation);
  const bool context_on = uses_context_term(ablation);
  if (want_grad) {
    for (std::size_t b = 0; b < B; ++b) {
      st[b].d_own = Matrix<T>(st[b].gen_own.rows(), st[b].gen_own.cols());
      if (st[b].has_other) st[b].d_other = Matrix<T>(st[b].gen_own.rows(), st[b].gen_own.cols());
    }
  }

  // Stance term.
  std::size_t n_off = 0;
  double stance_sum = 0;
  for (std::size_t b = 0; b < B; ++b) {
    if (!st[b].has_other) continue;
    ++n_off;
    stance_sum += hinge_sq(w.margin, std::sqrt(detail::sq_dist(st[b].gen_own, st[b].gen_other)));
  }
  const double stance_denom =
      reduction == StanceReduction::kBatchMean ? static_cast<double>(B) : static_cast<double>(std::max<std::size_t>(n_off, 1));
  double d_s_sum = 0;
  for (std::size_t b = 0; b < B; ++b) {
    auto& s = st[b];
    if (!s.has_other) continue;
    const double d = std::sqrt(detail::sq_dist(s.gen_own, s.gen_other));
    d_s_sum += d;
    if (want_grad && stance_on && d > 0) {
      const double coef = w.stance * hinge_sq_grad(w.margin, d) / d / stance_denom;
      if (coef != 0.0) {
        for (std::size_t i = 0; i < s.gen_own.size(); ++i) {
          const T g = static_cast<T>(coef * (static_cast<double>(s.gen_own.data()[i]) - s.gen_other.data()[i]));
          s.d_own.data()[i] += g;
          s.d_other.data()[i] -= g;
        }
      }
    }
  }
  out.d_s_mean = n_off ? d_s_sum / static_cast<double>(n_off) : 0.0;
  if (stance_on) out.stance = stance_sum / stance_denom;

  // Context term over minibatch class means of f(h^0, c).
  std::size_t n_cls[2] = {0, 0};
  for (std::size_t b = 0; b < B; ++b) ++n_cls[batch[b]->t_c];
  if (n_cls[0] == 0 || n_cls[1] == 0) {
    out.context_skipped = true;
  } else {
    const std::size_t sz = st[0].gen_own.size();
    std::vector<double> mean[2] = {std::vector<double>(sz, 0.0), std::vector<double>(sz, 0.0)};
    for (std::size_t b = 0; b < B; ++b) {
      const auto& g = st[b].gen_zero();
      auto& mk = mean[batch[b]->t_c];
      for (std::size_t i = 0; i < sz; ++i) mk[i] += static_cast<double>(g.data()[i]);
    }
    for (int k = 0; k < 2; ++k)
      for (double& v : mean[k]) v /= static_cast<double>(n_cls[k]);
    double s2 = 0;
    for (std::size_t i = 0; i < sz; ++i) s2 += (mean[0][i] - mean[1][i]) * (mean[0][i] - mean[1][i]);
    out.d_c = std::sqrt(s2);
    if (context_on) out.context = hinge_sq(w.margin, out.d_c);
    if (want_grad && context_on && out.d_c > 0) {
      const double coef = w.context * hinge_sq_grad(w.margin, out.d_c) / out.d_c;
      if (coef != 0.0) {
        for (std::size_t b = 0; b < B; ++b) {
          const int k = batch[b]->t_c;
          const double sign = k == 0 ? 1.0 : -1.0;
          const double c = sign * coef / static_cast<double>(n_cls[k]);
          auto& g = st[b].grad_zero();
          for (std::size_t i = 0; i < sz; ++i) g.data()[i] += static_cast<T>(c * (mean[0][i] - mean[1][i]));
        }
      }
    }
  }
  out.total = combine_losses(w, ablation, out.lm, out.stance, out.context);

  if (want_grad) {
    parallel_for(B, [&](std::size_t b) {
      const DialogueExample& ex = *batch[b];
      auto& s = st[b];
      auto& g = (*grad_slots)[b];
      g.zero();
      kernels::axpy(T(1), s.dlm.data(), s.d_own.data(), s.d_own.size());
      prefix::generate_stance_prefix_backward(lm, meta, s.m_r, s.cache_own, s.d_own, g.meta);
      if (s.has_other) {
        bool nonzero = false;
        for (T v : s.d_other.flat()) nonzero |= v != T(0);
        if (nonzero) prefix::generate_stance_prefix_backward(lm, meta, 1 - s.m_r, s.cache_other, s.d_other, g.meta);
      }
      tox[ex.t_r].backward(s.dlm, g.tox[ex.t_r]);
    });
  }
  return out;
}

/// Batch mean of the per-example nll under f(h_alpha^{m_r}, c) + h_beta^{t_r}.
template <typename T>
double lm_loss(const LMParams<T>& lm, const MetaPrefixModel<T>& meta, const PrefixBank<T>& tox,
               std::span<const DialogueExample* const> batch) {
  return evaluate_batch(lm, meta, tox, batch, LossWeights{1, 0, 0, 0.8}, Ablation::kNoBoth).lm;
}

template <typename T>
double stance_contrastive_loss(const LMParams<T>& lm, const MetaPrefixModel<T>& meta, const PrefixBank<T>& tox,
                               std::span<const DialogueExample* const> batch, double margin,
                               StanceReduction reduction = StanceReduction::kBatchMean) {
  return evaluate_batch(lm, meta, tox, batch, LossWeights{0, 1, 0, margin}, Ablation::kNoContext, reduction).stance;
}

/// Returns nullopt when the batch lacks one of the two context classes.
template <typename T>
std::optional<double> context_contrastive_loss(const LMParams<T>& lm, const MetaPrefixModel<T>& meta,
                                               const PrefixBank<T>& tox,
                                               std::span<const DialogueExample* const> batch, double margin) {
  const auto r = evaluate_batch(lm, meta, tox, batch, LossWeights{0, 0, 1, margin}, Ablation::kNoStance);
  if (r.context_skipped) return std::nullopt;
  return r.context;
}

template <typename T>
double total_loss(const LMParams<T>& lm, const MetaPrefixModel<T>& meta, const PrefixBank<T>& tox,
                  std::span<const DialogueExample* const> batch, const LossWeights& w, Ablation ablation) {
  return evaluate_batch(lm, meta, tox, batch, w, ablation).total;
}

/// Draws batches that contain both classes whenever both exist, in
/// proportion to their frequency in the split (or half and half when
/// `balanced`).
class StratifiedSampler {
 public:
  StratifiedSampler(std::span<const int> labels, std::size_t batch, std::uint64_t seed, bool balanced = false)
      : batch_(batch) {
    std::vector<std::size_t> idx[2];
    for (std::size_t i = 0; i < labels.size(); ++i) idx[labels[i] ? 1 : 0].push_back(i);
    require(!labels.empty(), "StratifiedSampler: empty split");
    for (int k = 0; k < 2; ++k) {
      members_[k] = idx[k];
      if (!idx[k].empty()) samplers_[k].emplace(idx[k].size(), derive_seed(seed, 0x5354u, static_cast<std::uint64_t>(k)));
    }
    if (!idx[0].empty() && !idx[1].empty()) {
      const double frac1 =
          balanced ? 0.5 : static_cast<double>(idx[1].size()) / static_cast<double>(labels.size());
      take1_ = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(frac1 * static_cast<double>(batch))), 1,
                                       batch - 1);
    } else {
      take1_ = idx[1].empty() ? 0 : batch;
    }
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    const std::size_t take[2] = {batch_ - take1_, take1_};
    for (int k = 0; k < 2; ++k) {
      if (take[k] == 0) continue;
      for (std::size_t j : samplers_[k]->next(take[k])) out.push_back(members_[k][j]);
    }
    return out;
  }

 private:
  std::size_t batch_;
  std::size_t take1_ = 0;
  std::vector<std::size_t> members_[2];
  std::optional<tinylm::EpochSampler> samplers_[2];
};

struct TraceRow {
  int step = 0;
  LossBreakdown loss;
};

inline void write_loss_trace(const std::vector<TraceRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write loss trace ", path.string());
  out << "step,L_LM,L_s,L_c,total,d_s_mean,d_c\n";
  for (const auto& r : rows)
    out << r.step << ',' << fmt_real(r.loss.lm) << ',' << fmt_real(r.loss.stance) << ','
        << fmt_real(r.loss.context) << ',' << fmt_real(r.loss.total) << ',' << fmt_real(r.loss.d_s_mean) << ','
        << fmt_real(r.loss.d_c) << '\n';
  require(out.good(), "write failed for ", path.string());
}

template <typename T>
struct HierarchicalResult {
  MetaPrefixModel<T> meta;
  PrefixBank<T> tox;
  std::vector<TraceRow> trace;
};

/// Registers every tensor of `model` (values) with its twin in `grad`.
template <typename T, typename Model>
void register_params(AdamW<T>& opt, Model& model, Model& grad) {
  const auto v = prefix::tensors_of<T>(model);
  const auto g = prefix::tensors_of<T>(grad);
  for (std::size_t i = 0; i < v.size(); ++i)
    opt.add(std::span<T>(v[i]->storage()), std::span<const T>(g[i]->storage()));
}

template <typename T>
HierarchicalResult<T> train_hierarchical(const LMParams<T>& lm, std::span<const DialogueExample> split,
                                         const LossWeights& w, const TrainConfig& cfg, const PrefixBank<T>& tox_init,
                                         const std::function<void(const TraceRow&)>& on_step = nullptr) {
  cfg.validate();
  w.validate();
  require(lm.frozen, "train_hierarchical: the backbone must be frozen");
  require(!split.empty(), "train_hierarchical: empty training split");
  std::vector<int> labels;
  for (const auto& ex : split) {
    meta_index(ex);
    labels.push_back(ex.t_c);
  }
  const auto shape = prefix::PrefixShape::for_lm(lm.config, cfg.slots, cfg.small_dim);
  require(tox_init[0].slots() == static_cast<std::size_t>(cfg.slots) &&
              tox_init[0].width() == static_cast<std::size_t>(shape.width),
          "train_hierarchical: toxicity bank geometry does not match the configured prefix");

  HierarchicalResult<T> res;
  res.meta = MetaPrefixModel<T>::random(lm.config, shape, derive_seed(cfg.seed, 0x4d455441u));
  res.tox = tox_init;
  HierGrad<T> grad = HierGrad<T>::zeros_like(res.meta, res.tox);
  const std::size_t B = static_cast<std::size_t>(cfg.batch);
  std::vector<HierGrad<T>> slots(B, grad);

  AdamW<T> opt_meta(AdamWConfig{cfg.lr_meta, 0.9, 0.999, 1e-8, cfg.weight_decay});
  AdamW<T> opt_tox(AdamWConfig{cfg.lr_toxicity, 0.9, 0.999, 1e-8, cfg.weight_decay});
  register_params(opt_meta, res.meta, grad.meta);
  register_params(opt_tox, res.tox, grad.tox);

  StratifiedSampler sampler(labels, B, cfg.seed);
  std::vector<const DialogueExample*> batch(B);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto idx = sampler.next();
    for (std::size_t b = 0; b < B; ++b) batch[b] = &split[idx[b]];
    const LossBreakdown l = evaluate_batch<T>(lm, res.meta, res.tox, batch, w, cfg.ablation, cfg.stance_reduction, &slots);
    require(std::isfinite(l.total) && std::isfinite(l.lm) && std::isfinite(l.stance) && std::isfinite(l.context),
            "train_hierarchical: non-finite loss at step ", step, " (L_LM=", l.lm, ", L_s=", l.stance,
            ", L_c=", l.context, ")");
    grad.zero();
    for (auto& s : slots) grad.add(s);
    opt_meta.step();
    opt_tox.step();
    res.trace.push_back({step, l});
    if (on_step) on_step(res.trace.back());
  }
  return res;
}

struct DevMargins {
  double d_s_mean = 0;  // over offensive-context examples
  double d_c = 0;       // between the class means of f(h^0, c)
};

/// Stance and context distances of the generated prefixes on a held-out split.
template <typename T>
DevMargins dev_margins(const LMParams<T>& lm, const MetaPrefixModel<T>& meta, std::span<const DialogueExample> split) {
  const Matrix<T> flat[2] = {meta.bank[0].materialize(), meta.bank[1].materialize()};
  const std::size_t n = split.size();
  std::vector<Matrix<T>> g0(n);
  std::vector<double> ds(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    prefix::StanceGenCache<T> cache;
    g0[i] = prefix::stance_prefix_forward(lm, flat[0], meta.readout_embeddings, meta.readout_projection, split[i].c, cache);
    if (split[i].t_c == 1) {
      const auto g1 = prefix::stance_prefix_forward(lm, flat[1], meta.readout_embeddings, meta.readout_projection,
                                                    split[i].c, cache);
      ds[i] = std::sqrt(detail::sq_dist(g0[i], g1));
    }
  });
  DevMargins out;
  std::size_t n_cls[2] = {0, 0};
  std::vector<double> mean[2];
  for (std::size_t i = 0; i < n; ++i) {
    const int k = split[i].t_c;
    if (mean[k].empty()) mean[k].assign(g0[i].size(), 0.0);
    for (std::size_t j = 0; j < g0[i].size(); ++j) mean[k][j] += static_cast<double>(g0[i].data()[j]);
    ++n_cls[k];
    if (k == 1) out.d_s_mean += ds[i];
  }
  if (n_cls[1]) out.d_s_mean /= static_cast<double>(n_cls[1]);
  if (n_cls[0] && n_cls[1]) {
    double s = 0;
    for (std::size_t j = 0; j < mean[0].size(); ++j) {
      const double d = mean[0][j] / static_cast<double>(n_cls[0]) - mean[1][j] / static_cast<double>(n_cls[1]);
      s += d * d;
    }
    out.d_c = std::sqrt(s);
  }
  return out;
}

}  // namespace ctxdetox::training
