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

// Trainable prefixes.
//
// A ReparamPrefix factors an M x D prefix as h_small (M x P) times W (P x D).
// The meta-prefix model turns a context into a prefix: the frozen LM reads
// [BOS] c [SEP] followed by M readout slots under a meta prefix, and the
// final hidden states at the readout slots are projected from E to D.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <type_traits>
#include <vector>

#include "ctxdetox/core/tensor.hpp"
#include "ctxdetox/tinylm/kv_prefix.hpp"
#include "ctxdetox/tinylm/model.hpp"
#include "ctxdetox/tinylm/train.hpp"

namespace ctxdetox::prefix {

using tinylm::flatten;
using tinylm::KVPrefix;
using tinylm::LMConfig;
using tinylm::LMParams;
using tinylm::to_kv;

struct PrefixShape {
  int slots = 5;        // M
  int small_dim = 64;   // P
  int width = 0;        // D = 2 * L * E

  static PrefixShape for_lm(const LMConfig& c, int slots, int small_dim) {
    return {slots, small_dim, c.prefix_dim()};
  }
};

template <typename T>
struct ReparamPrefix {
  Matrix<T> h_small;  // M x P
  Matrix<T> w;        // P x D

  static ReparamPrefix random(const PrefixShape& s, std::mt19937_64& rng, double small_std = 1.0,
                              double w_std = 0.02) {
    ReparamPrefix r;
    r.h_small = Matrix<T>(static_cast<std::size_t>(s.slots), static_cast<std::size_t>(s.small_dim));
    r.w = Matrix<T>(static_cast<std::size_t>(s.small_dim), static_cast<std::size_t>(s.width));
    fill_normal(r.h_small.flat(), rng, small_std);
    fill_normal(r.w.flat(), rng, w_std);
    return r;
  }

  std::size_t slots() const { return h_small.rows(); }
  std::size_t width() const { return w.cols(); }

  Matrix<T> materialize() const {
    require(h_small.cols() == w.rows(), "materialize: h_small is ", h_small.rows(), "x", h_small.cols(),
            " but W is ", w.rows(), "x", w.cols());
    return matmul(h_small, w);
  }

  /// Accumulates d(h_small) and d(W) given d(materialized).
  void backward(const Matrix<T>& dflat, ReparamPrefix& grad) const {
    require(dflat.rows() == h_small.rows() && dflat.cols() == w.cols(), "ReparamPrefix::backward: shape mismatch");
    const std::size_t M = h_small.rows(), P = h_small.cols(), D = w.cols();
    kernels::gemm_bt_acc(dflat.data(), w.data(), grad.h_small.data(), M, D, P);
    kernels::gemm_at_acc(h_small.data(), dflat.data(), grad.w.data(), M, P, D);
  }

  ReparamPrefix zeros_like() const {
    return {Matrix<T>(h_small.rows(), h_small.cols()), Matrix<T>(w.rows(), w.cols())};
  }

  void for_each(const std::function<void(Matrix<T>&)>& f) {
    f(h_small);
    f(w);
  }
};

/// Two same-shaped prefixes with fixed index semantics.
template <typename T>
struct PrefixBank {
  std::array<ReparamPrefix<T>, 2> entries;

  static PrefixBank random(const PrefixShape& s, std::mt19937_64& rng) {
    PrefixBank b;
    for (auto& e : b.entries) e = ReparamPrefix<T>::random(s, rng);
    return b;
  }

  const ReparamPrefix<T>& operator[](int i) const {
    require(i == 0 || i == 1, "prefix bank index must be 0 or 1, got ", i);
    return entries[static_cast<std::size_t>(i)];
  }
  ReparamPrefix<T>& operator[](int i) {
    require(i == 0 || i == 1, "prefix bank index must be 0 or 1, got ", i);
    return entries[static_cast<std::size_t>(i)];
  }

  PrefixBank zeros_like() const { return {{entries[0].zeros_like(), entries[1].zeros_like()}}; }

  void for_each(const std::function<void(Matrix<T>&)>& f) {
    for (auto& e : entries) e.for_each(f);
  }
};

template <typename T>
struct MetaPrefixModel {
  PrefixBank<T> bank;                // meta prefixes: 0 = stance-acceptable, 1 = violating
  Matrix<T> readout_embeddings;      // M x E
  Matrix<T> readout_projection;      // E x D

  static MetaPrefixModel random(const LMConfig& lm, const PrefixShape& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    MetaPrefixModel m;
    m.bank = PrefixBank<T>::random(s, rng);
    m.readout_embeddings = Matrix<T>(static_cast<std::size_t>(s.slots), static_cast<std::size_t>(lm.hidden));
    m.readout_projection = Matrix<T>(static_cast<std::size_t>(lm.hidden), static_cast<std::size_t>(s.width));
    fill_normal(m.readout_embeddings.flat(), rng, lm.init_std);
    fill_normal(m.readout_projection.flat(), rng, 1.0 / std::sqrt(static_cast<double>(lm.hidden)) * 0.2);
    return m;
  }

  std::size_t slots() const { return readout_embeddings.rows(); }

  MetaPrefixModel zeros_like() const {
    return {bank.zeros_like(), Matrix<T>(readout_embeddings.rows(), readout_embeddings.cols()),
            Matrix<T>(readout_projection.rows(), readout_projection.cols())};
  }

  void for_each(const std::function<void(Matrix<T>&)>& f) {
    bank.for_each(f);
    f(readout_embeddings);
    f(readout_projection);
  }
};

template <typename T, typename Model>
std::vector<Matrix<T>*> tensors_of(Model& m) {
  std::vector<Matrix<T>*> out;
  m.for_each([&](Matrix<T>& x) { out.push_back(&x); });
  return out;
}

/// dst += scale * src, tensor by tensor (identical structure).
template <typename T, typename Model>
void add_scaled(Model& dst, Model& src, T scale = T(1)) {
  const auto a = tensors_of<T>(dst);
  const auto b = tensors_of<T>(src);
  require(a.size() == b.size(), "add_scaled: structure mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i]->same_shape(*b[i]), "add_scaled: tensor shape mismatch");
    kernels::axpy(scale, b[i]->data(), a[i]->data(), a[i]->size());
  }
}

template <typename T, typename Model>
void zero_all(Model& m) {
  m.for_each([](Matrix<T>& x) { x.fill(T(0)); });
}

template <typename T>
Matrix<T> combine(const Matrix<T>& generated, const Matrix<T>& toxicity) {
  require(generated.same_shape(toxicity), "combine: shape mismatch ", generated.rows(), "x", generated.cols(),
          " vs ", toxicity.rows(), "x", toxicity.cols());
  Matrix<T> out = generated;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += toxicity.data()[i];
  return out;
}

/// Values that must be stored for generation: materialized h_alpha^0 and
/// h_beta^0 plus the readout embeddings and projection. W, h_small and the
/// index-1 entries are training-only.
inline std::size_t persisted_parameter_count(std::size_t m, std::size_t d, std::size_t /*small_dim*/,
                                             std::size_t e, bool include_meta = true) {
  const std::size_t core = 2 * m * d;
  return include_meta ? core + m * e + e * d : core;
}

/// Activations of one stance-prefix generation, kept for backward.
template <typename T>
struct StanceGenCache {
  tinylm::ForwardCache<T> lm;
  Matrix<T> readout_hidden;  // M x E
};

/// f(meta_flat, c): the generated M x D prefix for context tokens `c`.
template <typename T>
Matrix<T> stance_prefix_forward(const LMParams<T>& lm, const Matrix<T>& meta_flat,
                                const Matrix<T>& readout_embeddings, const Matrix<T>& readout_projection,
                                std::span<const int> c, StanceGenCache<T>& cache) {
  require(!c.empty(), "generate_stance_prefix: empty context");
  require(readout_projection.rows() == static_cast<std::size_t>(lm.config.hidden) &&
              readout_embeddings.cols() == static_cast<std::size_t>(lm.config.hidden),
          "generate_stance_prefix: readout shapes do not match LM hidden size");
  const KVPrefix<T> kv = to_kv(meta_flat, lm.config);
  const std::vector<int> ctx = tinylm::dialogue_context(c);
  tinylm::forward(lm, tinylm::ForwardInput<T>{ctx, &readout_embeddings, &kv, 0, false}, cache.lm);
  const std::size_t M = readout_embeddings.rows();
  const std::size_t E = readout_embeddings.cols();
  const std::size_t first = ctx.size();
  cache.readout_hidden.resize(M, E);
  std::copy(cache.lm.hidden.row(first), cache.lm.hidden.row(first) + M * E, cache.readout_hidden.data());
  return matmul(cache.readout_hidden, readout_projection);
}

template <typename T>
Matrix<T> generate_stance_prefix(const LMParams<T>& lm, const MetaPrefixModel<T>& meta, int idx,
                                 std::span<const int> c, StanceGenCache<T>* cache = nullptr) {
  StanceGenCache<T> local;
  return stance_prefix_forward(lm, meta.bank[idx].materialize(), meta.readout_embeddings,
                               meta.readout_projection, c, cache ? *cache : local);
}

/// Backward of generate_stance_prefix for bank entry `idx`; accumulates into
/// `grad` (structured like the model). The backbone receives no gradient.
template <typename T>
void generate_stance_prefix_backward(const LMParams<T>& lm, const MetaPrefixModel<T>& meta, int idx,
                                     const StanceGenCache<T>& cache, const Matrix<T>& dout,
                                     MetaPrefixModel<T>& grad) {
  const std::size_t M = meta.readout_embeddings.rows();
  const std::size_t E = meta.readout_embeddings.cols();
  const std::size_t D = meta.readout_projection.cols();
  require(dout.rows() == M && dout.cols() == D, "generate_stance_prefix_backward: dout shape mismatch");
  kernels::gemm_at_acc(cache.readout_hidden.data(), dout.data(), grad.readout_projection.data(), M, E, D);
  const std::size_t n = static_cast<std::size_t>(cache.lm.n_rows);
  Matrix<T> dhidden(n, E);
  kernels::gemm_bt_acc(dout.data(), meta.readout_projection.data(), dhidden.row(n - M), M, D, E);
  auto dpast = KVPrefix<T>::zeros(lm.config.n_layers, static_cast<int>(M), lm.config.hidden);
  tinylm::GradSink<T> sink{nullptr, &dpast, &grad.readout_embeddings};
  tinylm::backward(lm, cache.lm, static_cast<const Matrix<T>*>(nullptr), &dhidden, sink);
  meta.bank[idx].backward(flatten(dpast), grad.bank[idx]);
}

}  // namespace ctxdetox::prefix
