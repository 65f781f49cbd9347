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

// Pre-LayerNorm decoder-only transformer with key/value prefix injection.
//
// Forward runs over a row sequence made of token rows followed by optional
// "tail" rows whose input embeddings are supplied by the caller. A KV past
// (a prefix, or a decoding cache) is prepended to every layer's attention
// keys/values; it consumes no position embedding. Backward is hand-written
// and produces gradients for the parameters (optional), the past slots and
// the tail embeddings.

#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ctxdetox/core/tensor.hpp"
#include "ctxdetox/tinylm/kv_prefix.hpp"
#include "ctxdetox/tinylm/params.hpp"

namespace ctxdetox::tinylm {

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct ForwardInput {
  std::span<const int> tokens;
  const Matrix<T>* tail = nullptr;
  const KVPrefix<T>* past = nullptr;
  int position_offset = 0;
  bool logits = true;
};

template <typename T>
struct LayerCache {
  Matrix<T> xhat1, a1;
  std::vector<T> rstd1;
  Matrix<T> q, kfull, vfull;  // kfull/vfull: (past + n) x E
  std::vector<T> probs;       // heads x n x span, row i valid up to past + i + 1
  Matrix<T> ctx;
  Matrix<T> xhat2, a2;
  std::vector<T> rstd2;
  Matrix<T> h_pre, h_act;
};

/// Activations kept for the backward pass; reusable as a workspace.
template <typename T>
struct ForwardCache {
  std::vector<int> tokens;
  int n_rows = 0;
  int n_tail = 0;
  int n_past = 0;
  int position_offset = 0;
  std::vector<LayerCache<T>> layers;
  Matrix<T> x;  // residual stream (scratch)
  Matrix<T> xhat_f;
  std::vector<T> rstd_f;
  Matrix<T> hidden;  // final LayerNorm output, n x E
  Matrix<T> logits;  // n x V when requested
  bool has_logits = false;

  int span() const { return n_past + n_rows; }

  /// Attention weights of query row i in (layer, head); length n_past + i + 1.
  std::span<const T> attention_row(int layer, int head, int i) const {
    const std::size_t S = static_cast<std::size_t>(span());
    const std::size_t n = static_cast<std::size_t>(n_rows);
    const auto& pr = layers[static_cast<std::size_t>(layer)].probs;
    return {pr.data() + (static_cast<std::size_t>(head) * n + static_cast<std::size_t>(i)) * S,
            static_cast<std::size_t>(n_past + i + 1)};
  }
};

/// Where backward accumulates. Null members are skipped.
template <typename T>
struct GradSink {
  std::vector<T>* params = nullptr;
  KVPrefix<T>* past = nullptr;
  Matrix<T>* tail = nullptr;
};

namespace detail {

template <typename T>
void layer_norm(const T* x, const T* g, const T* b, T* xhat, T* y, T* rstd, std::size_t n,
                std::size_t E) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* xi = x + i * E;
    T mean = 0;
    for (std::size_t e = 0; e < E; ++e) mean += xi[e];
    mean /= static_cast<T>(E);
    T var = 0;
    for (std::size_t e = 0; e < E; ++e) var += (xi[e] - mean) * (xi[e] - mean);
    var /= static_cast<T>(E);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[i] = rs;
    for (std::size_t e = 0; e < E; ++e) {
      const T h = (xi[e] - mean) * rs;
      xhat[i * E + e] = h;
      y[i * E + e] = h * g[e] + b[e];
    }
  }
}

// dx += LN'(dy); dg/db accumulate when non-null.
template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, const T* g, T* dx, T* dg, T* db,
                         std::size_t n, std::size_t E) {
  std::vector<T> dxhat(E);
  for (std::size_t i = 0; i < n; ++i) {
    const T* dyi = dy + i * E;
    const T* hi = xhat + i * E;
    T m1 = 0, m2 = 0;
    for (std::size_t e = 0; e < E; ++e) {
      dxhat[e] = dyi[e] * g[e];
      m1 += dxhat[e];
      m2 += dxhat[e] * hi[e];
      if (dg) dg[e] += dyi[e] * hi[e];
      if (db) db[e] += dyi[e];
    }
    m1 /= static_cast<T>(E);
    m2 /= static_cast<T>(E);
    for (std::size_t e = 0; e < E; ++e) dx[i * E + e] += rstd[i] * (dxhat[e] - m1 - hi[e] * m2);
  }
}

}  // namespace detail

template <typename T>
void forward(const LMParams<T>& p, const ForwardInput<T>& in, ForwardCache<T>& c) {
  const LMConfig& cfg = p.config;
  const std::size_t E = static_cast<std::size_t>(cfg.hidden);
  const std::size_t V = static_cast<std::size_t>(cfg.vocab);
  const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  const std::size_t F = static_cast<std::size_t>(cfg.ffn());
  const int n_tok = static_cast<int>(in.tokens.size());
  const int n_tail = in.tail ? static_cast<int>(in.tail->rows()) : 0;
  const int n_past = in.past ? in.past->length() : 0;
  const int n_rows = n_tok + n_tail;
  require(n_rows > 0, "forward: empty input");
  if (in.tail) require(in.tail->cols() == E, "forward: tail embedding width mismatch");
  if (in.past) in.past->check_against(cfg);
  require(in.position_offset >= 0 && in.position_offset + n_rows <= cfg.max_seq,
          "forward: sequence overflow (positions ", in.position_offset, "+", n_rows, " > max_seq ",
          cfg.max_seq, ")");
  require(n_past + n_rows <= cfg.max_seq, "forward: sequence overflow (", n_rows, " rows + ", n_past,
          " prefix slots > max_seq ", cfg.max_seq, ")");
  for (int t : in.tokens)
    require(t >= 0 && t < cfg.vocab, "forward: token id ", t, " out of range [0,", cfg.vocab, ")");

  c.tokens.assign(in.tokens.begin(), in.tokens.end());
  c.n_rows = n_rows;
  c.n_tail = n_tail;
  c.n_past = n_past;
  c.position_offset = in.position_offset;
  const std::size_t n = static_cast<std::size_t>(n_rows);
  const std::size_t P = static_cast<std::size_t>(n_past);
  const std::size_t S = P + n;

  c.x.resize(n, E);
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = i < static_cast<std::size_t>(n_tok)
                       ? p.at(p.layout.tok_emb) + static_cast<std::size_t>(in.tokens[i]) * E
                       : in.tail->row(i - static_cast<std::size_t>(n_tok));
    const T* pos = p.at(p.layout.pos_emb) + (static_cast<std::size_t>(in.position_offset) + i) * E;
    T* dst = c.x.row(i);
    for (std::size_t e = 0; e < E; ++e) dst[e] = src[e] + pos[e];
  }

  c.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t l = 0; l < static_cast<std::size_t>(cfg.n_layers); ++l) {
    const LayerOffsets& o = p.layout.layers[l];
    LayerCache<T>& lc = c.layers[l];
    lc.xhat1.resize(n, E);
    lc.a1.resize(n, E);
    lc.rstd1.assign(n, T(0));
    detail::layer_norm(c.x.data(), p.at(o.ln1_g), p.at(o.ln1_b), lc.xhat1.data(), lc.a1.data(),
                       lc.rstd1.data(), n, E);

    lc.q.resize(n, E);
    lc.kfull.resize(S, E);
    lc.vfull.resize(S, E);
    if (P > 0) {
      std::copy(in.past->keys[l].data(), in.past->keys[l].data() + P * E, lc.kfull.data());
      std::copy(in.past->values[l].data(), in.past->values[l].data() + P * E, lc.vfull.data());
    }
    T* k_new = lc.kfull.row(P);
    T* v_new = lc.vfull.row(P);
    kernels::gemm_acc(lc.a1.data(), p.at(o.wq), lc.q.data(), n, E, E);
    kernels::add_bias_rows(lc.q.data(), p.at(o.bq), n, E);
    kernels::gemm_acc(lc.a1.data(), p.at(o.wk), k_new, n, E, E);
    kernels::add_bias_rows(k_new, p.at(o.bk), n, E);
    kernels::gemm_acc(lc.a1.data(), p.at(o.wv), v_new, n, E, E);
    kernels::add_bias_rows(v_new, p.at(o.bv), n, E);

    lc.probs.assign(H * n * S, T(0));
    lc.ctx.resize(n, E);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = P + i + 1;
        T* pr = lc.probs.data() + (h * n + i) * S;
        const T* qi = lc.q.row(i) + off;
        for (std::size_t j = 0; j < len; ++j) pr[j] = kernels::dot(qi, lc.kfull.row(j) + off, dh) * scale;
        kernels::softmax_inplace(pr, len);
        T* ci = lc.ctx.row(i) + off;
        for (std::size_t j = 0; j < len; ++j) kernels::axpy(pr[j], lc.vfull.row(j) + off, ci, dh);
      }
    }
    // x += ctx Wo + bo
    kernels::gemm_acc(lc.ctx.data(), p.at(o.wo), c.x.data(), n, E, E);
    kernels::add_bias_rows(c.x.data(), p.at(o.bo), n, E);

    lc.xhat2.resize(n, E);
    lc.a2.resize(n, E);
    lc.rstd2.assign(n, T(0));
    detail::layer_norm(c.x.data(), p.at(o.ln2_g), p.at(o.ln2_b), lc.xhat2.data(), lc.a2.data(),
                       lc.rstd2.data(), n, E);
    lc.h_pre.resize(n, F);
    kernels::gemm_acc(lc.a2.data(), p.at(o.w1), lc.h_pre.data(), n, E, F);
    kernels::add_bias_rows(lc.h_pre.data(), p.at(o.b1), n, F);
    lc.h_act.resize(n, F);
    for (std::size_t i = 0; i < n * F; ++i) lc.h_act.data()[i] = kernels::gelu(lc.h_pre.data()[i]);
    kernels::gemm_acc(lc.h_act.data(), p.at(o.w2), c.x.data(), n, F, E);
    kernels::add_bias_rows(c.x.data(), p.at(o.b2), n, E);
  }

  c.xhat_f.resize(n, E);
  c.hidden.resize(n, E);
  c.rstd_f.assign(n, T(0));
  detail::layer_norm(c.x.data(), p.at(p.layout.lnf_g), p.at(p.layout.lnf_b), c.xhat_f.data(),
                     c.hidden.data(), c.rstd_f.data(), n, E);
  c.has_logits = in.logits;
  if (in.logits) {
    c.logits.resize(n, V);
    kernels::gemm_acc(c.hidden.data(), p.at(p.layout.w_out), c.logits.data(), n, E, V);
    kernels::add_bias_rows(c.logits.data(), p.at(p.layout.b_out), n, V);
  }
}

/// Backpropagates dlogits (n x V) and/or dhidden (n x E, gradient w.r.t. the
/// final LayerNorm output) through the cached forward pass.
template <typename T>
void backward(const LMParams<T>& p, const ForwardCache<T>& c, const Matrix<T>* dlogits,
              const Matrix<T>* dhidden, GradSink<T>& sink) {
  const LMConfig& cfg = p.config;
  const std::size_t E = static_cast<std::size_t>(cfg.hidden);
  const std::size_t V = static_cast<std::size_t>(cfg.vocab);
  const std::size_t H = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  const std::size_t F = static_cast<std::size_t>(cfg.ffn());
  const std::size_t n = static_cast<std::size_t>(c.n_rows);
  const std::size_t P = static_cast<std::size_t>(c.n_past);
  const std::size_t S = P + n;
  const std::size_t n_tok = n - static_cast<std::size_t>(c.n_tail);
  const bool want_params = sink.params != nullptr;
  if (want_params) {
    require(!p.frozen, "backward: parameter gradients requested for a frozen backbone");
    require(sink.params->size() == p.values.size(), "backward: param grad buffer size mismatch");
  }
  if (sink.past) {
    require(sink.past->length() == c.n_past, "backward: past grad sink has wrong slot count");
  }
  if (sink.tail) require(sink.tail->rows() == static_cast<std::size_t>(c.n_tail) && sink.tail->cols() == E,
                         "backward: tail grad sink has wrong shape");
  T* gp = want_params ? sink.params->data() : nullptr;

  Matrix<T> dy(n, E);
  if (dhidden) {
    require(dhidden->rows() == n && dhidden->cols() == E, "backward: dhidden shape mismatch");
    std::copy(dhidden->data(), dhidden->data() + n * E, dy.data());
  }
  if (dlogits) {
    require(c.has_logits, "backward: forward pass did not compute logits");
    require(dlogits->rows() == n && dlogits->cols() == V, "backward: dlogits shape mismatch");
    kernels::gemm_bt_acc(dlogits->data(), p.at(p.layout.w_out), dy.data(), n, V, E);
    if (want_params) {
      kernels::gemm_at_acc(c.hidden.data(), dlogits->data(), gp + p.layout.w_out, n, E, V);
      kernels::col_sum_acc(dlogits->data(), gp + p.layout.b_out, n, V);
    }
  }
  Matrix<T> dx(n, E);
  detail::layer_norm_backward(dy.data(), c.xhat_f.data(), c.rstd_f.data(), p.at(p.layout.lnf_g),
                              dx.data(), want_params ? gp + p.layout.lnf_g : nullptr,
                              want_params ? gp + p.layout.lnf_b : nullptr, n, E);

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> dact(n, F), da(n, E), dctx(n, E), dq(n, E), dkfull(S, E), dvfull(S, E);
  std::vector<T> dprob(S);
  for (std::size_t li = static_cast<std::size_t>(cfg.n_layers); li-- > 0;) {
    const LayerOffsets& o = p.layout.layers[li];
    const LayerCache<T>& lc = c.layers[li];

    // Feed-forward block.
    dact.fill(T(0));
    kernels::gemm_bt_acc(dx.data(), p.at(o.w2), dact.data(), n, E, F);
    if (want_params) {
      kernels::gemm_at_acc(lc.h_act.data(), dx.data(), gp + o.w2, n, F, E);
      kernels::col_sum_acc(dx.data(), gp + o.b2, n, E);
    }
    for (std::size_t i = 0; i < n * F; ++i) dact.data()[i] *= kernels::gelu_grad(lc.h_pre.data()[i]);
    da.fill(T(0));
    kernels::gemm_bt_acc(dact.data(), p.at(o.w1), da.data(), n, F, E);
    if (want_params) {
      kernels::gemm_at_acc(lc.a2.data(), dact.data(), gp + o.w1, n, E, F);
      kernels::col_sum_acc(dact.data(), gp + o.b1, n, F);
    }
    detail::layer_norm_backward(da.data(), lc.xhat2.data(), lc.rstd2.data(), p.at(o.ln2_g), dx.data(),
                                want_params ? gp + o.ln2_g : nullptr,
                                want_params ? gp + o.ln2_b : nullptr, n, E);

    // Attention block.
    dctx.fill(T(0));
    kernels::gemm_bt_acc(dx.data(), p.at(o.wo), dctx.data(), n, E, E);
    if (want_params) {
      kernels::gemm_at_acc(lc.ctx.data(), dx.data(), gp + o.wo, n, E, E);
      kernels::col_sum_acc(dx.data(), gp + o.bo, n, E);
    }
    dq.fill(T(0));
    dkfull.fill(T(0));
    dvfull.fill(T(0));
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t len = P + i + 1;
        const T* pr = lc.probs.data() + (h * n + i) * S;
        const T* dci = dctx.row(i) + off;
        T dot_pd = 0;
        for (std::size_t j = 0; j < len; ++j) {
          dprob[j] = kernels::dot(dci, lc.vfull.row(j) + off, dh);
          dot_pd += pr[j] * dprob[j];
          kernels::axpy(pr[j], dci, dvfull.row(j) + off, dh);
        }
        const T* qi = lc.q.row(i) + off;
        T* dqi = dq.row(i) + off;
        for (std::size_t j = 0; j < len; ++j) {
          const T ds = pr[j] * (dprob[j] - dot_pd) * scale;
          if (ds == T(0)) continue;
          kernels::axpy(ds, lc.kfull.row(j) + off, dqi, dh);
          kernels::axpy(ds, qi, dkfull.row(j) + off, dh);
        }
      }
    }
    if (sink.past && P > 0) {
      T* pk = sink.past->keys[li].data();
      T* pv = sink.past->values[li].data();
      for (std::size_t i = 0; i < P * E; ++i) {
        pk[i] += dkfull.data()[i];
        pv[i] += dvfull.data()[i];
      }
    }
    const T* dk = dkfull.row(P);
    const T* dv = dvfull.row(P);
    da.fill(T(0));
    kernels::gemm_bt_acc(dq.data(), p.at(o.wq), da.data(), n, E, E);
    kernels::gemm_bt_acc(dk, p.at(o.wk), da.data(), n, E, E);
    kernels::gemm_bt_acc(dv, p.at(o.wv), da.data(), n, E, E);
    if (want_params) {
      kernels::gemm_at_acc(lc.a1.data(), dq.data(), gp + o.wq, n, E, E);
      kernels::col_sum_acc(dq.data(), gp + o.bq, n, E);
      kernels::gemm_at_acc(lc.a1.data(), dk, gp + o.wk, n, E, E);
      kernels::col_sum_acc(dk, gp + o.bk, n, E);
      kernels::gemm_at_acc(lc.a1.data(), dv, gp + o.wv, n, E, E);
      kernels::col_sum_acc(dv, gp + o.bv, n, E);
    }
    detail::layer_norm_backward(da.data(), lc.xhat1.data(), lc.rstd1.data(), p.at(o.ln1_g), dx.data(),
                                want_params ? gp + o.ln1_g : nullptr,
                                want_params ? gp + o.ln1_b : nullptr, n, E);
  }

  // Input embeddings.
  for (std::size_t i = 0; i < n; ++i) {
    const T* di = dx.row(i);
    if (want_params) {
      T* dpos = gp + p.layout.pos_emb + (static_cast<std::size_t>(c.position_offset) + i) * E;
      for (std::size_t e = 0; e < E; ++e) dpos[e] += di[e];
      if (i < n_tok) {
        T* dtok = gp + p.layout.tok_emb + static_cast<std::size_t>(c.tokens[i]) * E;
        for (std::size_t e = 0; e < E; ++e) dtok[e] += di[e];
      }
    }
    if (i >= n_tok && sink.tail) {
      T* dt = sink.tail->row(i - n_tok);
      for (std::size_t e = 0; e < E; ++e) dt[e] += di[e];
    }
  }
}

}  // namespace ctxdetox::tinylm
