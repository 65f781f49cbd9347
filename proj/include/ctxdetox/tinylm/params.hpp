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

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctxdetox/core/common.hpp"
#include "ctxdetox/core/tensor.hpp"

namespace ctxdetox::tinylm {

struct LMConfig {
  int n_layers = 2;
  int hidden = 64;
  int n_heads = 4;
  int vocab = 0;
  int max_seq = 40;
  int ffn_mult = 4;
  double init_std = 0.02;
  std::uint64_t seed = 42;

  int head_dim() const { return hidden / n_heads; }
  int ffn() const { return ffn_mult * hidden; }
  /// Width of one flattened prefix slot: a key and a value vector per layer.
  int prefix_dim() const { return 2 * n_layers * hidden; }

  void validate() const {
    require(n_layers > 0 && hidden > 0 && n_heads > 0 && vocab > 0 && max_seq > 0 && ffn_mult > 0,
            "LMConfig: dimensions must be positive");
    require(hidden % n_heads == 0, "LMConfig: hidden (", hidden, ") not divisible by n_heads (",
            n_heads, ")");
  }

  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

struct LayerOffsets {
  std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct TensorEntry {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::size_t offset;
};

/// Positions of every named tensor inside the flat parameter buffer.
/// Order: embeddings, then layers 0..L-1, then the output head.
struct ParamLayout {
  std::size_t tok_emb = 0, pos_emb = 0, lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
  std::vector<LayerOffsets> layers;
  std::vector<TensorEntry> entries;
  std::size_t total = 0;

  static ParamLayout build(const LMConfig& c) {
    ParamLayout l;
    const std::size_t E = static_cast<std::size_t>(c.hidden);
    const std::size_t V = static_cast<std::size_t>(c.vocab);
    const std::size_t S = static_cast<std::size_t>(c.max_seq);
    const std::size_t F = static_cast<std::size_t>(c.ffn());
    auto add = [&](const std::string& name, std::size_t r, std::size_t cc) {
      const std::size_t off = l.total;
      l.entries.push_back({name, r, cc, off});
      l.total += r * cc;
      return off;
    };
    l.tok_emb = add("tok_emb", V, E);
    l.pos_emb = add("pos_emb", S, E);
    for (int i = 0; i < c.n_layers; ++i) {
      const std::string p = str_cat("layer", i, ".");
      LayerOffsets o{};
      o.ln1_g = add(p + "ln1_g", 1, E);
      o.ln1_b = add(p + "ln1_b", 1, E);
      o.wq = add(p + "wq", E, E);
      o.bq = add(p + "bq", 1, E);
      o.wk = add(p + "wk", E, E);
      o.bk = add(p + "bk", 1, E);
      o.wv = add(p + "wv", E, E);
      o.bv = add(p + "bv", 1, E);
      o.wo = add(p + "wo", E, E);
      o.bo = add(p + "bo", 1, E);
      o.ln2_g = add(p + "ln2_g", 1, E);
      o.ln2_b = add(p + "ln2_b", 1, E);
      o.w1 = add(p + "w1", E, F);
      o.b1 = add(p + "b1", 1, F);
      o.w2 = add(p + "w2", F, E);
      o.b2 = add(p + "b2", 1, E);
      l.layers.push_back(o);
    }
    l.lnf_g = add("lnf_g", 1, E);
    l.lnf_b = add("lnf_b", 1, E);
    l.w_out = add("w_out", E, V);
    l.b_out = add("b_out", 1, V);
    return l;
  }
};

/// Backbone weights: one flat buffer plus the layout describing it.
template <typename T>
struct LMParams {
  LMConfig config;
  ParamLayout layout;
  std::vector<T> values;
  bool frozen = false;

  const T* at(std::size_t offset) const { return values.data() + offset; }
  T* at(std::size_t offset) { return values.data() + offset; }
  std::size_t count() const { return values.size(); }

  template <typename U>
  LMParams<U> cast() const {
    LMParams<U> out;
    out.config = config;
    out.layout = layout;
    out.frozen = frozen;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

/// Closed-form parameter count, kept separate from the layout builder.
inline std::size_t parameter_count(const LMConfig& c) {
  const std::size_t E = static_cast<std::size_t>(c.hidden);
  const std::size_t V = static_cast<std::size_t>(c.vocab);
  const std::size_t S = static_cast<std::size_t>(c.max_seq);
  const std::size_t F = static_cast<std::size_t>(c.ffn());
  const std::size_t per_layer = 4 * E * E + 4 * E + 4 * E + 2 * E * F + F + E;
  return V * E + S * E + static_cast<std::size_t>(c.n_layers) * per_layer + 2 * E + E * V + V;
}

template <typename T = float>
LMParams<T> init_lm(const LMConfig& config) {
  config.validate();
  LMParams<T> p;
  p.config = config;
  p.layout = ParamLayout::build(config);
  p.values.assign(p.layout.total, T(0));
  std::mt19937_64 rng(config.seed);
  const double std0 = config.init_std;
  const double resid = std0 / std::sqrt(2.0 * config.n_layers);
  auto normal = [&](std::size_t off, std::size_t n, double s) {
    fill_normal(std::span<T>(p.values.data() + off, n), rng, s);
  };
  auto ones = [&](std::size_t off, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p.values[off + i] = T(1);
  };
  const std::size_t E = static_cast<std::size_t>(config.hidden);
  const std::size_t F = static_cast<std::size_t>(config.ffn());
  const std::size_t V = static_cast<std::size_t>(config.vocab);
  normal(p.layout.tok_emb, V * E, std0);
  normal(p.layout.pos_emb, static_cast<std::size_t>(config.max_seq) * E, std0);
  for (const auto& o : p.layout.layers) {
    ones(o.ln1_g, E);
    normal(o.wq, E * E, std0);
    normal(o.wk, E * E, std0);
    normal(o.wv, E * E, std0);
    normal(o.wo, E * E, resid);
    ones(o.ln2_g, E);
    normal(o.w1, E * F, std0);
    normal(o.w2, F * E, resid);
  }
  ones(p.layout.lnf_g, E);
  normal(p.layout.w_out, E * V, std0);
  return p;
}

/// Content hash of a backbone: config plus raw parameter bytes.
template <typename T>
std::uint64_t backbone_hash(const LMParams<T>& p) {
  Fnv1a64 h;
  const LMConfig& c = p.config;
  const std::int64_t dims[] = {c.n_layers, c.hidden, c.n_heads, c.vocab, c.max_seq, c.ffn_mult};
  h.update(dims, sizeof dims);
  h.update(std::span<const T>(p.values));
  return h.digest();
}

}  // namespace ctxdetox::tinylm
