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

#include <vector>

#include "ctxdetox/core/tensor.hpp"
#include "ctxdetox/tinylm/params.hpp"

namespace ctxdetox::tinylm {

/// Per-layer key/value slots that every attention layer sees before
/// position 0. Each block is (slots x hidden).
template <typename T>
struct KVPrefix {
  std::vector<Matrix<T>> keys;
  std::vector<Matrix<T>> values;

  static KVPrefix zeros(int n_layers, int slots, int hidden) {
    KVPrefix p;
    for (int l = 0; l < n_layers; ++l) {
      p.keys.emplace_back(static_cast<std::size_t>(slots), static_cast<std::size_t>(hidden));
      p.values.emplace_back(static_cast<std::size_t>(slots), static_cast<std::size_t>(hidden));
    }
    return p;
  }

  int n_layers() const { return static_cast<int>(keys.size()); }
  int length() const { return keys.empty() ? 0 : static_cast<int>(keys[0].rows()); }
  int hidden() const { return keys.empty() ? 0 : static_cast<int>(keys[0].cols()); }

  void check_against(const LMConfig& c) const {
    require(n_layers() == c.n_layers, "KV prefix has ", n_layers(), " layers, model has ",
            c.n_layers);
    for (int l = 0; l < n_layers(); ++l) {
      require(keys[static_cast<std::size_t>(l)].cols() == static_cast<std::size_t>(c.hidden) &&
                  values[static_cast<std::size_t>(l)].cols() == static_cast<std::size_t>(c.hidden),
              "KV prefix width mismatch at layer ", l);
      require(keys[static_cast<std::size_t>(l)].rows() == values[static_cast<std::size_t>(l)].rows() &&
                  static_cast<int>(keys[static_cast<std::size_t>(l)].rows()) == length(),
              "KV prefix slot count inconsistent at layer ", l);
    }
  }

  /// Appends `other`'s slots after this prefix's slots, layer by layer.
  KVPrefix concat(const KVPrefix& other) const {
    if (length() == 0) return other;
    if (other.length() == 0) return *this;
    require(n_layers() == other.n_layers() && hidden() == other.hidden(),
            "cannot concatenate KV prefixes of different geometry");
    KVPrefix out;
    const std::size_t E = static_cast<std::size_t>(hidden());
    for (std::size_t l = 0; l < keys.size(); ++l) {
      const std::size_t a = keys[l].rows(), b = other.keys[l].rows();
      Matrix<T> k(a + b, E), v(a + b, E);
      std::copy(keys[l].data(), keys[l].data() + a * E, k.data());
      std::copy(other.keys[l].data(), other.keys[l].data() + b * E, k.data() + a * E);
      std::copy(values[l].data(), values[l].data() + a * E, v.data());
      std::copy(other.values[l].data(), other.values[l].data() + b * E, v.data() + a * E);
      out.keys.push_back(std::move(k));
      out.values.push_back(std::move(v));
    }
    return out;
  }
};

/// Flat M x D view <-> structured KV prefix, D = 2 * L * E.
///
/// Layout of one slot's D-vector: layer-major, key before value, i.e.
///   flat[m, l*2E + e]     = keys[l][m, e]
///   flat[m, l*2E + E + e] = values[l][m, e]
template <typename T>
KVPrefix<T> to_kv(const Matrix<T>& flat, const LMConfig& c) {
  const std::size_t D = static_cast<std::size_t>(c.prefix_dim());
  require(flat.cols() == D, "to_kv: flat prefix width ", flat.cols(), " != 2*L*E = ", D);
  const std::size_t E = static_cast<std::size_t>(c.hidden);
  const std::size_t M = flat.rows();
  KVPrefix<T> kv = KVPrefix<T>::zeros(c.n_layers, static_cast<int>(M), c.hidden);
  for (std::size_t m = 0; m < M; ++m) {
    const T* src = flat.row(m);
    for (std::size_t l = 0; l < static_cast<std::size_t>(c.n_layers); ++l) {
      std::copy(src + l * 2 * E, src + l * 2 * E + E, kv.keys[l].row(m));
      std::copy(src + l * 2 * E + E, src + (l + 1) * 2 * E, kv.values[l].row(m));
    }
  }
  return kv;
}

template <typename T>
Matrix<T> flatten(const KVPrefix<T>& kv) {
  const std::size_t L = static_cast<std::size_t>(kv.n_layers());
  const std::size_t E = static_cast<std::size_t>(kv.hidden());
  const std::size_t M = static_cast<std::size_t>(kv.length());
  Matrix<T> flat(M, 2 * L * E);
  for (std::size_t m = 0; m < M; ++m) {
    T* dst = flat.row(m);
    for (std::size_t l = 0; l < L; ++l) {
      std::copy(kv.keys[l].row(m), kv.keys[l].row(m) + E, dst + l * 2 * E);
      std::copy(kv.values[l].row(m), kv.values[l].row(m) + E, dst + l * 2 * E + E);
    }
  }
  return flat;
}

}  // namespace ctxdetox::tinylm
