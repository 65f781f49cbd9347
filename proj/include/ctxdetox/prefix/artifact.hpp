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

// Control artifacts: containers of kind "control" whose meta records the
// method tag, prefix geometry (M, L, E, P, D) and the hash of the backbone
// the prefixes were trained against.

#pragma once

#include <filesystem>
#include <string>

#include "ctxdetox/core/container.hpp"
#include "ctxdetox/prefix/prefix.hpp"

namespace ctxdetox::prefix {

inline constexpr const char* kControlKind = "control";

template <typename T>
Container make_control(std::string method, const LMParams<T>& lm, const PrefixShape& shape) {
  Container c;
  c.kind = kControlKind;
  c.meta["method"] = std::move(method);
  c.meta["M"] = shape.slots;
  c.meta["L"] = lm.config.n_layers;
  c.meta["E"] = lm.config.hidden;
  c.meta["P"] = shape.small_dim;
  c.meta["D"] = shape.width;
  c.meta["backbone_hash"] = hex64(tinylm::backbone_hash(lm));
  return c;
}

/// Loads a control artifact and verifies method tag, geometry and backbone.
template <typename T>
Container load_control(const std::filesystem::path& path, std::string_view method, const LMParams<T>& lm) {
  Container c = read_container(path);
  require(c.kind == kControlKind, path.string(), ": not a control artifact (kind '", c.kind, "')");
  const auto& m = c.meta;
  require(m.at("method").get<std::string>() == method, path.string(), ": method tag '",
          m.at("method").get<std::string>(), "' but '", method, "' was expected");
  require(m.at("L").get<int>() == lm.config.n_layers && m.at("E").get<int>() == lm.config.hidden &&
              m.at("D").get<int>() == lm.config.prefix_dim(),
          path.string(), ": prefix geometry (L=", m.at("L").get<int>(), ", E=", m.at("E").get<int>(),
          ") does not match the backbone (L=", lm.config.n_layers, ", E=", lm.config.hidden, ")");
  require(m.at("backbone_hash").get<std::string>() == hex64(tinylm::backbone_hash(lm)), path.string(),
          ": artifact was trained against a different backbone");
  const std::size_t M = m.at("M").get<std::size_t>();
  const std::size_t D = m.at("D").get<std::size_t>();
  for (const auto& t : c.tensors)
    if (t.name.rfind("prefix.", 0) == 0)
      require(t.rows == M && t.cols == D, path.string(), ": tensor '", t.name, "' is not ", M, "x", D);
  return c;
}

inline PrefixShape shape_of(const Container& c) {
  return {c.meta.at("M").get<int>(), c.meta.at("P").get<int>(), c.meta.at("D").get<int>()};
}

/// Everything generation with the hierarchical method needs.
template <typename T>
struct OursArtifact {
  Matrix<T> h_alpha0;            // materialized meta prefix, index 0
  Matrix<T> h_beta0;             // materialized toxicity prefix, index 0
  Matrix<T> readout_embeddings;  // M x E
  Matrix<T> readout_projection;  // E x D

  static OursArtifact from(const MetaPrefixModel<T>& meta, const PrefixBank<T>& tox) {
    return {meta.bank[0].materialize(), tox[0].materialize(), meta.readout_embeddings, meta.readout_projection};
  }

  std::size_t persisted_values() const {
    return h_alpha0.size() + h_beta0.size() + readout_embeddings.size() + readout_projection.size();
  }
};

inline constexpr const char* kMethodOurs = "ours";

template <typename T>
Container to_container(const OursArtifact<T>& a, const LMParams<T>& lm, const PrefixShape& shape,
                       std::string method = kMethodOurs) {
  Container c = make_control(std::move(method), lm, shape);
  c.add("prefix.h_alpha0", a.h_alpha0);
  c.add("prefix.h_beta0", a.h_beta0);
  c.add("readout_embeddings", a.readout_embeddings);
  c.add("readout_projection", a.readout_projection);
  return c;
}

template <typename T>
OursArtifact<T> ours_from_container(const Container& c) {
  return {c.matrix<T>("prefix.h_alpha0"), c.matrix<T>("prefix.h_beta0"), c.matrix<T>("readout_embeddings"),
          c.matrix<T>("readout_projection")};
}

/// The prefix injected when generating with the hierarchical method:
/// f(h_alpha^0, c) + h_beta^0.
template <typename T>
Matrix<T> ours_control_prefix(const LMParams<T>& lm, const OursArtifact<T>& a, std::span<const int> c) {
  StanceGenCache<T> cache;
  return combine(stance_prefix_forward(lm, a.h_alpha0, a.readout_embeddings, a.readout_projection, c, cache),
                 a.h_beta0);
}

}  // namespace ctxdetox::prefix
