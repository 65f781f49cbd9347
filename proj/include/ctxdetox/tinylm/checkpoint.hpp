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

// LM checkpoints: one container tensor per named parameter block, in
// ParamLayout order (row-major, embeddings, layers 0..L-1, output head).

#pragma once

#include <filesystem>

#include "ctxdetox/core/container.hpp"
#include "ctxdetox/tinylm/params.hpp"

namespace ctxdetox::tinylm {

inline constexpr const char* kCheckpointKind = "lm_checkpoint";

inline nlohmann::ordered_json config_to_json(const LMConfig& c) {
  return {{"n_layers", c.n_layers}, {"hidden", c.hidden},   {"n_heads", c.n_heads},
          {"vocab", c.vocab},       {"max_seq", c.max_seq}, {"ffn_mult", c.ffn_mult},
          {"init_std", c.init_std}, {"seed", c.seed}};
}

inline LMConfig config_from_json(const nlohmann::ordered_json& j) {
  LMConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.max_seq = j.at("max_seq").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.init_std = j.at("init_std").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

template <typename T>
void save_lm(const LMParams<T>& p, const std::filesystem::path& path,
             nlohmann::ordered_json extra = nlohmann::ordered_json::object()) {
  Container c;
  c.kind = kCheckpointKind;
  c.meta["config"] = config_to_json(p.config);
  c.meta["backbone_hash"] = hex64(backbone_hash(p.template cast<float>()));
  for (auto& [k, v] : extra.items()) c.meta[k] = v;
  for (const auto& e : p.layout.entries) {
    NamedTensor t{e.name, e.rows, e.cols, {}};
    t.values.assign(p.values.begin() + static_cast<std::ptrdiff_t>(e.offset),
                    p.values.begin() + static_cast<std::ptrdiff_t>(e.offset + e.rows * e.cols));
    c.tensors.push_back(std::move(t));
  }
  write_container(c, path);
}

/// Loads and verifies a checkpoint. The result is marked frozen.
inline LMParams<float> load_lm(const std::filesystem::path& path) {
  const Container c = read_container(path);
  require(c.kind == kCheckpointKind, path.string(), ": expected an LM checkpoint, found '", c.kind, "'");
  LMParams<float> p;
  p.config = config_from_json(c.meta.at("config"));
  p.layout = ParamLayout::build(p.config);
  p.values.assign(p.layout.total, 0.0f);
  require(c.tensors.size() == p.layout.entries.size(), path.string(), ": tensor count mismatch");
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    const auto& e = p.layout.entries[i];
    const auto& t = c.tensors[i];
    require(t.name == e.name && t.rows == e.rows && t.cols == e.cols, path.string(),
            ": tensor '", t.name, "' does not match layout entry '", e.name, "'");
    std::copy(t.values.begin(), t.values.end(), p.values.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
  if (c.meta.contains("backbone_hash")) {
    require(c.meta.at("backbone_hash").get<std::string>() == hex64(backbone_hash(p)), path.string(),
            ": backbone hash mismatch");
  }
  p.frozen = true;
  return p;
}

}  // namespace ctxdetox::tinylm
