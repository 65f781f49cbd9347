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

// Comparison methods sharing the frozen backbone: prefix-tuning on safe
// examples, contrastive safe/unsafe prefixes, and classify-then-generate.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxdetox/baselines/classifier.hpp"
#include "ctxdetox/prefix/artifact.hpp"
#include "ctxdetox/tinylm/inference.hpp"
#include "ctxdetox/training/hierarchical.hpp"
#include "ctxdetox/training/supervised.hpp"

namespace ctxdetox::baselines {

using prefix::PrefixBank;
using prefix::PrefixShape;
using tinylm::LMParams;
using training::CategorizedExample;
using training::SupervisedConfig;
using training::SupervisedStep;

inline constexpr const char* kMethodPrefixTuning = "prefix_tuning";
inline constexpr const char* kMethodContrastive = "contrastive";
inline constexpr const char* kMethodClsGen = "clsgen";

/// Safe = inoffensive response whose stance meets the requirement.
inline bool is_safe(const DialogueExample& ex) { return ex.t_r == 0 && training::meta_index(ex) == 0; }

inline std::vector<const DialogueExample*> prefix_tuning_filter(std::span<const DialogueExample> split) {
  std::vector<const DialogueExample*> out;
  for (const auto& ex : split)
    if (is_safe(ex)) out.push_back(&ex);
  return out;
}

template <typename T>
prefix::ReparamPrefix<T> train_prefix_tuning(const LMParams<T>& lm, std::span<const DialogueExample> split,
                                             const SupervisedConfig& cfg,
                                             std::vector<SupervisedStep>* trace = nullptr) {
  const auto kept = prefix_tuning_filter(split);
  require(!kept.empty(), "train_prefix_tuning: no safe examples left after filtering");
  return training::train_single_prefix<T>(lm, kept, cfg, trace);
}

/// Bank with index 0 = safe, 1 = unsafe.
template <typename T>
PrefixBank<T> train_contrastive_prefixes(const LMParams<T>& lm, std::span<const DialogueExample> split,
                                         const SupervisedConfig& cfg, std::vector<SupervisedStep>* trace = nullptr) {
  std::vector<CategorizedExample> data;
  for (const auto& ex : split) data.push_back({&ex, is_safe(ex) ? 0 : 1});
  return training::train_prefix_bank<T>(lm, data, cfg, trace);
}

/// Bank with index 0 = non-supportive, 1 = supportive; trained on offensive
/// contexts only.
template <typename T>
PrefixBank<T> train_stance_bank(const LMParams<T>& lm, std::span<const DialogueExample> split,
                                const SupervisedConfig& cfg, std::vector<SupervisedStep>* trace = nullptr) {
  std::vector<CategorizedExample> data;
  for (const auto& ex : split) {
    if (ex.t_c != 1) continue;
    require(ex.s_r.has_value(), "train_stance_bank: neutral-stance example in the prefix split");
    data.push_back({&ex, *ex.s_r});
  }
  return training::train_prefix_bank<T>(lm, data, cfg, trace);
}

/// Stacks prefixes along the slot axis.
template <typename T>
Matrix<T> stack_prefixes(std::span<const Matrix<T>* const> parts) {
  require(!parts.empty(), "stack_prefixes: nothing to stack");
  std::size_t rows = 0;
  const std::size_t cols = parts[0]->cols();
  for (const auto* p : parts) {
    require(p->cols() == cols, "stack_prefixes: width mismatch");
    rows += p->rows();
  }
  Matrix<T> out(rows, cols);
  std::size_t r = 0;
  for (const auto* p : parts) {
    std::copy(p->data(), p->data() + p->size(), out.row(r));
    r += p->rows();
  }
  return out;
}

inline constexpr const char* kToxicityPrefixId = "toxicity0";
inline constexpr const char* kStancePrefixId = "stance0";

struct ControlRoute {
  int verdict = 0;
  std::vector<std::string> prefixes_applied;
};

struct ClsGenConfig {
  bool toxicity_first = true;
};

template <typename T>
struct ClsGenArtifact {
  OffenseClassifier classifier;
  Matrix<T> toxicity0;  // M x D
  Matrix<T> stance0;    // M x D
  bool toxicity_first = true;

  ControlRoute route(std::span<const int> c) const {
    ControlRoute r;
    r.verdict = classifier.verdict(c);
    if (r.verdict == 1) {
      r.prefixes_applied = toxicity_first ? std::vector<std::string>{kToxicityPrefixId, kStancePrefixId}
                                          : std::vector<std::string>{kStancePrefixId, kToxicityPrefixId};
    } else {
      r.prefixes_applied = {kToxicityPrefixId};
    }
    return r;
  }

  Matrix<T> prefix_for(const ControlRoute& r) const {
    std::vector<const Matrix<T>*> parts;
    for (const auto& id : r.prefixes_applied) parts.push_back(id == kToxicityPrefixId ? &toxicity0 : &stance0);
    return stack_prefixes<T>(parts);
  }
};

/// Classify the context, then sample under the routed prefix.
template <typename T>
std::pair<std::vector<int>, ControlRoute> clsgen_generate(const LMParams<T>& lm, const ClsGenArtifact<T>& a,
                                                          std::span<const int> c, const tinylm::GenConfig& gen,
                                                          std::uint64_t seed) {
  ControlRoute r = a.route(c);
  const auto kv = prefix::to_kv(a.prefix_for(r), lm.config);
  return {tinylm::sample(lm, tinylm::dialogue_context(c), &kv, gen, seed), std::move(r)};
}

// ---- persistence ----

template <typename T>
Container prefix_tuning_container(const LMParams<T>& lm, const prefix::ReparamPrefix<T>& p, const PrefixShape& s) {
  Container c = prefix::make_control(kMethodPrefixTuning, lm, s);
  c.add("prefix.p0", p.materialize());
  return c;
}

template <typename T>
Container contrastive_container(const LMParams<T>& lm, const PrefixBank<T>& bank, const PrefixShape& s) {
  Container c = prefix::make_control(kMethodContrastive, lm, s);
  c.add("prefix.safe", bank[0].materialize());
  c.add("prefix.unsafe", bank[1].materialize());
  return c;
}

/// Besides the generation-time tensors, the toxicity bank factors are kept so
/// the hierarchical method can start from them.
template <typename T>
Container clsgen_container(const LMParams<T>& lm, const OffenseClassifier& k, const PrefixBank<T>& tox,
                           const PrefixBank<T>& stance, const PrefixShape& s, const ClsGenConfig& cfg) {
  Container c = prefix::make_control(kMethodClsGen, lm, s);
  c.add("prefix.toxicity0", tox[0].materialize());
  c.add("prefix.stance0", stance[0].materialize());
  for (int i = 0; i < 2; ++i) {
    c.add("toxicity_bank." + std::to_string(i) + ".h_small", tox[i].h_small);
    c.add("toxicity_bank." + std::to_string(i) + ".w", tox[i].w);
  }
  k.save_into(c);
  c.meta["toxicity_first"] = cfg.toxicity_first;
  return c;
}

template <typename T>
PrefixBank<T> toxicity_bank_from(const Container& c) {
  PrefixBank<T> b;
  for (int i = 0; i < 2; ++i) {
    b[i].h_small = c.matrix<T>("toxicity_bank." + std::to_string(i) + ".h_small");
    b[i].w = c.matrix<T>("toxicity_bank." + std::to_string(i) + ".w");
  }
  return b;
}

template <typename T>
ClsGenArtifact<T> clsgen_from(const Container& c) {
  return {OffenseClassifier::load_from(c), c.matrix<T>("prefix.toxicity0"), c.matrix<T>("prefix.stance0"),
          c.meta.at("toxicity_first").get<bool>()};
}

/// JSON-lines log of routing decisions; `t_c` is the oracle label so routing
/// errors can be counted.
class RoutingLog {
 public:
  explicit RoutingLog(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    require(out_.good(), "cannot write routing log ", path.string());
  }

  void record(std::size_t example_id, const ControlRoute& r, std::uint64_t seed, int t_c) {
    nlohmann::ordered_json j;
    j["example_id"] = example_id;
    j["verdict"] = r.verdict;
    j["prefixes_applied"] = r.prefixes_applied;
    j["seed"] = seed;
    j["t_c"] = t_c;
    j["routing_error"] = r.verdict != t_c;
    out_ << j.dump() << '\n';
    errors_ += r.verdict != t_c;
    ++count_;
  }

  std::size_t errors() const { return errors_; }
  std::size_t count() const { return count_; }

 private:
  std::ofstream out_;
  std::size_t errors_ = 0;
  std::size_t count_ = 0;
};

}  // namespace ctxdetox::baselines
