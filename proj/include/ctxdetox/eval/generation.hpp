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

// Sampling completions for every test context under a control method.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxdetox/baselines/methods.hpp"
#include "ctxdetox/core/parallel.hpp"
#include "ctxdetox/corpus/oracles.hpp"
#include "ctxdetox/tinylm/inference.hpp"

namespace ctxdetox::eval {

using corpus::DialogueExample;
using tinylm::GenConfig;
using tinylm::LMParams;

/// What a method injects for one context. No prefix means uncontrolled.
struct ControlDecision {
  std::optional<Matrix<float>> prefix;
  std::optional<baselines::ControlRoute> route;
};

struct Controller {
  std::string method;
  std::function<ControlDecision(std::span<const int> context)> decide;

  static Controller uncontrolled() {
    return {"uncontrolled", [](std::span<const int>) { return ControlDecision{}; }};
  }

  static Controller static_prefix(std::string method, Matrix<float> p) {
    return {std::move(method), [p = std::move(p)](std::span<const int>) { return ControlDecision{p, std::nullopt}; }};
  }

  /// Generated stance prefix plus the non-offensive toxicity prefix. Only the
  /// index-0 entries are needed.
  static Controller hierarchical(std::string method, const LMParams<float>& lm,
                                 prefix::OursArtifact<float> artifact) {
    return {std::move(method), [&lm, a = std::move(artifact)](std::span<const int> c) {
              return ControlDecision{prefix::ours_control_prefix(lm, a, c), std::nullopt};
            }};
  }

  static Controller clsgen(baselines::ClsGenArtifact<float> artifact) {
    return {baselines::kMethodClsGen, [a = std::move(artifact)](std::span<const int> c) {
              auto route = a.route(c);
              auto p = a.prefix_for(route);
              return ControlDecision{std::move(p), std::move(route)};
            }};
  }
};

struct Completion {
  std::vector<int> tokens;
  std::uint64_t seed = 0;
};

struct GenerationItem {
  std::size_t example_id = 0;
  std::vector<int> context;
  int t_c = 0;
  std::optional<baselines::ControlRoute> route;
  std::vector<Completion> completions;
};

struct GenerationSet {
  std::string method;
  std::uint64_t run_seed = 0;
  std::vector<GenerationItem> items;

  std::size_t completion_count() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.completions.size();
    return n;
  }
};

/// Seed of completion k for test example `example_id`; shared by all
/// methods so their samples use common random numbers.
inline std::uint64_t completion_seed(std::uint64_t run_seed, std::size_t example_id, int k) {
  return derive_seed(run_seed, static_cast<std::uint64_t>(example_id), static_cast<std::uint64_t>(k));
}

inline GenerationSet generate_set(const LMParams<float>& lm, const Controller& ctl,
                                  std::span<const DialogueExample> test, const GenConfig& gen,
                                  std::uint64_t run_seed) {
  gen.validate();
  GenerationSet set;
  set.method = ctl.method;
  set.run_seed = run_seed;
  set.items.resize(test.size());
  parallel_for(test.size(), [&](std::size_t i) {
    auto& item = set.items[i];
    item.example_id = i;
    item.context = test[i].c;
    item.t_c = test[i].t_c;
    ControlDecision d = ctl.decide(test[i].c);
    item.route = std::move(d.route);
    std::optional<tinylm::KVPrefix<float>> kv;
    if (d.prefix) kv = prefix::to_kv(*d.prefix, lm.config);
    const auto ctx = tinylm::dialogue_context(test[i].c);
    for (int k = 0; k < gen.num_completions; ++k) {
      Completion c;
      c.seed = completion_seed(run_seed, i, k);
      c.tokens = tinylm::sample(lm, ctx, kv ? &*kv : nullptr, gen, c.seed);
      item.completions.push_back(std::move(c));
    }
  });
  return set;
}

/// Writes one JSON line per routed example.
inline void write_routing_log(const GenerationSet& set, const std::filesystem::path& path) {
  baselines::RoutingLog log(path);
  for (const auto& it : set.items) {
    require(it.route.has_value(), "write_routing_log: method '", set.method, "' does not route");
    log.record(it.example_id, *it.route, set.run_seed, it.t_c);
  }
}

}  // namespace ctxdetox::eval
