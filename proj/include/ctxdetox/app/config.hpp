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

// Run configuration and its key = value file format.
//
// One setting per line, `section.key = value`; `#` starts a comment.
// Lists are comma separated. Unknown keys are errors. Every key has a
// default, and `describe()` lists them all.

#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxdetox/baselines/classifier.hpp"
#include "ctxdetox/baselines/methods.hpp"
#include "ctxdetox/corpus/generate.hpp"
#include "ctxdetox/tinylm/inference.hpp"
#include "ctxdetox/tinylm/params.hpp"
#include "ctxdetox/tinylm/train.hpp"
#include "ctxdetox/training/hierarchical.hpp"
#include "ctxdetox/training/supervised.hpp"

namespace ctxdetox::app {

using ojson = nlohmann::ordered_json;

inline const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> m = {"uncontrolled", "ours",       "prefix_tuning", "contrastive",
                                             "clsgen",       "ours_no_Ls", "ours_no_Lc",    "ours_no_both"};
  return m;
}

struct RunConfig {
  std::uint64_t seed = 42;
  corpus::CorpusConfig corpus;
  tinylm::LMConfig lm;
  tinylm::LMTrainConfig base{2000, 16, 3e-3, 0.01, 1.0, 42};
  int reference_width_mult = 2;
  tinylm::LMTrainConfig reference{2000, 16, 2e-3, 0.01, 1.0, 42};
  int slots = 5;
  int small_dim = 64;
  training::TrainConfig ours;
  std::string stance_reduction = "batch_mean";
  training::LossWeights loss;
  training::SupervisedConfig supervised;
  baselines::ClassifierConfig classifier;
  bool toxicity_first = true;
  tinylm::GenConfig gen;
  std::vector<std::string> methods = all_methods();

  RunConfig() { lm.vocab = 0; }  // vocab comes from the corpus

  /// Propagates the run seed and shared prefix geometry into sub-configs.
  void resolve() {
    corpus.seed = seed;
    lm.seed = seed;
    base.seed = derive_seed(seed, 0x42415345u);
    reference.seed = derive_seed(seed, 0x52454655u);
    ours.seed = seed;
    ours.slots = slots;
    ours.small_dim = small_dim;
    ours.stance_reduction = stance_reduction == "offensive_mean" ? training::StanceReduction::kOffensiveMean
                                                                  : training::StanceReduction::kBatchMean;
    supervised.seed = seed;
    supervised.slots = slots;
    supervised.small_dim = small_dim;
    classifier.seed = seed;
  }

  void validate() const {
    corpus.validate();
    require(stance_reduction == "batch_mean" || stance_reduction == "offensive_mean",
            "ours.stance_reduction must be batch_mean or offensive_mean");
    require(reference_width_mult >= 1, "reference.width_mult must be at least 1");
    require(lm.hidden % lm.n_heads == 0, "lm.hidden must be divisible by lm.heads");
    ours.validate();
    loss.validate();
    supervised.validate();
    gen.validate();
    require(!methods.empty(), "eval.methods is empty");
    for (const auto& m : methods)
      require(std::find(all_methods().begin(), all_methods().end(), m) != all_methods().end(),
              "eval.methods: unknown method '", m, "'");
  }

  tinylm::LMConfig reference_lm() const {
    tinylm::LMConfig r = lm;
    r.hidden = lm.hidden * reference_width_mult;
    r.seed = derive_seed(seed, 0x5245464cu);
    return r;
  }
};

namespace detail {

template <typename T>
T parse_number(std::string_view key, std::string_view s) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  require(ec == std::errc() && p == end, "config key '", key, "': cannot parse '", s, "'");
  return v;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  while (true) {
    const auto comma = s.find(',');
    out.emplace_back(trim(s.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

}  // namespace detail

/// A named setting bound to a field of RunConfig.
struct Setting {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<ojson(const RunConfig&)> get;
};

namespace detail {

template <typename F>
Setting bind(std::string key, std::string help, F field) {
  using Ref = decltype(field(std::declval<RunConfig&>()));
  using T = std::remove_cvref_t<Ref>;
  Setting s;
  s.key = key;
  s.help = std::move(help);
  s.get = [field](const RunConfig& c) { return ojson(field(const_cast<RunConfig&>(c))); };
  s.set = [field, key](RunConfig& c, std::string_view v) {
    T& dst = field(c);
    if constexpr (std::is_same_v<T, bool>) {
      require(v == "true" || v == "false", "config key '", key, "': expected true or false, got '", v, "'");
      dst = v == "true";
    } else if constexpr (std::is_same_v<T, std::string>) {
      dst = std::string(v);
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      dst = split_list(v);
    } else if constexpr (std::is_arithmetic_v<T>) {
      dst = parse_number<T>(key, v);
    } else {
      const auto parts = split_list(v);
      require(parts.size() == dst.size(), "config key '", key, "': expected ", dst.size(), " values");
      for (std::size_t i = 0; i < parts.size(); ++i)
        dst[i] = parse_number<typename T::value_type>(key, parts[i]);
    }
  };
  return s;
}

}  // namespace detail

#define CTXDETOX_FIELD(expr) [](RunConfig& c) -> auto& { return c.expr; }

inline const std::vector<Setting>& settings() {
  using detail::bind;
  static const std::vector<Setting> s = {
      bind("seed", "run seed; all component seeds derive from it", CTXDETOX_FIELD(seed)),
      bind("corpus.n_train_prefix", "prefix-training examples", CTXDETOX_FIELD(corpus.n_train_prefix)),
      bind("corpus.n_train_classifier", "classifier-training examples", CTXDETOX_FIELD(corpus.n_train_classifier)),
      bind("corpus.n_dev", "dev examples", CTXDETOX_FIELD(corpus.n_dev)),
      bind("corpus.n_test", "test examples", CTXDETOX_FIELD(corpus.n_test)),
      bind("corpus.case_mix", "prefix-split quotas over cases 1..4", CTXDETOX_FIELD(corpus.case_mix)),
      bind("corpus.p_marked_context", "probability a context is offensive", CTXDETOX_FIELD(corpus.p_marked_context)),
      bind("corpus.p_toxic_response", "probability a response is offensive", CTXDETOX_FIELD(corpus.p_toxic_response)),
      bind("corpus.p_echo_support", "chance a supportive reply repeats a marked token",
           CTXDETOX_FIELD(corpus.p_echo_support)),
      bind("corpus.sycophancy_rate", "support rate for offensive contexts", CTXDETOX_FIELD(corpus.sycophancy_rate)),
      bind("corpus.heldout_marked_fraction", "marked lexicon share reserved for dev/test",
           CTXDETOX_FIELD(corpus.heldout_marked_fraction)),
      bind("corpus.unmarked_stance_mix", "support,deny,comment,query mix for inoffensive contexts",
           CTXDETOX_FIELD(corpus.unmarked_stance_mix)),
      bind("corpus.marked_nonsupport_mix", "deny,comment,query mix of non-supportive replies",
           CTXDETOX_FIELD(corpus.marked_nonsupport_mix)),
      bind("corpus.context_min_len", "", CTXDETOX_FIELD(corpus.context_min_len)),
      bind("corpus.context_max_len", "", CTXDETOX_FIELD(corpus.context_max_len)),
      bind("corpus.response_min_len", "", CTXDETOX_FIELD(corpus.response_min_len)),
      bind("corpus.response_max_len", "", CTXDETOX_FIELD(corpus.response_max_len)),
      bind("lm.layers", "transformer layers", CTXDETOX_FIELD(lm.n_layers)),
      bind("lm.hidden", "hidden size", CTXDETOX_FIELD(lm.hidden)),
      bind("lm.heads", "attention heads", CTXDETOX_FIELD(lm.n_heads)),
      bind("lm.max_seq", "maximum positions including prefix slots", CTXDETOX_FIELD(lm.max_seq)),
      bind("lm.ffn_mult", "feed-forward width multiplier", CTXDETOX_FIELD(lm.ffn_mult)),
      bind("lm.init_std", "initialization scale", CTXDETOX_FIELD(lm.init_std)),
      bind("base.steps", "backbone training steps", CTXDETOX_FIELD(base.steps)),
      bind("base.batch", "", CTXDETOX_FIELD(base.batch)),
      bind("base.lr", "", CTXDETOX_FIELD(base.lr)),
      bind("base.weight_decay", "", CTXDETOX_FIELD(base.weight_decay)),
      bind("reference.width_mult", "reference LM hidden size relative to lm.hidden",
           CTXDETOX_FIELD(reference_width_mult)),
      bind("reference.steps", "", CTXDETOX_FIELD(reference.steps)),
      bind("reference.batch", "", CTXDETOX_FIELD(reference.batch)),
      bind("reference.lr", "", CTXDETOX_FIELD(reference.lr)),
      bind("prefix.slots", "prefix length M", CTXDETOX_FIELD(slots)),
      bind("prefix.small_dim", "reparameterization width P", CTXDETOX_FIELD(small_dim)),
      bind("ours.steps", "", CTXDETOX_FIELD(ours.steps)),
      bind("ours.batch", "", CTXDETOX_FIELD(ours.batch)),
      bind("ours.lr_meta", "learning rate of the meta prefixes and readout", CTXDETOX_FIELD(ours.lr_meta)),
      bind("ours.lr_toxicity", "learning rate of the toxicity prefixes", CTXDETOX_FIELD(ours.lr_toxicity)),
      bind("ours.weight_decay", "", CTXDETOX_FIELD(ours.weight_decay)),
      bind("ours.stance_reduction", "batch_mean or offensive_mean", CTXDETOX_FIELD(stance_reduction)),
      bind("loss.w_lm", "", CTXDETOX_FIELD(loss.lm)),
      bind("loss.w_stance", "", CTXDETOX_FIELD(loss.stance)),
      bind("loss.w_context", "", CTXDETOX_FIELD(loss.context)),
      bind("loss.margin", "", CTXDETOX_FIELD(loss.margin)),
      bind("supervised.steps", "steps for the static-prefix methods", CTXDETOX_FIELD(supervised.steps)),
      bind("supervised.batch", "", CTXDETOX_FIELD(supervised.batch)),
      bind("supervised.lr", "", CTXDETOX_FIELD(supervised.lr)),
      bind("supervised.lm_weight", "", CTXDETOX_FIELD(supervised.lm_weight)),
      bind("supervised.disc_weight", "", CTXDETOX_FIELD(supervised.disc_weight)),
      bind("classifier.embed_dim", "", CTXDETOX_FIELD(classifier.embed_dim)),
      bind("classifier.hidden", "", CTXDETOX_FIELD(classifier.hidden)),
      bind("classifier.epochs", "", CTXDETOX_FIELD(classifier.epochs)),
      bind("classifier.batch", "", CTXDETOX_FIELD(classifier.batch)),
      bind("classifier.lr", "", CTXDETOX_FIELD(classifier.lr)),
      bind("classifier.threshold", "routing threshold on P(offensive)", CTXDETOX_FIELD(classifier.threshold)),
      bind("clsgen.toxicity_first", "order of the concatenated prefixes", CTXDETOX_FIELD(toxicity_first)),
      bind("gen.top_k", "", CTXDETOX_FIELD(gen.top_k)),
      bind("gen.top_p", "", CTXDETOX_FIELD(gen.top_p)),
      bind("gen.temperature", "", CTXDETOX_FIELD(gen.temperature)),
      bind("gen.max_new_tokens", "", CTXDETOX_FIELD(gen.max_new_tokens)),
      bind("gen.num_completions", "completions per test context", CTXDETOX_FIELD(gen.num_completions)),
      bind("eval.methods", "methods to evaluate", CTXDETOX_FIELD(methods)),
  };
  return s;
}

#undef CTXDETOX_FIELD

inline void apply_setting(RunConfig& c, std::string_view key, std::string_view value) {
  for (const auto& s : settings())
    if (s.key == key) {
      s.set(c, detail::trim(value));
      return;
    }
  fail("unknown config key '", key, "'");
}

/// Applies `key = value` lines from `text`; `origin` names the source in errors.
inline void apply_config_text(RunConfig& c, std::string_view text, std::string_view origin) {
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view l = line;
    if (const auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
    l = detail::trim(l);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    require(eq != std::string_view::npos, origin, ":", lineno, ": expected 'key = value'");
    try {
      apply_setting(c, detail::trim(l.substr(0, eq)), l.substr(eq + 1));
    } catch (const Error& e) {
      fail(origin, ":", lineno, ": ", e.what());
    }
  }
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read config file ", path.string());
  std::ostringstream s;
  s << in.rdbuf();
  apply_config_text(c, s.str(), path.string());
}

/// The resolved configuration as JSON, keyed like the file format.
inline ojson config_json(const RunConfig& c) {
  ojson j = ojson::object();
  for (const auto& s : settings()) j[s.key] = s.get(c);
  return j;
}

/// Settings whose key starts with one of `prefixes` (plus the seed).
inline ojson config_subset(const RunConfig& c, std::initializer_list<std::string_view> prefixes) {
  ojson j = ojson::object();
  for (const auto& s : settings()) {
    bool keep = s.key == "seed";
    for (auto p : prefixes) keep |= s.key.rfind(p, 0) == 0;
    if (keep) j[s.key] = s.get(c);
  }
  return j;
}

inline std::string describe() {
  const RunConfig defaults;
  std::ostringstream o;
  for (const auto& s : settings()) {
    o << s.key << " = ";
    const ojson v = s.get(defaults);
    if (v.is_array()) {
      for (std::size_t i = 0; i < v.size(); ++i) o << (i ? "," : "") << (v[i].is_string() ? v[i].get<std::string>() : v[i].dump());
    } else {
      o << (v.is_string() ? v.get<std::string>() : v.dump());
    }
    if (!s.help.empty()) o << "  # " << s.help;
    o << "\n";
  }
  return o.str();
}

}  // namespace ctxdetox::app
