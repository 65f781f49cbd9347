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

// Per-method evaluation reports and the cross-method comparison table.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxdetox/eval/metrics.hpp"

namespace ctxdetox::eval {

using ojson = nlohmann::ordered_json;

inline constexpr const char* kUncontrolled = "uncontrolled";

struct EvalReport {
  std::string method;
  std::string test_split_hash;
  std::size_t n_examples = 0;
  std::size_t n_completions = 0;
  std::optional<double> stance_shift_4way;  // absent for the uncontrolled model
  std::optional<double> stance_shift_3way;
  double support_stance = 0;
  double self_toxicity = 0;
  PerplexityResult perplexity;
  StanceBreakdown breakdown;
  ojson manifest = ojson::object();
};

/// Hash of the ordered test contexts and labels.
inline std::string test_split_hash(std::span<const DialogueExample> test) {
  Fnv1a64 h;
  for (const auto& ex : test) {
    const std::uint64_t n = ex.c.size();
    h.update(&n, sizeof n);
    h.update(ex.c.data(), ex.c.size() * sizeof(int));
    h.update(&ex.t_c, sizeof ex.t_c);
  }
  return hex64(h.digest());
}

/// `reference` is the uncontrolled set; null when `set` is the uncontrolled one.
inline EvalReport build_report(const GenerationSet& set, const GenerationSet* reference,
                               std::span<const DialogueExample> test, const Vocab& vocab,
                               const LMParams<float>& ref_lm, ojson manifest = ojson::object()) {
  require(set.items.size() == test.size(), "build_report: generation set does not cover the test split");
  EvalReport r;
  r.method = set.method;
  r.test_split_hash = test_split_hash(test);
  r.n_examples = set.items.size();
  r.n_completions = set.completion_count();
  if (reference) {
    r.stance_shift_4way = stance_shift(set, *reference, vocab, ShiftMode::kFourWay);
    r.stance_shift_3way = stance_shift(set, *reference, vocab, ShiftMode::kThreeWay);
  }
  r.support_stance = support_stance_score(set, vocab);
  r.self_toxicity = self_toxicity(set, vocab);
  r.perplexity = perplexity_metric(ref_lm, set);
  r.breakdown = stance_breakdown(set, vocab);
  r.manifest = std::move(manifest);
  return r;
}

inline ojson class_json(const ClassMeans& m) {
  ojson j;
  for (Stance s : corpus::kAllStances) j[std::string(corpus::stance_name(s))] = m[static_cast<std::size_t>(s)];
  return j;
}

inline ClassMeans class_from_json(const ojson& j) {
  ClassMeans m{};
  for (Stance s : corpus::kAllStances) m[static_cast<std::size_t>(s)] = j.at(std::string(corpus::stance_name(s)));
  return m;
}

inline ojson to_json(const EvalReport& r) {
  ojson j;
  j["method"] = r.method;
  j["test_split_hash"] = r.test_split_hash;
  j["n_examples"] = r.n_examples;
  j["n_completions"] = r.n_completions;
  ojson m;
  if (r.stance_shift_4way) m["stance_shift_4way"] = *r.stance_shift_4way;
  if (r.stance_shift_3way) m["stance_shift_3way"] = *r.stance_shift_3way;
  m["support_stance"] = r.support_stance;
  m["self_toxicity"] = r.self_toxicity;
  m["perplexity"] = r.perplexity.mean;
  m["perplexity_scored"] = r.perplexity.scored;
  m["perplexity_skipped_empty"] = r.perplexity.skipped_empty;
  j["metrics"] = m;
  ojson b;
  b["inoffensive_context"] = {{"stance", class_json(r.breakdown.inoffensive_context)},
                              {"toxicity", r.breakdown.toxicity_inoffensive},
                              {"completions", r.breakdown.n_inoffensive}};
  b["offensive_context"] = {{"stance", class_json(r.breakdown.offensive_context)},
                            {"toxicity", r.breakdown.toxicity_offensive},
                            {"completions", r.breakdown.n_offensive}};
  j["breakdown"] = b;
  j["manifest"] = r.manifest;
  return j;
}

inline EvalReport report_from_json(const ojson& j) {
  EvalReport r;
  r.method = j.at("method");
  r.test_split_hash = j.at("test_split_hash");
  r.n_examples = j.at("n_examples");
  r.n_completions = j.at("n_completions");
  const auto& m = j.at("metrics");
  if (m.contains("stance_shift_4way")) r.stance_shift_4way = m.at("stance_shift_4way").get<double>();
  if (m.contains("stance_shift_3way")) r.stance_shift_3way = m.at("stance_shift_3way").get<double>();
  r.support_stance = m.at("support_stance");
  r.self_toxicity = m.at("self_toxicity");
  r.perplexity.mean = m.at("perplexity");
  r.perplexity.scored = m.at("perplexity_scored");
  r.perplexity.skipped_empty = m.at("perplexity_skipped_empty");
  const auto& b = j.at("breakdown");
  r.breakdown.inoffensive_context = class_from_json(b.at("inoffensive_context").at("stance"));
  r.breakdown.offensive_context = class_from_json(b.at("offensive_context").at("stance"));
  r.breakdown.toxicity_inoffensive = b.at("inoffensive_context").at("toxicity");
  r.breakdown.toxicity_offensive = b.at("offensive_context").at("toxicity");
  r.breakdown.n_inoffensive = b.at("inoffensive_context").at("completions");
  r.breakdown.n_offensive = b.at("offensive_context").at("completions");
  r.manifest = j.value("manifest", ojson::object());
  return r;
}

namespace detail {

inline std::string cell(const std::optional<double>& v) { return v ? fmt_fixed(*v, 4) : "-"; }

inline std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.insert(0, w - s.size(), ' ');
  return s;
}

}  // namespace detail

inline std::string render_text(const EvalReport& r) {
  std::ostringstream o;
  o << "method: " << r.method << "\n";
  o << "examples: " << r.n_examples << "  completions: " << r.n_completions << "\n";
  o << "4-way stance shift: " << detail::cell(r.stance_shift_4way) << "\n";
  o << "3-way stance shift: " << detail::cell(r.stance_shift_3way) << "\n";
  o << "support stance:     " << fmt_fixed(r.support_stance, 4) << "\n";
  o << "self-toxicity:      " << fmt_fixed(r.self_toxicity, 4) << "\n";
  o << "perplexity:         " << fmt_fixed(r.perplexity.mean, 3) << "  (" << r.perplexity.skipped_empty
    << " empty completions skipped)\n\n";
  o << "context       support    deny  comment   query  toxicity\n";
  auto row = [&](const char* name, const ClassMeans& m, double tox) {
    o << name;
    for (double v : m) o << detail::pad(fmt_fixed(v, 4), 8);
    o << detail::pad(fmt_fixed(tox, 4), 10) << "\n";
  };
  row("inoffensive", r.breakdown.inoffensive_context, r.breakdown.toxicity_inoffensive);
  row("offensive  ", r.breakdown.offensive_context, r.breakdown.toxicity_offensive);
  return o.str();
}

/// Reports ordered for the comparison table: the uncontrolled row(s) first,
/// then ascending 4-way stance shift (ties by method name).
inline std::vector<EvalReport> order_for_comparison(std::vector<EvalReport> reports) {
  require(!reports.empty(), "compare: no reports");
  for (const auto& r : reports)
    require(r.test_split_hash == reports[0].test_split_hash, "compare: report '", r.method,
            "' was computed on a different test split than '", reports[0].method, "'");
  std::stable_sort(reports.begin(), reports.end(), [](const EvalReport& a, const EvalReport& b) {
    if (a.stance_shift_4way.has_value() != b.stance_shift_4way.has_value()) return !a.stance_shift_4way.has_value();
    if (a.stance_shift_4way && *a.stance_shift_4way != *b.stance_shift_4way)
      return *a.stance_shift_4way < *b.stance_shift_4way;
    return a.method < b.method;
  });
  return reports;
}

inline std::string comparison_text(const std::vector<EvalReport>& ordered) {
  std::ostringstream o;
  o << "method                 4-way shift  3-way shift  support  self-tox  perplexity\n";
  for (const auto& r : ordered) {
    std::string name = r.method;
    name.resize(std::max<std::size_t>(name.size(), 22), ' ');
    o << name << detail::pad(detail::cell(r.stance_shift_4way), 12) << detail::pad(detail::cell(r.stance_shift_3way), 13)
      << detail::pad(fmt_fixed(r.support_stance, 4), 9) << detail::pad(fmt_fixed(r.self_toxicity, 4), 10)
      << detail::pad(fmt_fixed(r.perplexity.mean, 3), 12) << "\n";
  }
  return o.str();
}

/// One row per (method, metric), in comparison order.
inline std::string comparison_csv(const std::vector<EvalReport>& ordered) {
  std::ostringstream o;
  o << "method,metric,value\n";
  for (const auto& r : ordered) {
    if (r.stance_shift_4way) o << r.method << ",stance_shift_4way," << fmt_real(*r.stance_shift_4way) << "\n";
    if (r.stance_shift_3way) o << r.method << ",stance_shift_3way," << fmt_real(*r.stance_shift_3way) << "\n";
    o << r.method << ",support_stance," << fmt_real(r.support_stance) << "\n";
    o << r.method << ",self_toxicity," << fmt_real(r.self_toxicity) << "\n";
    o << r.method << ",perplexity," << fmt_real(r.perplexity.mean) << "\n";
  }
  return o.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot write ", path.string());
    out << text;
    require(out.good(), "write failed for ", path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_report(const EvalReport& r, const std::filesystem::path& json_path,
                         const std::filesystem::path& text_path) {
  write_text_file(json_path, to_json(r).dump(2) + "\n");
  write_text_file(text_path, render_text(r));
}

inline EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read report ", path.string());
  try {
    return report_from_json(ojson::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail("malformed report ", path.string(), ": ", e.what());
  }
}

}  // namespace ctxdetox::eval
