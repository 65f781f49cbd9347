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

// The experiment pipeline: corpus, backbone, reference LM, controls,
// evaluation and comparison, each persisted under a run directory.
//
// Every step writes a manifest next to its outputs recording the settings it
// read, the hashes of its inputs and outputs, and a fingerprint of both. A
// step whose manifest fingerprint and output hashes still match is skipped;
// a step that would overwrite different outputs needs `force`.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctxdetox/app/config.hpp"
#include "ctxdetox/baselines/methods.hpp"
#include "ctxdetox/corpus/io.hpp"
#include "ctxdetox/eval/report.hpp"
#include "ctxdetox/prefix/artifact.hpp"
#include "ctxdetox/tinylm/checkpoint.hpp"
#include "ctxdetox/training/hierarchical.hpp"
#include "ctxdetox/training/supervised.hpp"

namespace ctxdetox::app {

namespace fs = std::filesystem;

inline std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read ", path.string());
  Fnv1a64 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  }
  return hex64(h.digest());
}

inline ojson read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read ", path.string());
  try {
    return ojson::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail("malformed JSON in ", path.string(), ": ", e.what());
  }
}

/// Fixed layout of a run directory.
struct RunPaths {
  fs::path root;

  fs::path corpus_dir() const { return root / "corpus"; }
  fs::path ckpt(std::string_view name) const { return root / "ckpt" / (std::string(name) + ".ckpt"); }
  fs::path artifact(std::string_view name) const { return root / "artifacts" / (std::string(name) + ".ctrl"); }
  fs::path trace(std::string_view name) const { return root / "artifacts" / "traces" / (std::string(name) + ".csv"); }
  fs::path reports_dir() const { return root / "reports"; }
  fs::path report_json(std::string_view m) const { return reports_dir() / (std::string(m) + ".json"); }
  fs::path report_text(std::string_view m) const { return reports_dir() / (std::string(m) + ".txt"); }

  /// Path relative to the run root, used in manifests so they do not depend
  /// on where the run directory lives.
  std::string rel(const fs::path& p) const { return fs::relative(p, root).generic_string(); }
};

/// Training targets accepted by `train`.
inline const std::vector<std::string>& train_targets() {
  static const std::vector<std::string> t = {"base",        "reference",      "clsgen",         "ours",
                                             "prefix_tuning", "contrastive", "ablation:no_Ls", "ablation:no_Lc",
                                             "ablation:no_both"};
  return t;
}

inline std::string method_of_target(std::string_view target) {
  if (target.rfind("ablation:", 0) == 0) return "ours_" + std::string(target.substr(9));
  return std::string(target);
}

class Pipeline {
 public:
  Pipeline(RunConfig cfg, fs::path root, bool force, std::ostream& log = std::cout)
      : cfg_(std::move(cfg)), paths_{std::move(root)}, force_(force), log_(log) {
    cfg_.resolve();
    cfg_.validate();
  }

  const RunPaths& paths() const { return paths_; }
  const RunConfig& config() const { return cfg_; }

  void corpus() {
    const auto cfg_json = config_subset(cfg_, {"corpus."});
    std::vector<fs::path> outputs;
    for (auto s : corpus::kAllSplits) outputs.push_back(corpus::split_path(paths_.corpus_dir(), s));
    const fs::path stamp = paths_.corpus_dir() / "manifest.json";
    Step step("corpus", cfg_json, {});
    if (skip(step, stamp, outputs)) return;
    const corpus::Corpus c = corpus::generate_corpus(cfg_.corpus);
    corpus::write_corpus(c, paths_.corpus_dir());
    log_ << summarize(c);
    finish(step, stamp, outputs, ojson::object());
  }

  void train(std::string_view target) {
    require(std::find(train_targets().begin(), train_targets().end(), target) != train_targets().end(),
            "unknown training target '", target, "'");
    if (target == "base") return train_backbone(false);
    if (target == "reference") return train_backbone(true);
    if (target == "clsgen") return train_clsgen();
    if (target == "prefix_tuning") return train_prefix_tuning();
    if (target == "contrastive") return train_contrastive();
    if (target == "ours") return train_ours(training::Ablation::kFull);
    return train_ours(training::parse_ablation(target.substr(9)));
  }

  void eval() {
    need(paths_.ckpt("base"), "base");
    need(paths_.ckpt("reference"), "reference");
    const auto& data = load_corpus();
    const auto lm = tinylm::load_lm(paths_.ckpt("base"));
    const auto ref = tinylm::load_lm(paths_.ckpt("reference"));

    ojson inputs;
    inputs[paths_.rel(corpus::split_path(paths_.corpus_dir(), corpus::SplitId::kTest))] =
        file_hash(corpus::split_path(paths_.corpus_dir(), corpus::SplitId::kTest));
    inputs["ckpt/base.ckpt"] = file_hash(paths_.ckpt("base"));
    inputs["ckpt/reference.ckpt"] = file_hash(paths_.ckpt("reference"));
    for (const auto& m : cfg_.methods) {
      if (m == eval::kUncontrolled) continue;
      need(artifact_path_of(m), train_target_of(m));
      inputs[paths_.rel(artifact_path_of(m))] = file_hash(artifact_path_of(m));
    }
    std::vector<fs::path> outputs;
    for (const auto& m : method_order()) {
      outputs.push_back(paths_.report_json(m));
      outputs.push_back(paths_.report_text(m));
    }
    if (has_method("clsgen")) outputs.push_back(routing_log_path());
    const fs::path stamp = paths_.reports_dir() / "manifest.json";
    Step step("eval", config_subset(cfg_, {"gen.", "eval."}), inputs);
    if (skip(step, stamp, outputs)) return;

    const std::uint64_t run_seed = derive_seed(cfg_.seed, 0x4556414cu);
    const auto test = std::span<const corpus::DialogueExample>(data.test);
    log_ << "eval: generating " << cfg_.gen.num_completions << " completions for " << test.size()
         << " test contexts per method\n";
    const eval::GenerationSet reference =
        eval::generate_set(lm, eval::Controller::uncontrolled(), test, cfg_.gen, run_seed);
    for (const auto& m : method_order()) {
      ojson manifest;
      manifest["run_seed"] = run_seed;
      manifest["config"] = config_subset(cfg_, {"gen."});
      manifest["backbone_hash"] = hex64(tinylm::backbone_hash(lm));
      manifest["reference_lm_hash"] = hex64(tinylm::backbone_hash(ref));
      manifest["inputs"] = ojson::object();
      manifest["inputs"]["ckpt/base.ckpt"] = inputs["ckpt/base.ckpt"];
      eval::GenerationSet set;
      if (m == eval::kUncontrolled) {
        set = reference;
      } else {
        const Container art = prefix::load_control(artifact_path_of(m), m, lm);
        manifest["inputs"][paths_.rel(artifact_path_of(m))] = inputs[paths_.rel(artifact_path_of(m))];
        if (art.meta.contains("training")) manifest["training"] = art.meta.at("training");
        set = eval::generate_set(lm, controller_for(m, art, lm), test, cfg_.gen, run_seed);
        if (m == baselines::kMethodClsGen) {
          eval::write_routing_log(set, routing_log_path());
          std::size_t errors = 0;
          for (const auto& it : set.items) errors += it.route->verdict != it.t_c;
          manifest["routing"] = {{"log", paths_.rel(routing_log_path())},
                                 {"routed", set.items.size()},
                                 {"errors", errors}};
        }
      }
      const auto report = eval::build_report(set, m == eval::kUncontrolled ? nullptr : &reference, test,
                                             data.vocab, ref, std::move(manifest));
      eval::write_report(report, paths_.report_json(m), paths_.report_text(m));
      log_ << "eval: " << m << " 4-way=" << eval::detail::cell(report.stance_shift_4way)
           << " support=" << fmt_fixed(report.support_stance, 4) << " self-tox=" << fmt_fixed(report.self_toxicity, 4)
           << " ppl=" << fmt_fixed(report.perplexity.mean, 2) << "\n";
    }
    finish(step, stamp, outputs, ojson::object());
  }

  void compare() {
    std::vector<eval::EvalReport> reports;
    for (const auto& m : method_order()) {
      need(paths_.report_json(m), "eval");
      reports.push_back(eval::read_report(paths_.report_json(m)));
    }
    const auto ordered = eval::order_for_comparison(std::move(reports));
    std::string text = eval::comparison_text(ordered);
    text += "\nstance and toxicity by context offensiveness\n";
    text += "method                 context      support    deny  comment   query  toxicity\n";
    for (const auto& r : ordered) {
      for (int k = 0; k < 2; ++k) {
        std::string name = k == 0 ? r.method : "";
        name.resize(std::max<std::size_t>(name.size(), 23), ' ');
        const auto& means = k == 0 ? r.breakdown.inoffensive_context : r.breakdown.offensive_context;
        text += name + (k == 0 ? "inoffensive" : "offensive  ");
        for (double v : means) text += eval::detail::pad(fmt_fixed(v, 4), 8);
        text += eval::detail::pad(
                    fmt_fixed(k == 0 ? r.breakdown.toxicity_inoffensive : r.breakdown.toxicity_offensive, 4), 10) +
                "\n";
      }
    }
    eval::write_text_file(paths_.reports_dir() / "comparison.txt", text);
    eval::write_text_file(paths_.reports_dir() / "comparison.csv", eval::comparison_csv(ordered));
    log_ << text;
  }

  /// corpus -> base -> reference -> clsgen (toxicity bank) -> ours and
  /// ablations -> other baselines -> eval -> compare.
  void all() {
    corpus();
    train("base");
    train("reference");
    train("clsgen");
    train("ours");
    for (const auto& m : cfg_.methods)
      if (m.rfind("ours_", 0) == 0) train("ablation:" + m.substr(5));
    if (has_method("prefix_tuning")) train("prefix_tuning");
    if (has_method("contrastive")) train("contrastive");
    eval();
    compare();
  }

 private:
  struct Step {
    std::string name;
    ojson settings;
    ojson inputs;

    Step(std::string n, ojson s, ojson in) : name(std::move(n)), settings(std::move(s)), inputs(std::move(in)) {
      if (inputs.is_null()) inputs = ojson::object();
    }
    std::string fingerprint() const {
      Fnv1a64 h;
      h.update(ojson{{"step", name}, {"settings", settings}, {"inputs", inputs}}.dump());
      return hex64(h.digest());
    }
  };

  bool skip(const Step& step, const fs::path& stamp, const std::vector<fs::path>& outputs) {
    bool any = false, all = true;
    for (const auto& p : outputs) {
      const bool e = fs::exists(p);
      any |= e;
      all &= e;
    }
    if (force_ || !any) return false;
    if (all && fs::exists(stamp)) {
      const ojson m = read_json_file(stamp);
      bool same = m.value("fingerprint", "") == step.fingerprint();
      for (const auto& p : outputs) {
        const auto key = paths_.rel(p);
        same = same && m.contains("outputs") && m["outputs"].contains(key) && m["outputs"][key] == file_hash(p);
      }
      if (same) {
        log_ << step.name << ": up to date, skipping\n";
        return true;
      }
    }
    fail(step.name, ": outputs under ", paths_.rel(outputs.front().parent_path()),
         " exist but were produced from different settings or inputs; pass --force to overwrite");
  }

  void finish(const Step& step, const fs::path& stamp, const std::vector<fs::path>& outputs, ojson extra) {
    ojson m;
    m["step"] = step.name;
    m["fingerprint"] = step.fingerprint();
    m["settings"] = step.settings;
    m["inputs"] = step.inputs;
    ojson out = ojson::object();
    for (const auto& p : outputs) out[paths_.rel(p)] = file_hash(p);
    m["outputs"] = out;
    for (auto& [k, v] : extra.items()) m[k] = v;
    eval::write_text_file(stamp, m.dump(2) + "\n");
  }

  void need(const fs::path& p, std::string_view producer) const {
    require(fs::exists(p), "missing prerequisite artifact '", paths_.rel(p), "' (produce it with `",
            producer == "corpus" || producer == "eval" ? std::string(producer) : "train " + std::string(producer),
            "`)");
  }

  const corpus::Corpus& load_corpus() {
    if (!corpus_) {
      for (auto s : corpus::kAllSplits) need(corpus::split_path(paths_.corpus_dir(), s), "corpus");
      corpus_ = corpus::read_corpus(paths_.corpus_dir());
    }
    return *corpus_;
  }

  ojson corpus_inputs() {
    ojson j = ojson::object();
    for (auto s : corpus::kAllSplits) {
      const auto p = corpus::split_path(paths_.corpus_dir(), s);
      need(p, "corpus");
      j[paths_.rel(p)] = file_hash(p);
    }
    return j;
  }

  ojson with_input(ojson j, const fs::path& p, std::string_view producer) const {
    need(p, producer);
    j[paths_.rel(p)] = file_hash(p);
    return j;
  }

  static std::string summarize(const corpus::Corpus& c) {
    std::ostringstream o;
    o << "corpus: vocabulary of " << c.vocab.size() << " tokens\n";
    for (auto s : corpus::kAllSplits) {
      const auto& split = c.split(s);
      std::size_t tc = 0, tr = 0, neutral = 0;
      std::size_t stance[4] = {0, 0, 0, 0};
      for (const auto& ex : split) {
        tc += static_cast<std::size_t>(ex.t_c);
        tr += static_cast<std::size_t>(ex.t_r);
        neutral += !ex.s_r.has_value();
        ++stance[static_cast<int>(ex.stance4)];
      }
      const double n = static_cast<double>(std::max<std::size_t>(split.size(), 1));
      o << "  " << corpus::split_name(s) << ": " << split.size() << " examples, offensive contexts "
        << fmt_fixed(static_cast<double>(tc) / n, 3) << ", offensive responses " << fmt_fixed(static_cast<double>(tr) / n, 3)
        << ", neutral stance " << fmt_fixed(static_cast<double>(neutral) / n, 3) << ", stances s/d/c/q " << stance[0]
        << "/" << stance[1] << "/" << stance[2] << "/" << stance[3] << "\n";
    }
    return o.str();
  }

  void write_lm_trace(const tinylm::LossTrace& t, const fs::path& path) {
    std::ostringstream o;
    o << "step,loss\n";
    for (std::size_t i = 0; i < t.size(); ++i) o << i << ',' << fmt_real(t[i]) << '\n';
    eval::write_text_file(path, o.str());
  }

  void train_backbone(bool reference) {
    const std::string name = reference ? "reference" : "base";
    const fs::path out = paths_.ckpt(name), trace = paths_.trace(name);
    const auto& data = load_corpus();
    Step step(name, config_subset(cfg_, {"lm.", reference ? "reference." : "base."}), corpus_inputs());
    const fs::path stamp = paths_.root / "ckpt" / (name + ".manifest.json");
    if (skip(step, stamp, {out, trace})) return;
    tinylm::LMConfig lc = reference ? cfg_.reference_lm() : cfg_.lm;
    lc.vocab = data.vocab.size();
    auto p = tinylm::init_lm<float>(lc);
    const auto& tc = reference ? cfg_.reference : cfg_.base;
    const double before = tinylm::mean_token_nll(p, data.dev);
    log_ << name << ": training " << tinylm::parameter_count(lc) << " parameters for " << tc.steps << " steps\n";
    const auto losses = tinylm::train_lm(p, std::span<const corpus::DialogueExample>(data.train_classifier), tc,
                                         [&](int s, double l) {
                                           if ((s + 1) % 500 == 0) log_ << "  step " << s + 1 << " loss " << fmt_fixed(l, 4) << "\n";
                                         });
    const double after = tinylm::mean_token_nll(p, data.dev);
    log_ << name << ": dev nll per token " << fmt_fixed(before, 4) << " -> " << fmt_fixed(after, 4) << "\n";
    ojson meta;
    meta["settings"] = step.settings;
    meta["inputs"] = step.inputs;
    meta["dev_nll_before"] = before;
    meta["dev_nll_after"] = after;
    p.frozen = true;
    tinylm::save_lm(p, out, meta);
    write_lm_trace(losses, trace);
    finish(step, stamp, {out, trace}, ojson{{"dev_nll_before", before}, {"dev_nll_after", after}});
  }

  void check_frozen(const tinylm::LMParams<float>& lm, std::uint64_t before, std::string_view what) {
    const std::uint64_t after = tinylm::backbone_hash(lm);
    require(after == before, what, ": backbone changed during training");
    require(file_hash(paths_.ckpt("base")) == base_file_hash_, what, ": backbone checkpoint changed on disk");
  }

  tinylm::LMParams<float> load_backbone(std::uint64_t& hash) {
    need(paths_.ckpt("base"), "base");
    base_file_hash_ = file_hash(paths_.ckpt("base"));
    auto lm = tinylm::load_lm(paths_.ckpt("base"));
    hash = tinylm::backbone_hash(lm);
    return lm;
  }

  static ojson frozen_record(std::uint64_t before, std::uint64_t after) {
    return {{"before", hex64(before)}, {"after", hex64(after)}};
  }

  prefix::PrefixShape shape_for(const tinylm::LMParams<float>& lm) const {
    return prefix::PrefixShape::for_lm(lm.config, cfg_.slots, cfg_.small_dim);
  }

  void train_clsgen() {
    const fs::path out = paths_.artifact("clsgen");
    const std::vector<fs::path> outputs = {out, paths_.trace("toxicity_bank"), paths_.trace("stance_bank")};
    const auto& data = load_corpus();
    Step step("clsgen", config_subset(cfg_, {"prefix.", "supervised.", "classifier.", "clsgen."}),
              with_input(corpus_inputs(), paths_.ckpt("base"), "base"));
    const fs::path stamp = paths_.root / "artifacts" / "clsgen.manifest.json";
    if (skip(step, stamp, outputs)) return;
    std::uint64_t h0 = 0;
    const auto lm = load_backbone(h0);
    const auto shape = shape_for(lm);

    log_ << "clsgen: toxicity bank, " << cfg_.supervised.steps << " steps\n";
    std::vector<training::SupervisedStep> tox_trace, stance_trace;
    const auto tox = training::train_toxicity_bank<float>(lm, data.train_prefix, cfg_.supervised, &tox_trace);
    log_ << "clsgen: stance bank, " << cfg_.supervised.steps << " steps\n";
    const auto stance = baselines::train_stance_bank<float>(lm, data.train_prefix, cfg_.supervised, &stance_trace);
    log_ << "clsgen: offense classifier\n";
    const auto k = baselines::train_offense_classifier(data.train_classifier, data.vocab.size(), cfg_.classifier);
    const auto train_m = baselines::evaluate_classifier(k, data.train_classifier);
    const auto test_m = baselines::evaluate_classifier(k, data.test);
    log_ << "clsgen: classifier accuracy train " << fmt_fixed(train_m.accuracy, 3) << ", test "
         << fmt_fixed(test_m.accuracy, 3) << " (F1 " << fmt_fixed(test_m.f1, 3) << ")\n";
    check_frozen(lm, h0, "clsgen");

    Container c = baselines::clsgen_container(lm, k, tox, stance, shape, baselines::ClsGenConfig{cfg_.toxicity_first});
    ojson training_meta;
    training_meta["settings"] = step.settings;
    training_meta["inputs"] = step.inputs;
    training_meta["classifier"] = {{"train_accuracy", train_m.accuracy}, {"train_f1", train_m.f1},
                                   {"test_accuracy", test_m.accuracy},   {"test_f1", test_m.f1},
                                   {"test_precision", test_m.precision}, {"test_recall", test_m.recall}};
    training_meta["backbone_frozen"] = frozen_record(h0, tinylm::backbone_hash(lm));
    c.meta["training"] = training_meta;
    write_container(c, out);
    training::write_supervised_trace(tox_trace, paths_.trace("toxicity_bank"));
    training::write_supervised_trace(stance_trace, paths_.trace("stance_bank"));
    finish(step, stamp, outputs, ojson{{"training", training_meta}});
  }

  void train_ours(training::Ablation ablation) {
    const std::string method =
        ablation == training::Ablation::kFull ? "ours" : "ours_" + training::ablation_name(ablation);
    const fs::path out = paths_.artifact(method), trace = paths_.trace(method);
    const auto& data = load_corpus();
    ojson inputs = with_input(corpus_inputs(), paths_.ckpt("base"), "base");
    inputs = with_input(inputs, paths_.artifact("clsgen"), "clsgen");
    ojson settings = config_subset(cfg_, {"prefix.", "ours.", "loss."});
    settings["ablation"] = training::ablation_name(ablation);
    Step step(method, settings, inputs);
    const fs::path stamp = paths_.root / "artifacts" / (method + ".manifest.json");
    if (skip(step, stamp, {out, trace})) return;
    std::uint64_t h0 = 0;
    const auto lm = load_backbone(h0);
    const auto shape = shape_for(lm);
    const Container cls = prefix::load_control(paths_.artifact("clsgen"), baselines::kMethodClsGen, lm);
    const auto tox_init = baselines::toxicity_bank_from<float>(cls);

    auto tc = cfg_.ours;
    tc.ablation = ablation;
    log_ << method << ": " << tc.steps << " steps\n";
    const auto res = training::train_hierarchical<float>(lm, data.train_prefix, cfg_.loss, tc, tox_init,
                                                         [&](const training::TraceRow& r) {
                                                           if ((r.step + 1) % 500 == 0)
                                                             log_ << "  step " << r.step + 1 << " L_LM "
                                                                  << fmt_fixed(r.loss.lm, 3) << " d_s "
                                                                  << fmt_fixed(r.loss.d_s_mean, 3) << " d_c "
                                                                  << fmt_fixed(r.loss.d_c, 3) << "\n";
                                                         });
    const auto margins = training::dev_margins(lm, res.meta, data.dev);
    log_ << method << ": dev d_s " << fmt_fixed(margins.d_s_mean, 4) << ", dev d_c " << fmt_fixed(margins.d_c, 4)
         << "\n";
    check_frozen(lm, h0, method);

    Container c = prefix::to_container(prefix::OursArtifact<float>::from(res.meta, res.tox), lm, shape, method);
    ojson training_meta;
    training_meta["settings"] = settings;
    training_meta["weights"] = {{"w_lm", cfg_.loss.lm},
                                {"w_stance", training::uses_stance_term(ablation) ? cfg_.loss.stance : 0.0},
                                {"w_context", training::uses_context_term(ablation) ? cfg_.loss.context : 0.0},
                                {"margin", cfg_.loss.margin}};
    training_meta["inputs"] = inputs;
    training_meta["dev_margins"] = {{"d_s_mean", margins.d_s_mean}, {"d_c", margins.d_c}};
    training_meta["backbone_frozen"] = frozen_record(h0, tinylm::backbone_hash(lm));
    c.meta["training"] = training_meta;
    write_container(c, out);
    training::write_loss_trace(res.trace, trace);
    finish(step, stamp, {out, trace}, ojson{{"training", training_meta}});
  }

  void train_prefix_tuning() {
    const fs::path out = paths_.artifact("prefix_tuning"), trace = paths_.trace("prefix_tuning");
    const auto& data = load_corpus();
    Step step("prefix_tuning", config_subset(cfg_, {"prefix.", "supervised."}),
              with_input(corpus_inputs(), paths_.ckpt("base"), "base"));
    const fs::path stamp = paths_.root / "artifacts" / "prefix_tuning.manifest.json";
    if (skip(step, stamp, {out, trace})) return;
    std::uint64_t h0 = 0;
    const auto lm = load_backbone(h0);
    const auto kept = baselines::prefix_tuning_filter(data.train_prefix);
    log_ << "prefix_tuning: " << kept.size() << " of " << data.train_prefix.size() << " examples kept, "
         << cfg_.supervised.steps << " steps\n";
    std::vector<training::SupervisedStep> t;
    const auto p = baselines::train_prefix_tuning<float>(lm, data.train_prefix, cfg_.supervised, &t);
    check_frozen(lm, h0, "prefix_tuning");
    Container c = baselines::prefix_tuning_container(lm, p, shape_for(lm));
    ojson training_meta{{"settings", step.settings},
                        {"inputs", step.inputs},
                        {"kept_examples", kept.size()},
                        {"backbone_frozen", frozen_record(h0, tinylm::backbone_hash(lm))}};
    c.meta["training"] = training_meta;
    write_container(c, out);
    training::write_supervised_trace(t, trace);
    finish(step, stamp, {out, trace}, ojson{{"training", training_meta}});
  }

  void train_contrastive() {
    const fs::path out = paths_.artifact("contrastive"), trace = paths_.trace("contrastive");
    const auto& data = load_corpus();
    Step step("contrastive", config_subset(cfg_, {"prefix.", "supervised."}),
              with_input(corpus_inputs(), paths_.ckpt("base"), "base"));
    const fs::path stamp = paths_.root / "artifacts" / "contrastive.manifest.json";
    if (skip(step, stamp, {out, trace})) return;
    std::uint64_t h0 = 0;
    const auto lm = load_backbone(h0);
    log_ << "contrastive: " << cfg_.supervised.steps << " steps\n";
    std::vector<training::SupervisedStep> t;
    const auto bank = baselines::train_contrastive_prefixes<float>(lm, data.train_prefix, cfg_.supervised, &t);
    check_frozen(lm, h0, "contrastive");
    Container c = baselines::contrastive_container(lm, bank, shape_for(lm));
    ojson training_meta{{"settings", step.settings},
                        {"inputs", step.inputs},
                        {"loss_weights", {{"lm", cfg_.supervised.lm_weight}, {"disc", cfg_.supervised.disc_weight}}},
                        {"backbone_frozen", frozen_record(h0, tinylm::backbone_hash(lm))}};
    c.meta["training"] = training_meta;
    write_container(c, out);
    training::write_supervised_trace(t, trace);
    finish(step, stamp, {out, trace}, ojson{{"training", training_meta}});
  }

  bool has_method(std::string_view m) const {
    return std::find(cfg_.methods.begin(), cfg_.methods.end(), m) != cfg_.methods.end();
  }

  /// Configured methods with the uncontrolled reference always first.
  std::vector<std::string> method_order() const {
    std::vector<std::string> out = {eval::kUncontrolled};
    for (const auto& m : cfg_.methods)
      if (m != eval::kUncontrolled) out.push_back(m);
    return out;
  }

  fs::path artifact_path_of(std::string_view method) const { return paths_.artifact(method); }

  static std::string train_target_of(std::string_view method) {
    if (method.rfind("ours_", 0) == 0) return "ablation:" + std::string(method.substr(5));
    return std::string(method);
  }

  fs::path routing_log_path() const { return paths_.reports_dir() / "routing_clsgen.jsonl"; }

  static eval::Controller controller_for(const std::string& m, const Container& art,
                                         const tinylm::LMParams<float>& lm) {
    if (m == baselines::kMethodPrefixTuning) return eval::Controller::static_prefix(m, art.matrix<float>("prefix.p0"));
    if (m == baselines::kMethodContrastive) return eval::Controller::static_prefix(m, art.matrix<float>("prefix.safe"));
    if (m == baselines::kMethodClsGen) return eval::Controller::clsgen(baselines::clsgen_from<float>(art));
    return eval::Controller::hierarchical(m, lm, prefix::ours_from_container<float>(art));
  }

  RunConfig cfg_;
  RunPaths paths_;
  bool force_;
  std::ostream& log_;
  std::optional<corpus::Corpus> corpus_;
  std::string base_file_hash_;
};

}  // namespace ctxdetox::app
