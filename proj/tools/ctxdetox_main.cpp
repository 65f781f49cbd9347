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

// ctxdetox command line: corpus | train <target> | eval | compare | all.
//
// Failures print one JSON object to stderr and exit with code 1 (runtime
// error) or 2 (bad invocation or configuration).

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ctxdetox/app/config.hpp"
#include "ctxdetox/app/pipeline.hpp"

namespace {

using ctxdetox::app::Pipeline;
using ctxdetox::app::RunConfig;

enum ExitCode { kOk = 0, kRuntimeError = 1, kUsageError = 2 };

int report_error(std::string_view kind, std::string_view verb, std::string_view message, int code) {
  nlohmann::ordered_json e;
  e["error"] = kind;
  e["command"] = verb;
  e["message"] = message;
  e["exit_code"] = code;
  std::cerr << e.dump() << std::endl;
  return code;
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string run_dir = "run";
  bool force = false;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config_path, "key = value settings file");
  cmd->add_option("--seed", o.seed, "run seed (overrides the file)");
  cmd->add_option("--set", o.sets, "override one setting, KEY=VALUE (repeatable)");
  cmd->add_option("--run-dir", o.run_dir, "run directory")->capture_default_str();
  cmd->add_flag("--force", o.force, "recompute and overwrite existing outputs");
}

RunConfig build_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) ctxdetox::app::apply_config_file(cfg, o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    ctxdetox::require(eq != std::string::npos, "--set expects KEY=VALUE, got '", kv, "'");
    ctxdetox::app::apply_setting(cfg, ctxdetox::app::detail::trim(kv.substr(0, eq)), ctxdetox::app::detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  std::cout.setf(std::ios::unitbuf);
  CLI::App app{"Context-aware detoxification with hierarchical prefixes on a synthetic dialogue corpus"};
  app.require_subcommand(1);
  std::vector<Options> opts(5);
  auto* corpus = app.add_subcommand("corpus", "generate the synthetic corpus");
  auto* train = app.add_subcommand("train", "train the backbone, the reference LM or a control method");
  auto* eval = app.add_subcommand("eval", "generate completions and write one report per method");
  auto* compare = app.add_subcommand("compare", "tabulate the method reports");
  auto* all = app.add_subcommand("all", "run every step in order");
  auto* settings = app.add_subcommand("settings", "list every setting with its default");
  CLI::App* verbs[] = {corpus, train, eval, compare, all};
  for (int i = 0; i < 5; ++i) add_common(verbs[i], opts[i]);
  std::string target;
  train->add_option("target", target, "base | reference | clsgen | ours | prefix_tuning | contrastive | ablation:<no_Ls|no_Lc|no_both>")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", "", e.what(), kUsageError);
  }

  if (settings->parsed()) {
    std::cout << ctxdetox::app::describe();
    return kOk;
  }
  int which = 0;
  while (!verbs[which]->parsed()) ++which;
  const std::string verb = verbs[which]->get_name();

  std::optional<Pipeline> pipeline;
  try {
    pipeline.emplace(build_config(opts[which]), opts[which].run_dir, opts[which].force);
  } catch (const std::exception& e) {
    return report_error("config", verb, e.what(), kUsageError);
  }
  try {
    if (verb == "corpus") pipeline->corpus();
    if (verb == "train") pipeline->train(target);
    if (verb == "eval") pipeline->eval();
    if (verb == "compare") pipeline->compare();
    if (verb == "all") pipeline->all();
  } catch (const std::exception& e) {
    return report_error("runtime", verb, e.what(), kRuntimeError);
  }
  return kOk;
}
