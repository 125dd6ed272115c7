// SPDX-License-Identifier: Apache-2.0
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "cli/commands.hpp"

namespace {

struct Subcommand {
  const char* name;
  const char* help;
};

const Subcommand kCommands[] = {
    {"pretrain", "masked-token pretraining of the backbone"},
    {"train-domain", "train domain adapters on source and unlabeled target data"},
    {"train-task", "train task adapters and a head on top of frozen domain adapters"},
    {"train-joint", "train a single adapter on the mixed task and divergence loss"},
    {"eval", "evaluate a checkpoint set on a labeled split"},
    {"compose", "evaluate a domain adapter composed with a task adapter"},
    {"ablate-layers", "remove adapters from layer spans and report macro-F1"},
    {"sweep-rf", "one full run per reduction factor"},
    {"export-embeddings", "write pooled per-layer representations as CSV"},
    {"synth-gen", "write a synthetic domain-shift dataset"},
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("udapter");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("UDAPTER_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "info") spdlog::set_level(spdlog::level::info);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else throw udapter::ConfigError("UDAPTER_LOG must be one of error, info, debug (got '" + level + "')");
}

}  // namespace

int main(int argc, char** argv) {
  udapter::cli::Options opts;
  for (int i = 0; i < argc; ++i) opts.argv.emplace_back(argv[i]);

  CLI::App app{"udapter: adapters for unsupervised domain adaptation"};
  app.require_subcommand(1);
  std::string config, run_dir, split, data;
  std::uint64_t seed = 0;
  std::size_t seeds = 0;
  std::map<std::string, std::string> ckpt;
  for (const auto& c : kCommands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config, "run config (JSON)");
    sub->add_option("--seed", seed, "run seed (overrides train.seed)");
    sub->add_option("--seeds", seeds, "number of consecutive seeds; artifacts get a .seed<k> suffix");
    sub->add_option("--run-dir", run_dir, "output directory (overrides output.run_dir)");
    sub->add_flag("--overwrite", opts.overwrite, "allow a non-empty run directory");
    for (const char* key : {"backbone", "domain", "task", "head", "joint"}) {
      sub->add_option(std::string("--") + key, ckpt[key], std::string(key) + " checkpoint path ({seed} expands)");
    }
    const std::string name = c.name;
    if (name == "eval" || name == "compose" || name == "ablate-layers" || name == "sweep-rf") {
      sub->add_option("--split", split, "labeled split to evaluate (default target_test)");
      sub->add_option("--data", data, "labeled file to evaluate instead of a configured split");
    }
    if (name == "train-task") sub->add_flag("--task-only", opts.task_only, "train without domain adapters");
    if (name == "ablate-layers") {
      sub->add_option("--spans", opts.spans, "layer spans such as 1-2 3 none")->delimiter(',');
      sub->add_flag("--retrain", opts.retrain, "retrain per span instead of disabling trained adapters");
    }
    if (name == "sweep-rf") sub->add_option("--factors", opts.factors, "reduction factors")->delimiter(',')->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  for (CLI::App* sub : app.get_subcommands()) {
    opts.command = sub->get_name();
    if (sub->count("--config")) opts.config = config;
    if (sub->count("--seed")) opts.seed = seed;
    if (sub->count("--seeds")) opts.seeds = seeds;
    if (sub->count("--run-dir")) opts.run_dir = run_dir;
    if (sub->get_option_no_throw("--split") && sub->count("--split")) opts.split = split;
    if (sub->get_option_no_throw("--data") && sub->count("--data")) opts.data = data;
    for (const auto& [key, value] : ckpt) {
      if (sub->count("--" + key)) opts.checkpoints[key] = value;
    }
  }

  try {
    setup_logging();
    udapter::cli::run_command(opts);
  } catch (const udapter::Error& e) {
    spdlog::error("{}", e.what());
    return udapter::cli::exit_code(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
