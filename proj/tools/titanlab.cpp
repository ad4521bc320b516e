// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "titanlab/cli/commands.h"

namespace cli = titanlab::cli;

int main(int argc, char** argv) {
  CLI::App app{"titanlab: simulated distributed training"};
  app.require_subcommand(1);

  std::string config;
  auto* train = app.add_subcommand("train", "train a job; extra --section.key=value flags override the config");
  train->add_option("--config", config, "TOML job config");
  train->allow_extras();

  std::string dump;
  auto* analyze = app.add_subcommand("analyze-trace", "report stuck collectives in a recorder dump");
  analyze->add_option("dump", dump, "recorder dump (JSON lines)")->required();

  std::string src, dst, layout;
  auto* convert = app.add_subcommand("convert-checkpoint", "reshard a checkpoint offline");
  convert->add_option("src", src, "checkpoint directory")->required();
  convert->add_option("dst", dst, "output directory")->required();
  convert->add_option("--layout", layout, "target degrees, e.g. dp_shard=2,tp=2")->required();

  cli::ScheduleArgs sargs;
  auto* schedule = app.add_subcommand("schedule", "print a pipeline schedule and its bubble");
  schedule->add_option("--schedule", sargs.schedule, "gpipe, 1f1b, interleaved_1f1b or zero_bubble");
  schedule->add_option("--stages", sargs.stages, "pipeline ranks");
  schedule->add_option("--microbatches", sargs.microbatches, "microbatches per step");
  schedule->add_option("--stages-per-rank", sargs.stages_per_rank, "virtual stages per rank");

  bool as_json = false;
  auto* estimate = app.add_subcommand("estimate", "analytic memory and step time for a config");
  estimate->add_option("--config", config, "TOML job config");
  estimate->add_flag("--json", as_json, "print JSON");
  estimate->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitConfig;
  }

  if (*train) return cli::run_train(config, train->remaining(), std::cout, std::cerr);
  if (*analyze) return cli::run_analyze_trace(dump, std::cout, std::cerr);
  if (*convert) return cli::run_convert_checkpoint(src, dst, layout, std::cout, std::cerr);
  if (*schedule) return cli::run_schedule(sargs, std::cout, std::cerr);
  return cli::run_estimate(config, estimate->remaining(), as_json, std::cout, std::cerr);
}
