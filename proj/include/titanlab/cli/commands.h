// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "titanlab/simruntime/runtime.h"

namespace titanlab::cli {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;   // bad configuration or arguments
inline constexpr int kExitRuntime = 2;  // a rank failed; the recorder dump is written

// Trains the job and writes report.json and report.txt into job.dump_folder.
// Metrics go to metrics.path as JSON lines, or to `out` when it is empty.
int run_train(const std::filesystem::path& config, const std::vector<std::string>& overrides, std::ostream& out,
              std::ostream& err, const sim::WorldOptions& options = {});

// Reads a recorder dump and prints the hang analysis.
int run_analyze_trace(const std::filesystem::path& dump, std::ostream& out, std::ostream& err);

// Reshards a checkpoint into `layout`, e.g. "dp_shard=2,tp=2". Degrees not
// named are 1. The global batch of the source job is kept.
int run_convert_checkpoint(const std::filesystem::path& src, const std::filesystem::path& dst,
                           const std::string& layout, std::ostream& out, std::ostream& err);

struct ScheduleArgs {
  std::string schedule = "1f1b";
  int64_t stages = 2;  // pipeline ranks
  int64_t microbatches = 4;
  int64_t stages_per_rank = 1;
};

// Prints the schedule, whether it validates, and its bubble fraction.
int run_schedule(const ScheduleArgs& args, std::ostream& out, std::ostream& err);

// Prints the analytic memory and step-time estimate for a config.
int run_estimate(const std::filesystem::path& config, const std::vector<std::string>& overrides, bool json,
                 std::ostream& out, std::ostream& err);

}  // namespace titanlab::cli
