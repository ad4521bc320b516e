// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "titanlab/parallelize/model_part.h"
#include "titanlab/pipeline/pipeline.h"
#include "titanlab/simruntime/ledger.h"
#include "titanlab/train/trainer.h"

namespace titanlab::perf {

enum class OptimizerKind { kSgdMomentum, kAdam };

// Everything the analytic model needs about a job. Absolute times depend on
// alpha, bandwidth and flops_per_second, which are calibration knobs.
struct ParallelSpec {
  model::ModelConfig model;
  par::ParallelDims dims;
  pp::ScheduleKind schedule = pp::ScheduleKind::k1F1B;
  int64_t microbatches = 1;
  std::vector<std::string> split_points;  // empty: even split
  par::ACConfig ac;
  bool loss_parallel = false;
  int64_t tp_chunks = 1;  // > 1: async TP
  int64_t local_batch = 1;
  int64_t param_bytes = 8;    // stored parameters and optimizer state
  int64_t compute_bytes = 8;  // gathered parameters and activations
  int64_t grad_bytes = 8;
  OptimizerKind optimizer = OptimizerKind::kSgdMomentum;
  double alpha = 1e-6;          // seconds per message
  double bandwidth = 100e9;     // bytes per second per link
  double flops_per_second = 1e14;

  int64_t world() const { return dims.world(); }
  pp::PipelineConfig pipeline() const;
  void validate() const;
};

ParallelSpec spec_from_config(const train::TrainConfig& cfg);

// Bytes per rank.
struct MemoryBreakdown {
  double params_resident = 0;
  double grads = 0;
  double optimizer_state = 0;
  double activations_peak = 0;
  double transient_unsharded = 0;

  double total() const { return params_resident + grads + optimizer_state + activations_peak + transient_unsharded; }
};

// For one pipeline rank, or for the pipeline rank with the largest total.
MemoryBreakdown estimate_memory(const ParallelSpec& spec, std::optional<int64_t> pp_rank = std::nullopt);

// Ring model: (W-1)*alpha + ((W-1)/W) * bytes / bandwidth.
double ring_time(int64_t world, double bytes, double alpha, double bandwidth);

// Seconds per step on the slowest pipeline rank.
struct StepTime {
  double compute = 0;
  double exposed_comm = 0;
  double bubble = 0;
  double total = 0;
  // exposed communication by source: fsdp, tp, cp, pp
  std::map<std::string, double> comm;
  // block TP collectives before any overlap credit
  double tp_block_comm = 0;
  pp::Rational bubble_fraction;
};

StepTime estimate_step_time(const ParallelSpec& spec);

// Smallest dp_shard (powers of two up to max_world) at which the FSDP
// collectives take longer than compute at a fixed per-rank batch.
std::optional<int64_t> fsdp_comm_bound_world(ParallelSpec spec, int64_t max_world = 1 << 20);

struct Report {
  nlohmann::json json;
  std::string text;
};

inline constexpr int kReportSchemaVersion = 1;

Report ledger_report(const train::TrainConfig& cfg, const std::vector<sim::CostLedger>& ledgers);

// The report JSON schema (a JSON Schema subset: type, properties, required,
// items, enum, minimum, const).
const nlohmann::json& report_schema();
// Problems found validating `doc` against `schema`; empty when valid.
std::vector<std::string> validate_json(const nlohmann::json& doc, const nlohmann::json& schema);

}  // namespace titanlab::perf
