// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "titanlab/model/model.h"
#include "titanlab/parallelize/model_part.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::pp {

class PipelineError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ScheduleKind { kGPipe, k1F1B, kInterleaved1F1B, kZeroBubble };
ScheduleKind schedule_from_name(const std::string& name);
const char* schedule_name(ScheduleKind kind);

struct PipelineConfig {
  int64_t degree = 1;                    // S
  std::vector<std::string> split_points;  // "layers.i" or "norm"
  ScheduleKind schedule = ScheduleKind::k1F1B;
  int64_t microbatches = 1;

  int64_t num_stages() const { return static_cast<int64_t>(split_points.size()) + 1; }
  int64_t stages_per_rank() const { return num_stages() / degree; }
  void validate() const;
};

// Stages in order; stage s runs on pipeline rank s % S.
std::vector<par::StageSpec> split_model(const model::MetaModel& meta, const PipelineConfig& cfg);
int64_t stage_rank(const PipelineConfig& cfg, int64_t stage);
std::vector<int64_t> rank_stages(const PipelineConfig& cfg, int64_t rank);
// Evenly spaced layer splits giving `stages` stages.
std::vector<std::string> even_split_points(int64_t n_layers, int64_t stages);

struct ScheduleAction {
  // kBackward is BackwardInput immediately followed by BackwardWeight.
  enum class Kind { kForward, kBackward, kBackwardInput, kBackwardWeight, kSendAct, kRecvAct, kSendGrad, kRecvGrad };
  Kind kind = Kind::kForward;
  int64_t stage = 0;
  int64_t mb = 0;
  int64_t peer = -1;  // pipeline rank, comm actions only

  bool is_compute() const { return kind <= Kind::kBackwardWeight; }
  bool operator==(const ScheduleAction&) const = default;
  std::string str() const;
};

struct PipelineSchedule {
  ScheduleKind kind = ScheduleKind::k1F1B;
  int64_t degree = 1;
  int64_t stages_per_rank = 1;
  int64_t microbatches = 1;
  double grad_scale = 1.0;  // applied per microbatch loss: 1/m
  std::vector<std::vector<ScheduleAction>> ranks;

  int64_t num_stages() const { return degree * stages_per_rank; }
  int64_t owner(int64_t stage) const { return stage % degree; }
};

// Compute actions only, per pipeline rank.
std::vector<std::vector<ScheduleAction>> build_compute(const PipelineConfig& cfg);
// Adds matched send/recv pairs between stages on different ranks.
PipelineSchedule insert_comms(const PipelineConfig& cfg, std::vector<std::vector<ScheduleAction>> compute);
PipelineSchedule build_schedule(const PipelineConfig& cfg);

struct ScheduleIssue {
  std::string what;
  int64_t rank = -1;
  int64_t index = -1;   // action index on `rank`
  int64_t other = -1;   // second action index involved, if any
};

// First violated constraint, or nothing when the schedule is sound.
std::optional<ScheduleIssue> validate_schedule(const PipelineSchedule& sched);

// "rank R: F(s=1,mb=3)" one action per line.
std::string dump_schedule(const PipelineSchedule& sched);
// Inverse of dump_schedule for the action lists; header fields come from cfg.
PipelineSchedule parse_schedule(const std::string& text, const PipelineConfig& cfg);

struct Rational {
  int64_t num = 0;
  int64_t den = 1;
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Rational& o) const { return num * o.den == o.num * den; }
  bool operator<(const Rational& o) const { return num * o.den < o.num * den; }
  bool operator<=(const Rational& o) const { return !(o < *this); }
};
Rational make_rational(int64_t num, int64_t den);

struct UnitCosts {
  int64_t forward = 1;
  int64_t backward_input = 1;
  int64_t backward_weight = 1;  // a fused backward costs input + weight
};

struct TimelineEntry {
  int64_t rank = 0;
  ScheduleAction action;
  int64_t start = 0;
  int64_t end = 0;
};

struct BubbleReport {
  Rational bubble_fraction;
  int64_t total_time = 0;
  int64_t peak_inflight_microbatches = 0;
  std::vector<TimelineEntry> timeline;
};

// Discrete-event replay of the schedule: sends are free, receives wait for
// their send. bubble_fraction = idle time of the busiest rank / total time.
BubbleReport bubble_analysis(const PipelineSchedule& sched, const UnitCosts& costs = {});

// One pipeline rank's share of a step.
struct StepOutput {
  bool has_loss = false;  // true on ranks owning the last stage
  double loss = 0.0;
  std::vector<double> microbatch_losses;
};

// Runs this rank's action list. `parts` maps every owned stage to its model
// part; `pp_peers[r]` is the world rank of pipeline rank r in our pp group.
// Calls begin_step / finish_step on every part.
StepOutput execute_schedule(sim::RankContext& ctx, const PipelineSchedule& sched, int64_t pp_rank,
                            const std::vector<int>& pp_peers, const std::map<int64_t, par::ModelPart*>& parts,
                            const model::Batch& local_batch);

}  // namespace titanlab::pp
