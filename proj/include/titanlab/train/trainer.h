// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "titanlab/checkpoint/checkpoint.h"
#include "titanlab/dataloader/dataloader.h"
#include "titanlab/dtensor/dtensor.h"
#include "titanlab/model/model.h"
#include "titanlab/parallelize/model_part.h"
#include "titanlab/pipeline/pipeline.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::train {

struct CheckpointOptions {
  int64_t interval = 0;  // 0: never
  bool async = false;
  std::filesystem::path dir;          // step_<n> subdirectories are written here
  std::filesystem::path resume_from;  // a step directory to load before training
};

struct TrainConfig {
  model::ModelConfig model;
  par::PartConfig part;          // part.dims is the resolved layout
  pp::PipelineConfig pipeline;   // degree must equal part.dims.pp
  data::TokenSource source;
  int64_t local_batch = 1;       // rows per data-parallel rank
  int64_t steps = 1;
  model::SgdConfig sgd{0.05, 0.9};
  uint64_t seed = 0;
  int64_t log_every = 10;
  CheckpointOptions checkpoint;

  int64_t global_batch() const { return local_batch * part.dims.dp(); }
  // Split points default to an even split into pp * stages-per-rank stages.
  pp::PipelineConfig resolved_pipeline() const;
  void validate() const;
};

struct StepMetrics {
  int64_t step = 0;  // 1-based
  double loss = 0.0;
  int64_t tokens = 0;  // tokens in the global batch
  sim::CostLedger ledger;  // rank 0
};

// One rank's trainer: its model parts, optimizer and loader.
class RankTrainer {
 public:
  RankTrainer(sim::RankContext& ctx, const TrainConfig& cfg, const model::MetaModel& meta);
  ~RankTrainer();

  // Runs one optimizer step; the loss is valid on ranks holding the last stage.
  pp::StepOutput step();
  int64_t steps_done() const { return loader_.cursor; }

  // Parameters and optimizer momentum as DTensors ("optim.<fqn>.momentum").
  std::map<std::string, dt::DTensor> state() const;
  void load_state(const std::map<std::string, dt::DTensor>& state, int64_t cursor);
  // Collective. With `saver` the write happens in the background.
  void save_checkpoint(const std::filesystem::path& dir, ckpt::AsyncSaver* saver = nullptr);
  // Loads parameters, momentum and the loader cursor under this trainer's layout.
  void load_checkpoint(const std::filesystem::path& dir);
  const data::LoaderState& loader() const { return loader_; }
  std::vector<par::ModelPart*> parts();
  // Every parameter of this rank's stages gathered to a full tensor (collective).
  std::map<std::string, Tensor> full_params();

 private:
  sim::RankContext& ctx_;
  const TrainConfig& cfg_;
  const model::MetaModel& meta_;
  sim::DeviceMesh mesh_;
  pp::PipelineSchedule schedule_;
  int64_t pp_rank_ = 0;
  std::vector<int> pp_peers_;
  std::map<int64_t, std::unique_ptr<par::ModelPart>> parts_;
  model::Sgd opt_;
  data::LoaderState loader_;
};

struct TrainResult {
  int64_t first_step = 0;                  // steps already done when training started
  std::vector<double> losses;              // one per step run
  std::map<std::string, Tensor> params;    // full tensors after the last step
  std::vector<sim::CostLedger> ledgers;    // per rank
  std::vector<std::filesystem::path> checkpoints;
};

// Spawns the simulated world and trains until cfg.steps steps are done in
// total; a resumed run continues from its checkpoint's step. `on_step` runs
// on rank 0's thread with rank 0's ledger every log_every steps and after
// the last step.
TrainResult train(const TrainConfig& cfg, const std::function<void(const StepMetrics&)>& on_step = {},
                  const sim::WorldOptions& options = {});

// JSON description of the layout stored in checkpoint metadata.
nlohmann::json layout_json(const TrainConfig& cfg);

// Single-rank dense reference over the same data stream.
TrainResult train_oracle(const TrainConfig& cfg);

}  // namespace titanlab::train
