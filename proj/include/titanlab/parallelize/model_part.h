// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "titanlab/contextparallel/contextparallel.h"
#include "titanlab/dtensor/dtensor.h"
#include "titanlab/model/model.h"
#include "titanlab/parallelize/parallelize.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::par {

// Everything a rank needs to know about how its model part is parallelized.
struct PartConfig {
  ParallelDims dims;
  DataParallelConfig dp;
  TPPlan plan;  // empty: default plan
  bool loss_parallel = false;
  int64_t tp_chunks = 1;  // > 1: chunked (async) TP in the forward pass
  ACConfig ac;
  Float8Config float8;
  cp::RotateMethod cp_method = cp::RotateMethod::kAllGather;
  uint64_t seed = 0;
};

// Contiguous slice of the model run by one pipeline stage.
struct StageSpec {
  int64_t first_layer = 0;
  int64_t last_layer = 0;  // exclusive
  bool has_embedding = false;
  bool has_head = false;

  std::vector<std::string> fqns(const model::MetaModel& meta) const;
  bool operator==(const StageSpec&) const = default;
};

StageSpec whole_model(const model::MetaModel& meta);

// One rank's share of one pipeline stage: owns its parameter shards, runs
// forward / input-backward / weight-backward per microbatch, and reduces
// gradients across data-parallel and context-parallel peers at step end.
class ModelPart {
 public:
  ModelPart(sim::RankContext& ctx, const model::MetaModel& meta, const sim::DeviceMesh& world_mesh, PartConfig cfg,
            StageSpec stage);
  ~ModelPart();
  ModelPart(const ModelPart&) = delete;
  ModelPart& operator=(const ModelPart&) = delete;

  const StageSpec& stage() const { return stage_; }
  const PartConfig& config() const { return cfg_; }
  const model::MetaModel& meta() const { return meta_; }

  // `local_batch` holds this data-parallel rank's rows at full sequence length.
  void begin_step(const model::Batch& local_batch, int64_t microbatches);
  // Returns the activation for the next stage; empty on the last stage, which
  // computes the microbatch loss instead. `input` is ignored on the first stage.
  Tensor forward(int64_t mb, const Tensor& input = {});
  // Returns the gradient for the previous stage (empty on the first stage).
  // `d_out` is ignored on the last stage. Weight gradients are deferred.
  Tensor backward_input(int64_t mb, const Tensor& d_out = {});
  void backward_weight(int64_t mb);
  Tensor backward(int64_t mb, const Tensor& d_out = {});
  // Reduces gradients (and, on the last stage, losses) across dp and cp.
  void finish_step();

  // Last stage only, valid after finish_step: global mean loss of the step.
  double step_loss() const { return step_loss_; }
  const std::vector<double>& microbatch_losses() const { return mb_losses_; }

  void optimizer_step(model::Sgd& opt);

  std::map<std::string, dt::DTensor>& params() { return params_; }
  const std::map<std::string, dt::DTensor>& params() const { return params_; }
  const std::map<std::string, dt::DTensor>& grads() const { return grads_; }
  // Shape of the activation exchanged with neighbouring stages.
  Shape boundary_shape(int64_t rows) const;
  DType compute_dtype() const { return cfg_.dp.param_dtype; }
  const Float8Scaler& float8_scaler() const { return scaler_; }

 private:
  struct Unit;
  struct BlockState;
  struct Saved;
  struct Micro;

  const Tensor& W(const std::string& fqn) const;
  // Shape of this rank's parameter shard once FSDP has gathered it.
  Shape unsharded_shape(const std::string& fqn) const;
  void unshard(const Unit& u);
  void reshard(const Unit& u);
  bool zero3() const;
  void add_grad(const std::string& fqn, const Tensor& g);
  Tensor lin(const Tensor& x, const std::string& fqn, const std::map<std::string, std::pair<double, double>>& sc) const;
  void decide_scales(std::map<std::string, std::pair<double, double>>& sc, const Tensor& x,
                     const std::vector<std::string>& fqns);

  Tensor embed_forward(Micro& m);
  std::shared_ptr<BlockState> block_forward(int64_t layer, const Tensor& x, const Saved* recompute);
  int64_t block_bytes(const BlockState& st) const;
  Tensor head_forward(Micro& m, const Tensor& x);
  Tensor head_backward(Micro& m);
  Tensor block_backward(Micro& m, int64_t layer, const std::shared_ptr<BlockState>& st, const Tensor& d_out);
  void embed_backward(Micro& m, const Tensor& d_out);

  sim::RankContext& ctx_;
  const model::MetaModel& meta_;
  PartConfig cfg_;
  StageSpec stage_;
  sim::DeviceMesh world_;
  sim::DeviceMesh pmesh_;
  sim::Group tp_group_, cp_group_, loss_group_;
  int64_t tp_rank_ = 0, cp_rank_ = 0;
  int64_t seq_local_ = 0;
  std::vector<int64_t> positions_;
  Tensor freqs_local_;
  std::vector<Unit> units_;

  std::map<std::string, dt::DTensor> params_;
  std::map<std::string, Tensor> gathered_;
  std::map<std::string, Tensor> grad_acc_;
  std::map<std::string, dt::DTensor> grads_;
  Float8Scaler scaler_;

  model::Batch batch_;
  int64_t microbatches_ = 1;
  std::map<int64_t, std::unique_ptr<Micro>> micro_;
  std::vector<double> mb_losses_;
  double step_loss_ = 0.0;
  int64_t grad_bytes_ = 0, optimizer_bytes_ = 0;
};

}  // namespace titanlab::par
