// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "titanlab/dtensor/dtensor.h"
#include "titanlab/model/model.h"
#include "titanlab/simruntime/mesh.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::par {

class ParallelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---- mesh -----------------------------------------------------------------

struct ParallelDims {
  int64_t pp = 1;
  int64_t dp_replicate = 1;
  int64_t dp_shard = 1;
  int64_t cp = 1;
  int64_t tp = 1;

  int64_t world() const { return pp * dp_replicate * dp_shard * cp * tp; }
  int64_t dp() const { return dp_replicate * dp_shard; }
  void validate() const;
  std::string str() const;
};

// dp_shard = -1 takes every rank the other degrees leave over.
ParallelDims resolve_dims(int64_t world, int64_t dp_shard, int64_t dp_replicate, int64_t tp, int64_t pp,
                          int64_t cp);

// World mesh with dims (pp, dp_replicate, dp_shard, cp, tp); size-1 dims stay.
sim::DeviceMesh build_world_mesh(const ParallelDims& dims);
// Mesh the parameters of `rank`'s pipeline stage live on: (dp_replicate,
// dp_shard_cp, tp), where dp_shard_cp flattens dp_shard and cp.
sim::DeviceMesh param_mesh(const sim::DeviceMesh& world, int rank);

// ---- data parallel ----------------------------------------------------------

enum class ReshardPolicy { kDefault, kAlways, kNever };

struct DataParallelConfig {
  int64_t shard_degree = -1;
  int64_t replicate_degree = 1;
  DType param_dtype = DType::kF64;   // compute dtype of gathered parameters
  DType reduce_dtype = DType::kF64;  // gradient reduction dtype
  // kDefault: reshard after forward (ZeRO-3) unless pipelining (ZeRO-2).
  ReshardPolicy reshard_after_forward = ReshardPolicy::kDefault;
};

void validate_data_parallel(const DataParallelConfig& cfg, int64_t dp_extent);

// ---- tensor parallel --------------------------------------------------------

enum class TPStyle { kColwise, kRowwise, kSequenceParallel, kPrepareInput };
const char* tp_style_name(TPStyle style);

// Keyed by module FQN ("layers.0.attention.wq", "layers.0.attention").
struct TPPlan {
  std::map<std::string, TPStyle> styles;
};

TPPlan default_tp_plan(const model::MetaModel& meta);
void validate_tp_plan(const TPPlan& plan, const model::MetaModel& meta, int64_t tp_degree);

// Placement of a parameter on the tp mesh dim.
dt::Placement tp_placement(const TPPlan& plan, const std::string& param_fqn, int64_t tp_degree);
// Tensor dim FSDP shards: 0 unless TP already shards dim 0.
int64_t fsdp_dim(const dt::Placement& tp);
// Placements on param_mesh: [Replicate, Shard(fsdp_dim), tp placement].
dt::Placements param_placements(const TPPlan& plan, const std::string& param_fqn, int64_t tp_degree);

// ---- activation checkpointing ----------------------------------------------

enum class ACMode { kNone, kFull, kSelective };
ACMode ac_mode_from_name(const std::string& name);
const char* ac_mode_name(ACMode mode);

struct ACConfig {
  ACMode mode = ACMode::kNone;
  std::string selective_ac_type = "2";  // "op" or a positive layer interval

  void validate() const;
  bool op_level() const { return mode == ACMode::kSelective && selective_ac_type == "op"; }
  // Whether block `layer` keeps only its input and recomputes the rest.
  bool checkpoints_layer(int64_t layer) const;
};

// ---- float8 -------------------------------------------------------------------

enum class Float8Strategy { kDynamic, kDelayed, kStatic };
Float8Strategy float8_strategy_from_name(const std::string& name);
const char* float8_strategy_name(Float8Strategy s);

struct Float8Config {
  bool enabled = false;
  Float8Strategy strategy = Float8Strategy::kDynamic;
  double static_scale = 1.0;
  int64_t amax_history_len = 16;

  void validate() const;
};

double amax(const Tensor& x);
// E4M3_MAX / amax; an all-zero tensor gets scale 1.
double scale_for_amax(double amax);
// Scales into e4m3, rounds, and scales back.
Tensor quantize_dequantize(const Tensor& x, double scale);

// Per-tensor scale bookkeeping, keyed by call site ("layers.0.attention.wq:x").
class Float8Scaler {
 public:
  explicit Float8Scaler(Float8Config cfg = {}) : cfg_(cfg) {}
  // Scale to use for a tensor whose current amax is `amax`. Delayed scaling
  // uses the history max and appends `amax` afterwards; the history starts
  // with the first observed amax.
  double scale(const std::string& key, double amax);
  const Float8Config& config() const { return cfg_; }
  const std::map<std::string, std::deque<double>>& history() const { return history_; }

 private:
  Float8Config cfg_;
  std::map<std::string, std::deque<double>> history_;
};

// x [..., in] @ w [in, out] with both operands quantized; the product runs in
// F32 and is rescaled by 1/(x_scale*w_scale). Backward is straight-through.
Tensor float8_linear(const Tensor& x, const Tensor& w, double x_scale, double w_scale);
Tensor float8_linear(const Tensor& x, const Tensor& w, Float8Scaler& scaler, const std::string& key);

// ---- loss parallel -----------------------------------------------------------

struct LossParallelOut {
  double loss = 0.0;
  Tensor d_logits;  // local vocab shard, already multiplied by grad_scale
};

// Cross-entropy over logits sharded on the vocab dim: this rank holds columns
// [vocab_offset, vocab_offset + local) of [rows, vocab].
LossParallelOut loss_parallel_ce(sim::RankContext& ctx, const sim::Group& group, const Tensor& logits_local,
                                 std::span<const int64_t> targets, int64_t vocab_offset, int64_t vocab_size,
                                 double grad_scale = 1.0);

// ---- chunked TP ----------------------------------------------------------------

struct GatherMatmulOut {
  Tensor gathered;           // x gathered along seq_dim
  std::vector<Tensor> outs;  // gathered @ w for every w
};

// All-gather of a seq-sharded x fused with colwise matmuls. With chunks > 1
// each rank's shard is split into pieces along seq_dim; pieces after the
// first are marked overlappable in the ledger.
GatherMatmulOut all_gather_matmul(sim::RankContext& ctx, const sim::Group& group, const Tensor& x_shard,
                                  std::span<const Tensor> ws, int64_t seq_dim, int64_t chunks,
                                  std::string_view label = "tp.all_gather");
// Same, with caller-provided row-wise products (float8 linears).
using PieceLinear = std::function<Tensor(const Tensor& piece, size_t output)>;
GatherMatmulOut all_gather_matmul(sim::RankContext& ctx, const sim::Group& group, const Tensor& x_shard,
                                  size_t outputs, const PieceLinear& fn, int64_t seq_dim, int64_t chunks,
                                  std::string_view label = "tp.all_gather");
// Rowwise matmul whose partial sums are reduce-scattered along seq_dim.
Tensor matmul_reduce_scatter(sim::RankContext& ctx, const sim::Group& group, const Tensor& x, const Tensor& w,
                             int64_t seq_dim, int64_t chunks, std::string_view label = "tp.reduce_scatter");
Tensor matmul_reduce_scatter(sim::RankContext& ctx, const sim::Group& group, const Tensor& x,
                             const std::function<Tensor(const Tensor&)>& fn, int64_t seq_dim, int64_t chunks,
                             std::string_view label = "tp.reduce_scatter");

// DTensor form over a 1-D mesh. Colwise: x Shard(0) rows, w Shard(1) -> out
// Shard(1). Rowwise: x Shard(1), w Shard(0) -> out Shard(0) rows.
dt::DTensor chunked_tp_matmul(sim::RankContext& ctx, const dt::DTensor& x, const dt::DTensor& w,
                              dt::MatmulStyle style, int64_t chunks);

// Seq-dim gather / reduce-scatter used by sequence parallelism.
Tensor gather_seq(sim::RankContext& ctx, const sim::Group& group, const Tensor& x, int64_t seq_dim,
                  std::string_view label);
Tensor reduce_scatter_seq(sim::RankContext& ctx, const sim::Group& group, const Tensor& x, int64_t seq_dim,
                          std::string_view label);

}  // namespace titanlab::par
