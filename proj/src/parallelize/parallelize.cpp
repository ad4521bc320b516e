// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/parallelize/parallelize.h"

#include <algorithm>
#include <cmath>

#include "titanlab/ndtensor/float8.h"
#include "titanlab/ndtensor/ops.h"

namespace titanlab::par {

void ParallelDims::validate() const {
  for (auto [name, v] : {std::pair{"pp", pp}, {"dp_replicate", dp_replicate}, {"dp_shard", dp_shard},
                         {"cp", cp}, {"tp", tp}}) {
    if (v < 1) throw ParallelError(std::string(name) + " degree must be >= 1, got " + std::to_string(v));
  }
}

std::string ParallelDims::str() const {
  return "pp=" + std::to_string(pp) + " dp_replicate=" + std::to_string(dp_replicate) +
         " dp_shard=" + std::to_string(dp_shard) + " cp=" + std::to_string(cp) + " tp=" + std::to_string(tp);
}

ParallelDims resolve_dims(int64_t world, int64_t dp_shard, int64_t dp_replicate, int64_t tp, int64_t pp,
                          int64_t cp) {
  ParallelDims d{pp, dp_replicate, dp_shard, cp, tp};
  const int64_t others = dp_replicate * tp * pp * cp;
  if (dp_shard == -1) {
    if (others < 1 || world % others != 0) {
      throw ParallelError("dp_replicate*tp*pp*cp = " + std::to_string(others) + " does not divide world size " +
                          std::to_string(world));
    }
    d.dp_shard = world / others;
  }
  d.validate();
  if (d.world() != world) {
    throw ParallelError("dp_shard*dp_replicate*tp*pp*cp = " + std::to_string(d.world()) +
                        " does not match world size " + std::to_string(world));
  }
  return d;
}

sim::DeviceMesh build_world_mesh(const ParallelDims& dims) {
  dims.validate();
  return sim::device_mesh({dims.pp, dims.dp_replicate, dims.dp_shard, dims.cp, dims.tp},
                          {"pp", "dp_replicate", "dp_shard", "cp", "tp"});
}

sim::DeviceMesh param_mesh(const sim::DeviceMesh& world, int rank) {
  return world.flatten({"dp_shard", "cp"}, "dp_shard_cp").submesh(rank, {"dp_replicate", "dp_shard_cp", "tp"});
}

void validate_data_parallel(const DataParallelConfig& cfg, int64_t dp_extent) {
  if (cfg.replicate_degree < 1) throw ParallelError("data_parallel_replicate_degree must be >= 1");
  const int64_t shard = cfg.shard_degree == -1 ? dp_extent / cfg.replicate_degree : cfg.shard_degree;
  if (shard < 1 || dp_extent % (shard * cfg.replicate_degree) != 0) {
    throw ParallelError("data parallel degrees " + std::to_string(cfg.replicate_degree) + "x" +
                        std::to_string(shard) + " do not divide the data-parallel mesh extent " +
                        std::to_string(dp_extent));
  }
}

// ---- tensor parallel ----------------------------------------------------------

const char* tp_style_name(TPStyle style) {
  switch (style) {
    case TPStyle::kColwise: return "colwise";
    case TPStyle::kRowwise: return "rowwise";
    case TPStyle::kSequenceParallel: return "sequence_parallel";
    case TPStyle::kPrepareInput: return "prepare_input";
  }
  return "?";
}

namespace {

std::string module_of(const std::string& param_fqn) {
  const std::string suffix = ".weight";
  if (param_fqn.size() > suffix.size() && param_fqn.ends_with(suffix)) {
    return param_fqn.substr(0, param_fqn.size() - suffix.size());
  }
  return param_fqn;
}

// The only layout the executor implements.
std::map<std::string, TPStyle> expected_styles(const model::MetaModel& meta) {
  std::map<std::string, TPStyle> s;
  s["tok_embeddings"] = TPStyle::kRowwise;
  for (int64_t l = 0; l < meta.config().n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    s[p + "attention_norm"] = TPStyle::kSequenceParallel;
    s[p + "attention"] = TPStyle::kPrepareInput;
    s[p + "attention.wq"] = TPStyle::kColwise;
    s[p + "attention.wk"] = TPStyle::kColwise;
    s[p + "attention.wv"] = TPStyle::kColwise;
    s[p + "attention.wo"] = TPStyle::kRowwise;
    s[p + "ffn_norm"] = TPStyle::kSequenceParallel;
    s[p + "feed_forward"] = TPStyle::kPrepareInput;
    s[p + "feed_forward.w1"] = TPStyle::kColwise;
    s[p + "feed_forward.w2"] = TPStyle::kRowwise;
    s[p + "feed_forward.w3"] = TPStyle::kColwise;
  }
  s["norm"] = TPStyle::kSequenceParallel;
  s["output"] = TPStyle::kColwise;
  return s;
}

}  // namespace

TPPlan default_tp_plan(const model::MetaModel& meta) { return TPPlan{expected_styles(meta)}; }

void validate_tp_plan(const TPPlan& plan, const model::MetaModel& meta, int64_t tp_degree) {
  const auto& cfg = meta.config();
  if (tp_degree < 1) throw ParallelError("tensor parallel degree must be >= 1");
  if (cfg.n_heads % tp_degree != 0) {
    throw ParallelError("n_heads " + std::to_string(cfg.n_heads) + " not divisible by tp degree " +
                        std::to_string(tp_degree));
  }
  if (cfg.ffn_dim() % tp_degree != 0 || cfg.vocab_size % tp_degree != 0) {
    throw ParallelError("ffn dim " + std::to_string(cfg.ffn_dim()) + " and vocab " +
                        std::to_string(cfg.vocab_size) + " must divide by tp degree " + std::to_string(tp_degree));
  }
  for (const auto& [fqn, style] : expected_styles(meta)) {
    auto it = plan.styles.find(fqn);
    if (it == plan.styles.end()) throw ParallelError("tp plan has no entry for " + fqn);
    if (it->second != style) {
      throw ParallelError("tp plan style " + std::string(tp_style_name(it->second)) + " for " + fqn +
                          " is not supported (expected " + tp_style_name(style) + ")");
    }
  }
  for (const auto& [fqn, style] : plan.styles) {
    if (!meta.contains(fqn) && style != TPStyle::kPrepareInput) throw ParallelError("tp plan names unknown module " + fqn);
  }
}

dt::Placement tp_placement(const TPPlan& plan, const std::string& param_fqn, int64_t tp_degree) {
  if (tp_degree == 1) return dt::Placement::replicate();
  auto it = plan.styles.find(module_of(param_fqn));
  if (it == plan.styles.end()) throw ParallelError("tp plan has no entry for " + param_fqn);
  switch (it->second) {
    case TPStyle::kColwise: return dt::Placement::shard(1);
    case TPStyle::kRowwise: return dt::Placement::shard(0);
    default: return dt::Placement::replicate();
  }
}

int64_t fsdp_dim(const dt::Placement& tp) { return tp.is_shard(0) ? 1 : 0; }

dt::Placements param_placements(const TPPlan& plan, const std::string& param_fqn, int64_t tp_degree) {
  const dt::Placement t = tp_placement(plan, param_fqn, tp_degree);
  return {dt::Placement::replicate(), dt::Placement::shard(fsdp_dim(t)), t};
}

// ---- activation checkpointing -------------------------------------------------

ACMode ac_mode_from_name(const std::string& name) {
  if (name == "none") return ACMode::kNone;
  if (name == "full") return ACMode::kFull;
  if (name == "selective") return ACMode::kSelective;
  throw ParallelError("unknown activation checkpoint mode '" + name + "' (expected none, selective or full)");
}

const char* ac_mode_name(ACMode mode) {
  switch (mode) {
    case ACMode::kNone: return "none";
    case ACMode::kFull: return "full";
    case ACMode::kSelective: return "selective";
  }
  return "?";
}

namespace {

int64_t layer_interval(const std::string& type) {
  size_t pos = 0;
  int64_t k = 0;
  try {
    k = std::stoll(type, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != type.size() || pos == 0) {
    throw ParallelError("selective_ac_type must be 'op' or a positive integer, got '" + type + "'");
  }
  if (k < 1) throw ParallelError("selective_ac_type layer interval must be >= 1, got " + type);
  return k;
}

}  // namespace

void ACConfig::validate() const {
  if (mode == ACMode::kSelective && selective_ac_type != "op") layer_interval(selective_ac_type);
}

bool ACConfig::checkpoints_layer(int64_t layer) const {
  if (mode == ACMode::kFull) return true;
  if (mode != ACMode::kSelective || selective_ac_type == "op") return false;
  return layer % layer_interval(selective_ac_type) == 0;
}

// ---- float8 -----------------------------------------------------------------------

Float8Strategy float8_strategy_from_name(const std::string& name) {
  if (name == "dynamic") return Float8Strategy::kDynamic;
  if (name == "delayed") return Float8Strategy::kDelayed;
  if (name == "static") return Float8Strategy::kStatic;
  throw ParallelError("unknown float8 strategy '" + name + "' (expected dynamic, delayed or static)");
}

const char* float8_strategy_name(Float8Strategy s) {
  switch (s) {
    case Float8Strategy::kDynamic: return "dynamic";
    case Float8Strategy::kDelayed: return "delayed";
    case Float8Strategy::kStatic: return "static";
  }
  return "?";
}

void Float8Config::validate() const {
  if (strategy == Float8Strategy::kStatic && !(static_scale > 0.0 && std::isfinite(static_scale))) {
    throw ParallelError("float8 static scale must be positive and finite");
  }
  if (amax_history_len < 1) throw ParallelError("float8 amax history length must be >= 1");
}

double amax(const Tensor& x) {
  double m = 0.0;
  for (double v : x.data()) m = std::max(m, std::abs(v));
  return m;
}

double scale_for_amax(double a) { return a > 0.0 ? fp8::e4m3_max() / a : 1.0; }

Tensor quantize_dequantize(const Tensor& x, double scale) {
  Tensor out(x.shape(), x.dtype());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (size_t i = 0; i < xd.size(); ++i) od[i] = round_to(x.dtype(), fp8::quantize_e4m3(xd[i] * scale) / scale);
  return out;
}

double Float8Scaler::scale(const std::string& key, double a) {
  switch (cfg_.strategy) {
    case Float8Strategy::kDynamic: return scale_for_amax(a);
    case Float8Strategy::kStatic: return cfg_.static_scale;
    case Float8Strategy::kDelayed: break;
  }
  auto& h = history_[key];
  if (h.empty()) {
    h.push_back(a);
    return scale_for_amax(a);
  }
  const double m = *std::max_element(h.begin(), h.end());
  h.push_back(a);
  while (static_cast<int64_t>(h.size()) > cfg_.amax_history_len) h.pop_front();
  return scale_for_amax(m);
}

namespace {

Tensor to_e4m3_grid(const Tensor& x, double scale) {
  Tensor out(x.shape(), DType::kF32);
  auto od = out.mutable_data();
  auto xd = x.data();
  for (size_t i = 0; i < xd.size(); ++i) od[i] = fp8::quantize_e4m3(xd[i] * scale);
  return out;
}

}  // namespace

Tensor float8_linear(const Tensor& x, const Tensor& w, double x_scale, double w_scale) {
  if (!(x_scale > 0.0) || !(w_scale > 0.0)) throw std::invalid_argument("float8 scales must be positive");
  Tensor y = ops::linear(to_e4m3_grid(x, x_scale), to_e4m3_grid(w, w_scale));
  return ops::scale(y, 1.0 / (x_scale * w_scale)).to(x.dtype());
}

Tensor float8_linear(const Tensor& x, const Tensor& w, Float8Scaler& scaler, const std::string& key) {
  const double sx = scaler.scale(key + ":x", amax(x));
  const double sw = scaler.scale(key + ":w", amax(w));
  return float8_linear(x, w, sx, sw);
}

// ---- loss parallel ----------------------------------------------------------------

LossParallelOut loss_parallel_ce(sim::RankContext& ctx, const sim::Group& group, const Tensor& logits_local,
                                 std::span<const int64_t> targets, int64_t vocab_offset, int64_t vocab_size,
                                 double grad_scale) {
  const int64_t cols = logits_local.dim(-1);
  const int64_t rows = logits_local.numel() / cols;
  if (static_cast<int64_t>(targets.size()) != rows) {
    throw ShapeError("loss_parallel_ce: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  for (int64_t t : targets) {
    if (t < 0 || t >= vocab_size) {
      throw std::out_of_range("target " + std::to_string(t) + " outside vocab " + std::to_string(vocab_size));
    }
  }
  ctx.ledger().max_logit_bytes = std::max(ctx.ledger().max_logit_bytes, logits_local.nbytes());
  auto x = logits_local.data();

  Tensor local_max({rows});
  for (int64_t r = 0; r < rows; ++r) {
    double m = -INFINITY;
    for (int64_t c = 0; c < cols; ++c) m = std::max(m, x[r * cols + c]);
    local_max[r] = m;
  }
  const Tensor gmax = ctx.all_reduce(group, local_max, sim::ReduceOp::kMax, "loss_parallel.max");

  // exp-sums and the owner's shifted target logit travel in one reduction
  Tensor partial({2, rows});
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < cols; ++c) s += std::exp(x[r * cols + c] - gmax[r]);
    partial[r] = s;
    const int64_t t = targets[r] - vocab_offset;
    if (t >= 0 && t < cols) partial[rows + r] = x[r * cols + t] - gmax[r];
  }
  const Tensor sums = ctx.all_reduce(group, partial, sim::ReduceOp::kSum, "loss_parallel.sum");

  LossParallelOut out;
  out.d_logits = Tensor(logits_local.shape(), logits_local.dtype());
  auto d = out.d_logits.mutable_data();
  double total = 0.0;
  const double g = grad_scale / static_cast<double>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const double z = sums[r];
    total += std::log(z) - sums[rows + r];
    for (int64_t c = 0; c < cols; ++c) d[r * cols + c] = std::exp(x[r * cols + c] - gmax[r]) / z * g;
    const int64_t t = targets[r] - vocab_offset;
    if (t >= 0 && t < cols) d[r * cols + t] -= g;
  }
  out.d_logits.round_in_place();
  out.loss = total / static_cast<double>(rows);
  if (!std::isfinite(out.loss)) throw NonFiniteError("loss is not finite");
  return out;
}

// ---- chunked TP ---------------------------------------------------------------------

namespace {

struct ChunkFlags {
  sim::RankContext& ctx;
  ChunkFlags(sim::RankContext& c, bool chunked) : ctx(c) { ctx.set_chunked(chunked); }
  ~ChunkFlags() {
    ctx.set_chunked(false);
    ctx.set_overlappable(false);
  }
};

Shape with_dim(Shape s, int64_t dim, int64_t v) {
  s[static_cast<size_t>(dim)] = v;
  return s;
}

}  // namespace

GatherMatmulOut all_gather_matmul(sim::RankContext& ctx, const sim::Group& group, const Tensor& x_shard,
                                  size_t outputs, const PieceLinear& fn, int64_t seq_dim, int64_t chunks,
                                  std::string_view label) {
  if (chunks < 1) throw std::invalid_argument("chunk count must be >= 1");
  const auto tp = static_cast<int64_t>(group.size());
  const int64_t len = x_shard.dim(seq_dim);
  GatherMatmulOut out;
  out.gathered = Tensor(with_dim(x_shard.shape(), seq_dim, len * tp), x_shard.dtype());
  out.outs.resize(outputs);
  ChunkFlags flags(ctx, chunks > 1);
  for (int64_t c = 0; c < chunks; ++c) {
    const auto range = dt::chunk_range(len, chunks, c);
    if (range.length == 0) continue;
    ctx.set_overlappable(c > 0);
    auto parts = ctx.all_gather_list(group, ops::narrow(x_shard, seq_dim, range.offset, range.length), label);
    for (int64_t r = 0; r < tp; ++r) {
      const int64_t at = r * len + range.offset;
      ops::narrow_assign(out.gathered, seq_dim, at, parts[r]);
      for (size_t i = 0; i < outputs; ++i) {
        Tensor y = fn(parts[r], i);
        if (out.outs[i].numel() == 0) {
          out.outs[i] = Tensor(with_dim(y.shape(), seq_dim, len * tp), y.dtype());
        }
        ops::narrow_assign(out.outs[i], seq_dim, at, y);
      }
    }
  }
  return out;
}

GatherMatmulOut all_gather_matmul(sim::RankContext& ctx, const sim::Group& group, const Tensor& x_shard,
                                  std::span<const Tensor> ws, int64_t seq_dim, int64_t chunks,
                                  std::string_view label) {
  return all_gather_matmul(
      ctx, group, x_shard, ws.size(), [&](const Tensor& p, size_t i) { return ops::linear(p, ws[i]); }, seq_dim,
      chunks, label);
}

Tensor matmul_reduce_scatter(sim::RankContext& ctx, const sim::Group& group, const Tensor& x,
                             const std::function<Tensor(const Tensor&)>& fn, int64_t seq_dim, int64_t chunks,
                             std::string_view label) {
  if (chunks < 1) throw std::invalid_argument("chunk count must be >= 1");
  const auto tp = static_cast<int64_t>(group.size());
  if (x.dim(seq_dim) % tp != 0) {
    throw ShapeError("matmul_reduce_scatter: dim " + std::to_string(x.dim(seq_dim)) + " not divisible by " +
                     std::to_string(tp));
  }
  const int64_t len = x.dim(seq_dim) / tp;
  Tensor out;
  ChunkFlags flags(ctx, chunks > 1);
  for (int64_t c = 0; c < chunks; ++c) {
    const auto range = dt::chunk_range(len, chunks, c);
    if (range.length == 0) continue;
    ctx.set_overlappable(c > 0);
    std::vector<Tensor> pieces;
    for (int64_t r = 0; r < tp; ++r) pieces.push_back(fn(ops::narrow(x, seq_dim, r * len + range.offset, range.length)));
    auto mine = ctx.reduce_scatter_list(group, pieces, sim::ReduceOp::kSum, label);
    if (out.numel() == 0) out = Tensor(with_dim(mine.at(0).shape(), seq_dim, len), mine[0].dtype());
    ops::narrow_assign(out, seq_dim, range.offset, mine.at(0));
  }
  return out;
}

Tensor matmul_reduce_scatter(sim::RankContext& ctx, const sim::Group& group, const Tensor& x, const Tensor& w,
                             int64_t seq_dim, int64_t chunks, std::string_view label) {
  return matmul_reduce_scatter(
      ctx, group, x, [&](const Tensor& p) { return ops::linear(p, w); }, seq_dim, chunks, label);
}

dt::DTensor chunked_tp_matmul(sim::RankContext& ctx, const dt::DTensor& x, const dt::DTensor& w,
                              dt::MatmulStyle style, int64_t chunks) {
  if (chunks < 1) throw std::invalid_argument("chunk count must be >= 1");
  if (x.mesh().ndim() != 1 || !(x.mesh() == w.mesh())) {
    throw dt::PlacementError("chunked_tp_matmul needs both operands on the same 1-D mesh");
  }
  const sim::Group group = x.mesh().ranks();
  const auto tp = static_cast<int64_t>(group.size());
  const int64_t m = x.global_shape()[0], n = w.global_shape()[1];
  if (style == dt::MatmulStyle::kColwise) {
    if (!x.placements()[0].is_shard(0) || !w.placements()[0].is_shard(1) || m % tp != 0) {
      throw dt::PlacementError("colwise chunked matmul needs x Shard(0) (even rows) and w Shard(1), got " +
                               dt::placements_str(x.placements()) + " / " + dt::placements_str(w.placements()));
    }
    const Tensor ws[] = {w.local()};
    auto r = all_gather_matmul(ctx, group, x.local(), ws, 0, chunks, "tp.chunked_all_gather");
    return dt::DTensor(std::move(r.outs[0]), x.mesh(), {dt::Placement::shard(1)}, {m, n});
  }
  if (!x.placements()[0].is_shard(1) || !w.placements()[0].is_shard(0) || m % tp != 0) {
    throw dt::PlacementError("rowwise chunked matmul needs x Shard(1) and w Shard(0) (even rows), got " +
                             dt::placements_str(x.placements()) + " / " + dt::placements_str(w.placements()));
  }
  Tensor out = matmul_reduce_scatter(ctx, group, x.local(), w.local(), 0, chunks, "tp.chunked_reduce_scatter");
  return dt::DTensor(std::move(out), x.mesh(), {dt::Placement::shard(0)}, {m, n});
}

Tensor gather_seq(sim::RankContext& ctx, const sim::Group& group, const Tensor& x, int64_t seq_dim,
                  std::string_view label) {
  if (group.size() == 1) return x;
  auto parts = ctx.all_gather_list(group, x, label);
  return ops::cat(parts, seq_dim);
}

Tensor reduce_scatter_seq(sim::RankContext& ctx, const sim::Group& group, const Tensor& x, int64_t seq_dim,
                          std::string_view label) {
  const auto tp = static_cast<int64_t>(group.size());
  if (tp == 1) return x;
  if (x.dim(seq_dim) % tp != 0) {
    throw ShapeError("reduce_scatter_seq: dim " + std::to_string(x.dim(seq_dim)) + " not divisible by " +
                     std::to_string(tp));
  }
  const int64_t len = x.dim(seq_dim) / tp;
  std::vector<Tensor> pieces;
  for (int64_t r = 0; r < tp; ++r) pieces.push_back(ops::narrow(x, seq_dim, r * len, len));
  return ctx.reduce_scatter_list(group, pieces, sim::ReduceOp::kSum, label).at(0);
}

}  // namespace titanlab::par
