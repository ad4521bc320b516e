// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/parallelize/model_part.h"

#include <cmath>
#include <numeric>

#include "titanlab/ndtensor/ops.h"

namespace titanlab::par {

using model::block_param_fqns;
using Scales = std::map<std::string, std::pair<double, double>>;

std::vector<std::string> StageSpec::fqns(const model::MetaModel& meta) const {
  std::vector<std::string> out;
  for (const auto& p : meta.params()) {
    const bool take = (p.layer < 0 && has_embedding) || (p.layer >= meta.config().n_layers && has_head) ||
                      (p.layer >= first_layer && p.layer < last_layer);
    if (take) out.push_back(p.fqn);
  }
  return out;
}

StageSpec whole_model(const model::MetaModel& meta) {
  return StageSpec{0, meta.config().n_layers, true, true};
}

// A group of parameters gathered and released together.
struct ModelPart::Unit {
  enum class Kind { kEmbed, kBlock, kHead } kind;
  int64_t layer = 0;
  std::vector<std::string> fqns;
};

// Every interior activation of one transformer block on this rank.
struct ModelPart::BlockState {
  Tensor x, xn, xg, q, k, v, qh, kh, vh, attn, x2, h2n, h2g, a, g, m, w2_out;
  std::vector<double> rstd1, rstd2;
  cp::RingState ring;
  Scales scales;
};

// What a block keeps between forward and backward under the AC policy.
struct ModelPart::Saved {
  std::shared_ptr<BlockState> full;  // set when nothing is recomputed
  Tensor x;
  // op-level save list
  Tensor q, v, a, w2_out;
  ops::AttentionPartial attn;
  bool op_level = false;
  Scales scales;
  int64_t bytes = 0;
};

struct ModelPart::Micro {
  int64_t index = 0;
  model::Batch rows;
  std::vector<int64_t> ids, labels;  // cp-local, [rows, seq_local]
  std::map<int64_t, Saved> blocks;
  Tensor head_x, head_hg, d_logits;
  std::vector<double> head_rstd;
  int64_t bytes = 0;
  double loss = 0.0;
  std::vector<std::function<void()>> weight_jobs;
};

namespace {

Tensor to_heads_all(const Tensor& x, int64_t heads) {
  std::vector<Tensor> parts;
  for (int64_t b = 0; b < x.dim(0); ++b) parts.push_back(model::to_heads(x, b, heads));
  return ops::cat(parts, 0);
}

Tensor from_heads_all(const Tensor& h, int64_t rows, int64_t heads) {
  Tensor out({rows, h.dim(1), heads * h.dim(2)}, h.dtype());
  for (int64_t b = 0; b < rows; ++b) model::from_heads(out, b, ops::narrow(h, 0, b * heads, heads));
  return out;
}

int64_t vec_bytes(const std::vector<double>& v, DType dtype) {
  return static_cast<int64_t>(v.size()) * dtype_size(dtype);
}

}  // namespace

ModelPart::ModelPart(sim::RankContext& ctx, const model::MetaModel& meta, const sim::DeviceMesh& world_mesh,
                     PartConfig cfg, StageSpec stage)
    : ctx_(ctx), meta_(meta), cfg_(std::move(cfg)), stage_(stage), world_(world_mesh), scaler_(cfg_.float8) {
  const auto& mc = meta_.config();
  if (cfg_.plan.styles.empty()) cfg_.plan = default_tp_plan(meta_);
  validate_tp_plan(cfg_.plan, meta_, cfg_.dims.tp);
  cfg_.ac.validate();
  cfg_.float8.validate();
  if (cfg_.tp_chunks < 1) throw ParallelError("tp chunk count must be >= 1");
  if (world_.size() != cfg_.dims.world()) throw ParallelError("mesh size does not match parallel dims");

  pmesh_ = param_mesh(world_, ctx_.rank());
  tp_group_ = world_.group(ctx_.rank(), "tp");
  cp_group_ = world_.group(ctx_.rank(), "cp");
  loss_group_ = world_.flatten_group(ctx_.rank(), {"dp_replicate", "dp_shard", "cp"});
  const auto coord = world_.coordinate(ctx_.rank());
  tp_rank_ = coord[4];
  cp_rank_ = coord[3];

  const int64_t cp = cfg_.dims.cp, tp = cfg_.dims.tp;
  if (cp > 1 && mc.seq_len % (2 * cp) != 0) {
    throw ParallelError("seq_len " + std::to_string(mc.seq_len) + " not divisible by 2*cp = " +
                        std::to_string(2 * cp));
  }
  seq_local_ = mc.seq_len / cp;
  if (seq_local_ % tp != 0) {
    throw ParallelError("per-rank sequence " + std::to_string(seq_local_) + " not divisible by tp degree " +
                        std::to_string(tp));
  }
  if (cp > 1) {
    positions_ = cp::shard_positions(mc.seq_len, cp, cp_rank_);
  } else {
    positions_.resize(static_cast<size_t>(mc.seq_len));
    std::iota(positions_.begin(), positions_.end(), 0);
  }
  freqs_local_ = model::freqs_at(ops::rotary_freqs(mc.seq_len, mc.head_dim(), mc.rope_theta), positions_)
                     .to(cfg_.dp.param_dtype);

  const auto fq = stage_.fqns(meta_);
  if (fq.empty()) throw ParallelError("pipeline stage owns no parameters");
  if (stage_.has_embedding) units_.push_back({Unit::Kind::kEmbed, -1, {"tok_embeddings.weight"}});
  for (int64_t l = stage_.first_layer; l < stage_.last_layer; ++l) {
    units_.push_back({Unit::Kind::kBlock, l, block_param_fqns(l)});
  }
  if (stage_.has_head) units_.push_back({Unit::Kind::kHead, mc.n_layers, {"norm.weight", "output.weight"}});

  std::map<std::string, dt::Placements> placements;
  for (const auto& f : fq) placements[f] = param_placements(cfg_.plan, f, tp);
  params_ = model::init_weights(ctx_, meta_, pmesh_, placements, cfg_.seed);
  int64_t bytes = 0;
  for (const auto& [f, p] : params_) bytes += p.local().nbytes();
  ctx_.ledger().add_parameters(bytes);
}

ModelPart::~ModelPart() = default;

Shape ModelPart::boundary_shape(int64_t rows) const {
  return {rows, seq_local_ / cfg_.dims.tp, meta_.config().dim};
}

const Tensor& ModelPart::W(const std::string& fqn) const {
  auto it = gathered_.find(fqn);
  if (it == gathered_.end()) throw std::logic_error("parameter " + fqn + " used while sharded");
  return it->second;
}

Shape ModelPart::unsharded_shape(const std::string& fqn) const {
  const dt::DTensor& p = params_.at(fqn);
  dt::Placements full = p.placements();
  full[1] = dt::Placement::replicate();
  return dt::local_region(p.global_shape(), pmesh_, full, ctx_.rank()).lengths;
}

bool ModelPart::zero3() const {
  switch (cfg_.dp.reshard_after_forward) {
    case ReshardPolicy::kAlways: return true;
    case ReshardPolicy::kNever: return false;
    case ReshardPolicy::kDefault: return cfg_.dims.pp == 1;
  }
  return true;
}

void ModelPart::unshard(const Unit& u) {
  for (const auto& f : u.fqns) {
    if (gathered_.count(f)) continue;
    const dt::DTensor& p = params_.at(f);
    dt::DTensor src = p.with_local(p.local().to(cfg_.dp.param_dtype));
    dt::Placements target = p.placements();
    target[1] = dt::Placement::replicate();
    Tensor full = dt::redistribute(ctx_, src, target, "fsdp.all_gather").local();
    ctx_.ledger().add_transient_parameters(full.nbytes());
    gathered_.emplace(f, std::move(full));
  }
}

void ModelPart::reshard(const Unit& u) {
  for (const auto& f : u.fqns) {
    auto it = gathered_.find(f);
    if (it == gathered_.end()) continue;
    ctx_.ledger().release_transient_parameters(it->second.nbytes());
    gathered_.erase(it);
  }
}

void ModelPart::add_grad(const std::string& fqn, const Tensor& g) {
  Tensor c = g.to(cfg_.dp.reduce_dtype);
  auto it = grad_acc_.find(fqn);
  if (it == grad_acc_.end()) grad_acc_.emplace(fqn, std::move(c));
  else ops::accumulate(it->second, c);
}

Tensor ModelPart::lin(const Tensor& x, const std::string& fqn, const Scales& sc) const {
  auto it = sc.find(fqn);
  if (it == sc.end()) return ops::linear(x, W(fqn));
  return float8_linear(x, W(fqn), it->second.first, it->second.second);
}

void ModelPart::decide_scales(Scales& sc, const Tensor& x, const std::vector<std::string>& fqns) {
  if (!cfg_.float8.enabled) return;
  // amax of the full (unsharded) tensors, so every tp rank agrees
  Tensor am({static_cast<int64_t>(fqns.size()) + 1});
  am[0] = amax(x);
  for (size_t i = 0; i < fqns.size(); ++i) am[static_cast<int64_t>(i) + 1] = amax(W(fqns[i]));
  if (tp_group_.size() > 1) am = ctx_.all_reduce(tp_group_, am, sim::ReduceOp::kMax, "float8.amax");
  for (size_t i = 0; i < fqns.size(); ++i) {
    sc[fqns[i]] = {scaler_.scale(fqns[i] + ":x", am[0]), scaler_.scale(fqns[i] + ":w", am[static_cast<int64_t>(i) + 1])};
  }
}

// ---- step driver -------------------------------------------------------------------

void ModelPart::begin_step(const model::Batch& local_batch, int64_t microbatches) {
  const auto& mc = meta_.config();
  if (microbatches < 1 || local_batch.batch % microbatches != 0) {
    throw ParallelError("local batch of " + std::to_string(local_batch.batch) + " rows does not split into " +
                        std::to_string(microbatches) + " microbatches");
  }
  if (local_batch.seq != mc.seq_len) {
    throw ParallelError("batch seq " + std::to_string(local_batch.seq) + " != model seq_len " +
                        std::to_string(mc.seq_len));
  }
  batch_ = local_batch;
  microbatches_ = microbatches;
  micro_.clear();
  mb_losses_.assign(static_cast<size_t>(microbatches), 0.0);
  grad_acc_.clear();
  grads_.clear();
  if (!zero3()) {
    for (const auto& u : units_) unshard(u);
  }
}

Tensor ModelPart::forward(int64_t mb, const Tensor& input) {
  if (mb < 0 || mb >= microbatches_) throw ParallelError("microbatch " + std::to_string(mb) + " out of range");
  const auto& mc = meta_.config();
  auto m = std::make_unique<Micro>();
  m->index = mb;
  const int64_t rows = batch_.batch / microbatches_;
  m->rows = batch_.slice_rows(mb * rows, rows);
  m->ids = cp::shard_tokens(m->rows.input_ids, rows, mc.seq_len, cfg_.dims.cp, cp_rank_);
  m->labels = cp::shard_tokens(m->rows.labels, rows, mc.seq_len, cfg_.dims.cp, cp_rank_);
  Micro& mi = *m;
  micro_[mb] = std::move(m);

  Tensor x;
  if (!stage_.has_embedding) {
    const Shape want = boundary_shape(rows);
    if (input.shape() != want) {
      throw ShapeError("stage input shape " + shape_str(input.shape()) + " != expected " + shape_str(want));
    }
    x = input;
  }
  for (size_t i = 0; i < units_.size(); ++i) {
    const Unit& u = units_[i];
    const bool last_unit = i + 1 == units_.size() && stage_.has_head;
    unshard(u);
    switch (u.kind) {
      case Unit::Kind::kEmbed: x = embed_forward(mi); break;
      case Unit::Kind::kBlock: {
        auto st = block_forward(u.layer, x, nullptr);
        x = ops::add(st->x2, st->w2_out);
        Saved s;
        s.scales = st->scales;
        if (cfg_.ac.checkpoints_layer(u.layer)) {
          s.x = st->x;
          s.bytes = st->x.nbytes();
        } else if (cfg_.ac.op_level()) {
          s.op_level = true;
          s.x = st->x;
          s.q = st->q;
          s.v = st->v;
          s.a = st->a;
          s.w2_out = st->w2_out;
          s.attn = st->ring.result;
          s.bytes = s.x.nbytes() + s.q.nbytes() + s.v.nbytes() + s.a.nbytes() + s.w2_out.nbytes() +
                    s.attn.out.nbytes() + vec_bytes(s.attn.lse, s.attn.out.dtype());
        } else {
          s.bytes = block_bytes(*st);
          s.full = std::move(st);
        }
        ctx_.ledger().add_activation(s.bytes);
        mi.bytes += s.bytes;
        mi.blocks[u.layer] = std::move(s);
        break;
      }
      case Unit::Kind::kHead: x = head_forward(mi, x); break;
    }
    if (zero3() && (!last_unit || cfg_.dp.reshard_after_forward == ReshardPolicy::kAlways)) reshard(u);
  }
  return x;
}

Tensor ModelPart::backward_input(int64_t mb, const Tensor& d_out) {
  auto it = micro_.find(mb);
  if (it == micro_.end()) throw ParallelError("backward for microbatch " + std::to_string(mb) + " before forward");
  Micro& mi = *it->second;
  Tensor d = d_out;
  if (!stage_.has_head) {
    const Shape want = boundary_shape(mi.rows.batch);
    if (d.shape() != want) {
      throw ShapeError("stage output grad shape " + shape_str(d.shape()) + " != expected " + shape_str(want));
    }
  }
  for (size_t i = units_.size(); i-- > 0;) {
    const Unit& u = units_[i];
    if (u.kind != Unit::Kind::kEmbed) unshard(u);
    switch (u.kind) {
      case Unit::Kind::kHead: d = head_backward(mi); break;
      case Unit::Kind::kBlock: {
        Saved& s = mi.blocks.at(u.layer);
        std::shared_ptr<BlockState> st = s.full;
        if (!st) {
          st = block_forward(u.layer, s.x, &s);
          ctx_.ledger().note_recompute(block_bytes(*st));
        }
        d = block_backward(mi, u.layer, st, d);
        break;
      }
      case Unit::Kind::kEmbed:
        embed_backward(mi, d);
        d = Tensor();
        break;
    }
    if (zero3()) reshard(u);
  }
  ctx_.ledger().release_activation(mi.bytes);
  mi.bytes = 0;
  mi.blocks.clear();
  return stage_.has_embedding ? Tensor() : d;
}

void ModelPart::backward_weight(int64_t mb) {
  auto it = micro_.find(mb);
  if (it == micro_.end()) throw ParallelError("weight backward for unknown microbatch " + std::to_string(mb));
  for (auto& job : it->second->weight_jobs) job();
  micro_.erase(it);
}

Tensor ModelPart::backward(int64_t mb, const Tensor& d_out) {
  Tensor d = backward_input(mb, d_out);
  backward_weight(mb);
  return d;
}

void ModelPart::finish_step() {
  if (!micro_.empty()) throw ParallelError("finish_step with microbatches still in flight");
  const double div = static_cast<double>(cfg_.dims.dp() * cfg_.dims.cp);
  int64_t grad_bytes = 0;
  for (const auto& [f, p] : params_) {
    auto it = grad_acc_.find(f);
    const Shape local_shape = unsharded_shape(f);
    Tensor g = it == grad_acc_.end() ? Tensor(local_shape, cfg_.dp.reduce_dtype) : it->second;
    // single pre-division by the data-parallel world, then sum reductions
    g = ops::scale(g, 1.0 / div);
    const dt::Placement tp_pl = p.placements()[2];
    dt::Placements src = {dt::Placement::partial(), dt::Placement::partial(),
                          tp_pl.is_shard() ? tp_pl : dt::Placement::partial()};
    if (cfg_.dims.tp == 1) src[2] = dt::Placement::replicate();
    dt::DTensor pending(std::move(g), pmesh_, src, p.global_shape());
    dt::DTensor reduced = dt::redistribute(ctx_, pending, p.placements(), "fsdp.reduce_scatter");
    grad_bytes += reduced.local().nbytes();
    grads_.insert_or_assign(f, std::move(reduced));
  }
  grad_acc_.clear();
  // several parts can share a rank under looped pipeline schedules
  ctx_.ledger().gradient_bytes_resident += grad_bytes - grad_bytes_;
  grad_bytes_ = grad_bytes;
  for (const auto& u : units_) reshard(u);

  if (stage_.has_head) {
    Tensor l({microbatches_}, mb_losses_);
    if (loss_group_.size() > 1) l = ctx_.all_reduce(loss_group_, l, sim::ReduceOp::kSum, "loss.all_reduce");
    double total = 0.0;
    for (int64_t i = 0; i < microbatches_; ++i) {
      mb_losses_[static_cast<size_t>(i)] = l[i] / div;
      total += mb_losses_[static_cast<size_t>(i)];
    }
    step_loss_ = total / static_cast<double>(microbatches_);
  }
}

void ModelPart::optimizer_step(model::Sgd& opt) {
  if (grads_.size() != params_.size()) throw ParallelError("optimizer step before finish_step");
  int64_t state_bytes = 0;
  for (auto& [f, p] : params_) {
    Tensor g = grads_.at(f).local().to(p.dtype());
    opt.step(f, p.mutable_local(), g);
    auto it = opt.state().find(f);
    if (it != opt.state().end()) state_bytes += it->second.nbytes();
  }
  ctx_.ledger().optimizer_bytes_resident += state_bytes - optimizer_bytes_;
  optimizer_bytes_ = state_bytes;
}

// ---- embedding -----------------------------------------------------------------------

Tensor ModelPart::embed_forward(Micro& m) {
  const Tensor& table = W("tok_embeddings.weight");
  const int64_t offset = tp_rank_ * table.dim(0);
  Tensor e = ops::embedding(table, m.ids, {m.rows.batch, seq_local_}, offset);
  return reduce_scatter_seq(ctx_, tp_group_, e, 1, "tp.embedding_reduce_scatter");
}

void ModelPart::embed_backward(Micro& m, const Tensor& d_out) {
  Tensor d_full = gather_seq(ctx_, tp_group_, d_out, 1, "tp.embedding_grad_all_gather");
  // the table itself is not needed, only the shape of its unsharded tp shard
  const Shape shape = unsharded_shape("tok_embeddings.weight");
  const DType dtype = cfg_.dp.param_dtype;
  const int64_t offset = tp_rank_ * shape[0];
  m.weight_jobs.push_back([this, shape, dtype, offset, ids = m.ids, d_full] {
    add_grad("tok_embeddings.weight", ops::embedding_backward(shape, dtype, ids, d_full, offset));
  });
}

// ---- transformer block ------------------------------------------------------------------

std::shared_ptr<ModelPart::BlockState> ModelPart::block_forward(int64_t layer, const Tensor& x,
                                                                const Saved* saved) {
  const auto& mc = meta_.config();
  const auto n = block_param_fqns(layer);
  const int64_t heads = mc.n_heads / cfg_.dims.tp;
  const int64_t rows = x.dim(0);
  const int64_t chunks = cfg_.tp_chunks;
  const bool op = saved && saved->op_level;
  auto st = std::make_shared<BlockState>();
  st->x = x;
  if (saved) st->scales = saved->scales;

  // attention
  auto r1 = ops::rms_norm(x, W(n[0]), mc.norm_eps);
  st->xn = std::move(r1.out);
  st->rstd1 = std::move(r1.rstd);
  if (!saved) decide_scales(st->scales, st->xn, {n[1], n[2], n[3]});
  std::vector<std::string> qkv = op ? std::vector<std::string>{n[2]} : std::vector<std::string>{n[1], n[2], n[3]};
  auto g1 = all_gather_matmul(
      ctx_, tp_group_, st->xn, qkv.size(), [&](const Tensor& p, size_t i) { return lin(p, qkv[i], st->scales); }, 1,
      chunks, "tp.attention_all_gather");
  st->xg = std::move(g1.gathered);
  if (op) {
    st->q = saved->q;
    st->k = std::move(g1.outs[0]);
    st->v = saved->v;
  } else {
    st->q = std::move(g1.outs[0]);
    st->k = std::move(g1.outs[1]);
    st->v = std::move(g1.outs[2]);
  }
  st->qh = ops::rotary_apply(to_heads_all(st->q, heads), freqs_local_);
  st->kh = ops::rotary_apply(to_heads_all(st->k, heads), freqs_local_);
  st->vh = to_heads_all(st->v, heads);
  if (op && cfg_.dims.cp == 1) {
    st->ring.result = saved->attn;
    st->ring.k_chunks = {st->kh};
    st->ring.v_chunks = {st->vh};
    st->ring.chunk_len = st->kh.dim(1);
  } else {
    st->ring = cp::ring_attention(ctx_, cp_group_, st->qh, st->kh, st->vh, cfg_.cp_method, true);
  }
  st->attn = from_heads_all(st->ring.result.out, rows, heads);
  if (!saved) decide_scales(st->scales, st->attn, {n[4]});
  Tensor o = matmul_reduce_scatter(
      ctx_, tp_group_, st->attn, [&](const Tensor& p) { return lin(p, n[4], st->scales); }, 1, chunks,
      "tp.attention_reduce_scatter");
  st->x2 = ops::add(x, o);

  // feed-forward
  auto r2 = ops::rms_norm(st->x2, W(n[5]), mc.norm_eps);
  st->h2n = std::move(r2.out);
  st->rstd2 = std::move(r2.rstd);
  if (!saved) decide_scales(st->scales, st->h2n, {n[6], n[8]});
  std::vector<std::string> up = op ? std::vector<std::string>{n[8]} : std::vector<std::string>{n[6], n[8]};
  auto g2 = all_gather_matmul(
      ctx_, tp_group_, st->h2n, up.size(), [&](const Tensor& p, size_t i) { return lin(p, up[i], st->scales); }, 1,
      chunks, "tp.ffn_all_gather");
  st->h2g = std::move(g2.gathered);
  if (op) {
    st->a = saved->a;
    st->g = std::move(g2.outs[0]);
  } else {
    st->a = std::move(g2.outs[0]);
    st->g = std::move(g2.outs[1]);
  }
  st->m = ops::mul(ops::silu(st->a), st->g);
  if (op) {
    st->w2_out = saved->w2_out;
  } else {
    if (!saved) decide_scales(st->scales, st->m, {n[7]});
    st->w2_out = matmul_reduce_scatter(
        ctx_, tp_group_, st->m, [&](const Tensor& p) { return lin(p, n[7], st->scales); }, 1, chunks,
        "tp.ffn_reduce_scatter");
  }
  return st;
}

int64_t ModelPart::block_bytes(const BlockState& st) const {
  int64_t b = 0;
  for (const Tensor* t : {&st.x, &st.xn, &st.xg, &st.q, &st.k, &st.v, &st.qh, &st.kh, &st.vh, &st.attn, &st.x2,
                          &st.h2n, &st.h2g, &st.a, &st.g, &st.m, &st.w2_out}) {
    b += t->nbytes();
  }
  const DType dt = st.x.dtype();
  b += vec_bytes(st.rstd1, dt) + vec_bytes(st.rstd2, dt);
  b += st.ring.result.out.nbytes() + vec_bytes(st.ring.result.lse, dt);
  if (cfg_.dims.cp > 1) {
    for (const auto& t : st.ring.k_chunks) b += t.nbytes();
    for (const auto& t : st.ring.v_chunks) b += t.nbytes();
  }
  return b;
}

Tensor ModelPart::block_backward(Micro& mi, int64_t layer, const std::shared_ptr<BlockState>& st,
                                 const Tensor& d_out) {
  const auto& mc = meta_.config();
  const auto n = block_param_fqns(layer);
  const int64_t heads = mc.n_heads / cfg_.dims.tp;
  const int64_t rows = st->x.dim(0);
  auto job = [&](const std::string& fqn, std::function<Tensor()> f) {
    mi.weight_jobs.push_back([this, fqn, f = std::move(f)] { add_grad(fqn, f()); });
  };

  // feed-forward
  Tensor d_w2 = gather_seq(ctx_, tp_group_, d_out, 1, "tp.ffn_grad_all_gather");
  job(n[7], [st, d_w2] { return ops::linear_backward_weight(st->m, d_w2); });
  Tensor d_m = ops::linear_backward_input(W(n[7]), d_w2);
  Tensor d_a = ops::silu_backward(st->a, ops::mul(d_m, st->g));
  Tensor d_g = ops::mul(d_m, ops::silu(st->a));
  job(n[6], [st, d_a] { return ops::linear_backward_weight(st->h2g, d_a); });
  job(n[8], [st, d_g] { return ops::linear_backward_weight(st->h2g, d_g); });
  Tensor d_h2g = ops::add(ops::linear_backward_input(W(n[6]), d_a), ops::linear_backward_input(W(n[8]), d_g));
  Tensor d_h2n = reduce_scatter_seq(ctx_, tp_group_, d_h2g, 1, "tp.ffn_grad_reduce_scatter");
  auto r2 = ops::rms_norm_backward(st->x2, W(n[5]), st->rstd2, d_h2n);
  job(n[5], [dw = r2.d_w] { return dw; });
  Tensor d_x2 = ops::add(d_out, r2.d_x);

  // attention
  Tensor d_o = gather_seq(ctx_, tp_group_, d_x2, 1, "tp.attention_grad_all_gather");
  job(n[4], [st, d_o] { return ops::linear_backward_weight(st->attn, d_o); });
  Tensor d_attn = ops::linear_backward_input(W(n[4]), d_o);
  auto ag = cp::ring_attention_backward(ctx_, cp_group_, st->qh, st->ring, to_heads_all(d_attn, heads),
                                        cfg_.cp_method, true);
  Tensor d_q = from_heads_all(ops::rotary_apply(ag.d_q, freqs_local_, true), rows, heads);
  Tensor d_k = from_heads_all(ops::rotary_apply(ag.d_k, freqs_local_, true), rows, heads);
  Tensor d_v = from_heads_all(ag.d_v, rows, heads);
  job(n[1], [st, d_q] { return ops::linear_backward_weight(st->xg, d_q); });
  job(n[2], [st, d_k] { return ops::linear_backward_weight(st->xg, d_k); });
  job(n[3], [st, d_v] { return ops::linear_backward_weight(st->xg, d_v); });
  Tensor d_xg = ops::add(ops::add(ops::linear_backward_input(W(n[1]), d_q), ops::linear_backward_input(W(n[2]), d_k)),
                         ops::linear_backward_input(W(n[3]), d_v));
  Tensor d_xn = reduce_scatter_seq(ctx_, tp_group_, d_xg, 1, "tp.attention_grad_reduce_scatter");
  auto r1 = ops::rms_norm_backward(st->x, W(n[0]), st->rstd1, d_xn);
  job(n[0], [dw = r1.d_w] { return dw; });
  return ops::add(d_x2, r1.d_x);
}

// ---- head ---------------------------------------------------------------------------------

Tensor ModelPart::head_forward(Micro& m, const Tensor& x) {
  const auto& mc = meta_.config();
  const int64_t tp = cfg_.dims.tp;
  const double scale = 1.0 / static_cast<double>(microbatches_);
  auto r = ops::rms_norm(x, W("norm.weight"), mc.norm_eps);
  m.head_x = x;
  m.head_rstd = std::move(r.rstd);
  m.head_hg = gather_seq(ctx_, tp_group_, r.out, 1, "tp.head_all_gather");
  Tensor logits = ops::linear(m.head_hg, W("output.weight"));
  const int64_t local_v = logits.dim(2);
  const int64_t offset = tp_rank_ * local_v;
  if (tp > 1 && cfg_.loss_parallel) {
    auto lp = loss_parallel_ce(ctx_, tp_group_, logits.reshape({logits.numel() / local_v, local_v}), m.labels,
                               offset, mc.vocab_size, scale);
    m.loss = lp.loss;
    m.d_logits = lp.d_logits.reshape(logits.shape());
  } else {
    Tensor full = logits;
    if (tp > 1) {
      auto parts = ctx_.all_gather_list(tp_group_, logits, "tp.logits_all_gather");
      full = ops::cat(parts, 2);
    }
    ctx_.ledger().max_logit_bytes = std::max(ctx_.ledger().max_logit_bytes, full.nbytes());
    auto ce = model::loss_fn(full, m.labels);
    m.loss = ce.loss;
    Tensor d = ops::softmax_cross_entropy_backward(ce.probs, m.labels, scale).reshape(full.shape());
    m.d_logits = tp > 1 ? ops::narrow(d, 2, offset, local_v) : d;
  }
  const int64_t bytes = m.head_x.nbytes() + r.out.nbytes() + m.head_hg.nbytes() + logits.nbytes() +
                        vec_bytes(m.head_rstd, x.dtype());
  ctx_.ledger().add_activation(bytes);
  m.bytes += bytes;
  mb_losses_[static_cast<size_t>(m.index)] = m.loss;
  return Tensor();
}

Tensor ModelPart::head_backward(Micro& m) {
  m.weight_jobs.push_back([this, hg = m.head_hg, dl = m.d_logits] {
    add_grad("output.weight", ops::linear_backward_weight(hg, dl));
  });
  Tensor d_hg = ops::linear_backward_input(W("output.weight"), m.d_logits);
  Tensor d_hn = reduce_scatter_seq(ctx_, tp_group_, d_hg, 1, "tp.head_grad_reduce_scatter");
  auto r = ops::rms_norm_backward(m.head_x, W("norm.weight"), m.head_rstd, d_hn);
  m.weight_jobs.push_back([this, dw = r.d_w] { add_grad("norm.weight", dw); });
  return r.d_x;
}

}  // namespace titanlab::par
