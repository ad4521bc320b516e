// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/model/model.h"

#include <algorithm>
#include <cmath>

#include "titanlab/ndtensor/rng.h"

namespace titanlab::model {

int64_t ModelConfig::ffn_dim() const {
  if (ffn_hidden > 0) return ffn_hidden;
  const int64_t h = (2 * 4 * dim + 2) / 3;
  return (h + 15) / 16 * 16;
}

void ModelConfig::validate() const {
  auto positive = [](const char* key, int64_t v) {
    if (v <= 0) throw ConfigError(std::string("model.") + key + " must be positive, got " + std::to_string(v));
  };
  positive("dim", dim);
  positive("n_layers", n_layers);
  positive("n_heads", n_heads);
  positive("vocab_size", vocab_size);
  positive("seq_len", seq_len);
  if (ffn_hidden < 0) throw ConfigError("model.ffn_hidden must be >= 0");
  if (dim % n_heads != 0) {
    throw ConfigError("model.dim " + std::to_string(dim) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) throw ConfigError("model head dim must be even for rotary embeddings");
  if (!(norm_eps >= 0)) throw ConfigError("model.norm_eps must be >= 0");
}

MetaModel::MetaModel(ModelConfig cfg, std::vector<ParamSpec> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {}

const ParamSpec& MetaModel::find(const std::string& fqn) const {
  for (const auto& p : params_) {
    if (p.fqn == fqn || p.fqn == fqn + ".weight") return p;
  }
  throw std::out_of_range("unknown parameter FQN '" + fqn + "'");
}

bool MetaModel::contains(const std::string& fqn) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const ParamSpec& p) { return p.fqn == fqn || p.fqn == fqn + ".weight"; });
}

std::vector<std::string> MetaModel::fqns() const {
  std::vector<std::string> out;
  for (const auto& p : params_) out.push_back(p.fqn);
  return out;
}

int64_t MetaModel::numel() const {
  int64_t n = 0;
  for (const auto& p : params_) n += numel_of(p.shape);
  return n;
}

Shape MetaModel::freqs_cis_shape() const { return {cfg_.seq_len, cfg_.head_dim() / 2, 2}; }

std::vector<std::string> block_param_fqns(int64_t layer) {
  const std::string p = "layers." + std::to_string(layer) + ".";
  return {p + "attention_norm.weight",     p + "attention.wq.weight",    p + "attention.wk.weight",
          p + "attention.wv.weight",       p + "attention.wo.weight",    p + "ffn_norm.weight",
          p + "feed_forward.w1.weight",    p + "feed_forward.w2.weight", p + "feed_forward.w3.weight"};
}

MetaModel build_meta_model(const ModelConfig& cfg, DType dtype) {
  cfg.validate();
  const int64_t d = cfg.dim, f = cfg.ffn_dim();
  std::vector<ParamSpec> ps;
  ps.push_back({"tok_embeddings.weight", {cfg.vocab_size, d}, dtype, -1});
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const auto names = block_param_fqns(l);
    const Shape shapes[] = {{d}, {d, d}, {d, d}, {d, d}, {d, d}, {d}, {d, f}, {f, d}, {d, f}};
    for (size_t i = 0; i < names.size(); ++i) ps.push_back({names[i], shapes[i], dtype, l});
  }
  ps.push_back({"norm.weight", {d}, dtype, cfg.n_layers});
  ps.push_back({"output.weight", {d, cfg.vocab_size}, dtype, cfg.n_layers});
  return MetaModel(cfg, std::move(ps));
}

ParamMap init_dense(const MetaModel& meta, uint64_t seed) {
  ParamMap out;
  for (const auto& p : meta.params()) out.emplace(p.fqn, init_param(p.fqn, p.shape, seed).to(p.dtype));
  return out;
}

std::map<std::string, dt::DTensor> init_weights(sim::RankContext& ctx, const MetaModel& meta,
                                                const sim::DeviceMesh& mesh,
                                                const std::map<std::string, dt::Placements>& placements,
                                                uint64_t seed) {
  std::map<std::string, dt::DTensor> out;
  for (const auto& [fqn, pl] : placements) {
    const ParamSpec& spec = meta.find(fqn);
    const dt::Region region = dt::local_region(spec.shape, mesh, pl, ctx.rank());
    Tensor local = init_param_slice(spec.fqn, spec.shape, region.offsets, region.lengths, seed).to(spec.dtype);
    const auto coord = mesh.coordinate(ctx.rank());
    for (size_t i = 0; i < pl.size(); ++i) {
      if (pl[i].is_partial() && coord[i] != 0) local = Tensor(local.shape(), local.dtype());
    }
    out.emplace(spec.fqn, dt::DTensor(std::move(local), mesh, pl, spec.shape));
  }
  return out;
}

Batch Batch::slice_rows(int64_t start, int64_t rows) const {
  Batch b;
  b.batch = rows;
  b.seq = seq;
  b.input_ids.assign(input_ids.begin() + start * seq, input_ids.begin() + (start + rows) * seq);
  b.labels.assign(labels.begin() + start * seq, labels.begin() + (start + rows) * seq);
  return b;
}

ops::CrossEntropyOut loss_fn(const Tensor& logits, std::span<const int64_t> labels) {
  const int64_t vocab = logits.dim(-1);
  auto out = ops::softmax_cross_entropy(logits.reshape({logits.numel() / vocab, vocab}), labels);
  if (!std::isfinite(out.loss)) throw NonFiniteError("loss is not finite");
  return out;
}

Tensor to_heads(const Tensor& x, int64_t b, int64_t heads) {
  const int64_t s = x.dim(1), width = x.dim(2), hd = width / heads;
  Tensor row = ops::narrow(x, 0, b, 1).reshape({s, heads, hd});
  return ops::transpose(row, 0, 1);
}

void from_heads(Tensor& dst, int64_t b, const Tensor& h) {
  const int64_t heads = h.dim(0), s = h.dim(1), hd = h.dim(2);
  Tensor row = ops::transpose(h, 0, 1).reshape({1, s, heads * hd});
  ops::narrow_assign(dst, 0, b, row);
}

Tensor freqs_at(const Tensor& freqs, std::span<const int64_t> positions) {
  const int64_t half = freqs.dim(1);
  Tensor table = freqs.reshape({freqs.dim(0), half * 2});
  const int64_t n = static_cast<int64_t>(positions.size());
  return ops::embedding(table, positions, {n}).reshape({n, half, 2});
}

namespace {

struct BlockCache {
  Tensor x, h, q, k, v, attn, x2, h2, a, g, m;
  std::vector<double> rstd1, rstd2;
  std::vector<Tensor> qh, kh, vh;
  std::vector<ops::AttentionPartial> att;
};

struct Forward {
  Tensor emb_out;
  std::vector<BlockCache> blocks;
  Tensor final_in, final_out;
  std::vector<double> final_rstd;
  Tensor logits;
};

const Tensor& P(const ParamMap& params, const std::string& fqn) {
  auto it = params.find(fqn);
  if (it == params.end()) throw std::out_of_range("missing parameter " + fqn);
  return it->second;
}

Forward run_forward(const MetaModel& meta, const ParamMap& params, const Batch& batch) {
  const auto& cfg = meta.config();
  const int64_t heads = cfg.n_heads;
  for (int64_t id : batch.input_ids) {
    if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
  }
  Forward f;
  const Tensor freqs = ops::rotary_freqs(batch.seq, cfg.head_dim(), cfg.rope_theta);
  Tensor x = ops::embedding(P(params, "tok_embeddings.weight"), batch.input_ids, {batch.batch, batch.seq});
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const auto n = block_param_fqns(l);
    BlockCache c;
    c.x = x;
    auto r1 = ops::rms_norm(x, P(params, n[0]), cfg.norm_eps);
    c.h = r1.out;
    c.rstd1 = std::move(r1.rstd);
    c.q = ops::linear(c.h, P(params, n[1]));
    c.k = ops::linear(c.h, P(params, n[2]));
    c.v = ops::linear(c.h, P(params, n[3]));
    c.attn = Tensor(c.q.shape(), c.q.dtype());
    for (int64_t b = 0; b < batch.batch; ++b) {
      c.qh.push_back(ops::rotary_apply(to_heads(c.q, b, heads), freqs));
      c.kh.push_back(ops::rotary_apply(to_heads(c.k, b, heads), freqs));
      c.vh.push_back(to_heads(c.v, b, heads));
      c.att.push_back(ops::sdpa(c.qh[b], c.kh[b], c.vh[b], true));
      from_heads(c.attn, b, c.att[b].out);
    }
    c.x2 = ops::add(x, ops::linear(c.attn, P(params, n[4])));
    auto r2 = ops::rms_norm(c.x2, P(params, n[5]), cfg.norm_eps);
    c.h2 = r2.out;
    c.rstd2 = std::move(r2.rstd);
    c.a = ops::linear(c.h2, P(params, n[6]));
    c.g = ops::linear(c.h2, P(params, n[8]));
    c.m = ops::mul(ops::silu(c.a), c.g);
    x = ops::add(c.x2, ops::linear(c.m, P(params, n[7])));
    f.blocks.push_back(std::move(c));
  }
  f.final_in = x;
  auto rf = ops::rms_norm(x, P(params, "norm.weight"), cfg.norm_eps);
  f.final_out = rf.out;
  f.final_rstd = std::move(rf.rstd);
  f.logits = ops::linear(f.final_out, P(params, "output.weight"));
  return f;
}

void add_grad(ParamMap& grads, const std::string& fqn, const Tensor& g) {
  auto it = grads.find(fqn);
  if (it == grads.end()) grads.emplace(fqn, g);
  else ops::accumulate(it->second, g);
}

double run_backward(const MetaModel& meta, const ParamMap& params, const Batch& batch, double scale,
                    ParamMap& grads) {
  const auto& cfg = meta.config();
  const int64_t heads = cfg.n_heads;
  Forward f = run_forward(meta, params, batch);
  auto ce = loss_fn(f.logits, batch.labels);
  const Tensor freqs = ops::rotary_freqs(batch.seq, cfg.head_dim(), cfg.rope_theta);

  Tensor d_logits = ops::softmax_cross_entropy_backward(ce.probs, batch.labels, scale).reshape(f.logits.shape());
  add_grad(grads, "output.weight", ops::linear_backward_weight(f.final_out, d_logits));
  Tensor d_final = ops::linear_backward_input(P(params, "output.weight"), d_logits);
  auto rg = ops::rms_norm_backward(f.final_in, P(params, "norm.weight"), f.final_rstd, d_final);
  add_grad(grads, "norm.weight", rg.d_w);
  Tensor dx = rg.d_x;

  for (int64_t l = cfg.n_layers - 1; l >= 0; --l) {
    const auto n = block_param_fqns(l);
    const BlockCache& c = f.blocks[static_cast<size_t>(l)];
    // feed-forward
    add_grad(grads, n[7], ops::linear_backward_weight(c.m, dx));
    Tensor d_m = ops::linear_backward_input(P(params, n[7]), dx);
    Tensor d_a = ops::silu_backward(c.a, ops::mul(d_m, c.g));
    Tensor d_g = ops::mul(d_m, ops::silu(c.a));
    add_grad(grads, n[6], ops::linear_backward_weight(c.h2, d_a));
    add_grad(grads, n[8], ops::linear_backward_weight(c.h2, d_g));
    Tensor d_h2 = ops::add(ops::linear_backward_input(P(params, n[6]), d_a),
                           ops::linear_backward_input(P(params, n[8]), d_g));
    auto r2 = ops::rms_norm_backward(c.x2, P(params, n[5]), c.rstd2, d_h2);
    add_grad(grads, n[5], r2.d_w);
    Tensor d_x2 = ops::add(dx, r2.d_x);
    // attention
    add_grad(grads, n[4], ops::linear_backward_weight(c.attn, d_x2));
    Tensor d_attn = ops::linear_backward_input(P(params, n[4]), d_x2);
    Tensor d_q(c.q.shape(), c.q.dtype()), d_k(c.k.shape(), c.k.dtype()), d_v(c.v.shape(), c.v.dtype());
    for (int64_t b = 0; b < batch.batch; ++b) {
      auto g = ops::sdpa_backward(c.qh[b], c.kh[b], c.vh[b], true, c.att[b], to_heads(d_attn, b, heads));
      from_heads(d_q, b, ops::rotary_apply(g.d_q, freqs, true));
      from_heads(d_k, b, ops::rotary_apply(g.d_k, freqs, true));
      from_heads(d_v, b, g.d_v);
    }
    add_grad(grads, n[1], ops::linear_backward_weight(c.h, d_q));
    add_grad(grads, n[2], ops::linear_backward_weight(c.h, d_k));
    add_grad(grads, n[3], ops::linear_backward_weight(c.h, d_v));
    Tensor d_h = ops::add(ops::add(ops::linear_backward_input(P(params, n[1]), d_q),
                                   ops::linear_backward_input(P(params, n[2]), d_k)),
                          ops::linear_backward_input(P(params, n[3]), d_v));
    auto r1 = ops::rms_norm_backward(c.x, P(params, n[0]), c.rstd1, d_h);
    add_grad(grads, n[0], r1.d_w);
    dx = ops::add(d_x2, r1.d_x);
  }
  add_grad(grads, "tok_embeddings.weight",
           ops::embedding_backward(P(params, "tok_embeddings.weight").shape(),
                                   P(params, "tok_embeddings.weight").dtype(), batch.input_ids, dx));
  return ce.loss;
}

}  // namespace

Tensor forward_logits(const MetaModel& meta, const ParamMap& params, const Batch& batch) {
  return run_forward(meta, params, batch).logits;
}

StepResult forward_backward_step(const MetaModel& meta, const ParamMap& params, const Batch& batch,
                                 int64_t microbatches) {
  if (microbatches < 1 || batch.batch % microbatches != 0) {
    throw std::invalid_argument("batch of " + std::to_string(batch.batch) + " rows does not split into " +
                                std::to_string(microbatches) + " microbatches");
  }
  StepResult res;
  const int64_t rows = batch.batch / microbatches;
  const double scale = 1.0 / static_cast<double>(microbatches);
  double total = 0.0;
  for (int64_t mb = 0; mb < microbatches; ++mb) {
    const double l = run_backward(meta, params, batch.slice_rows(mb * rows, rows), scale, res.grads);
    res.mb_losses.push_back(l);
    total += l;
  }
  res.loss = total / static_cast<double>(microbatches);
  return res;
}

void Sgd::step(const std::string& name, Tensor& param, const Tensor& grad) {
  if (param.shape() != grad.shape()) {
    throw ShapeError("sgd: grad shape " + shape_str(grad.shape()) + " != param shape " + shape_str(param.shape()) +
                     " for " + name);
  }
  auto pd = param.mutable_data();
  auto gd = grad.data();
  if (cfg_.momentum == 0.0) {
    for (size_t i = 0; i < pd.size(); ++i) pd[i] = round_to(param.dtype(), pd[i] - cfg_.lr * gd[i]);
    return;
  }
  auto it = momentum_.find(name);
  if (it == momentum_.end()) {
    it = momentum_.emplace(name, grad.to(param.dtype())).first;
  } else {
    auto bd = it->second.mutable_data();
    for (size_t i = 0; i < bd.size(); ++i) bd[i] = round_to(param.dtype(), cfg_.momentum * bd[i] + gd[i]);
  }
  auto bd = it->second.data();
  for (size_t i = 0; i < pd.size(); ++i) pd[i] = round_to(param.dtype(), pd[i] - cfg_.lr * bd[i]);
}

void Sgd::step(ParamMap& params, const ParamMap& grads) {
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::out_of_range("sgd: no gradient for " + name);
    step(name, p, it->second);
  }
}

}  // namespace titanlab::model
