// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/contextparallel/contextparallel.h"

#include <algorithm>
#include <numeric>
#include <optional>

namespace titanlab::cp {

RotateMethod rotate_method_from_name(const std::string& name) {
  if (name == "allgather") return RotateMethod::kAllGather;
  if (name == "alltoall" || name == "alltoall_p2p_ring" || name == "p2p") return RotateMethod::kAllToAll;
  throw CPError("unknown context_parallel_rotate_method '" + name + "' (expected allgather or alltoall)");
}

const char* rotate_method_name(RotateMethod m) {
  return m == RotateMethod::kAllGather ? "allgather" : "alltoall";
}

std::vector<int64_t> chunk_ids(int64_t world, int64_t rank) { return {rank, 2 * world - 1 - rank}; }

namespace {

int64_t chunk_len(int64_t seq_len, int64_t world) {
  if (world < 1 || seq_len % (2 * world) != 0) {
    throw CPError("sequence length " + std::to_string(seq_len) + " not divisible by 2*cp degree (" +
                  std::to_string(2 * world) + ")");
  }
  return seq_len / (2 * world);
}

std::vector<int64_t> chunk_positions(int64_t chunk, int64_t len) {
  std::vector<int64_t> p(static_cast<size_t>(len));
  std::iota(p.begin(), p.end(), chunk * len);
  return p;
}

int64_t group_index(const sim::Group& group, int rank) {
  auto it = std::find(group.begin(), group.end(), rank);
  if (it == group.end()) throw CPError("rank " + std::to_string(rank) + " not in CP group");
  return it - group.begin();
}

}  // namespace

std::vector<int64_t> shard_positions(int64_t seq_len, int64_t world, int64_t rank) {
  const int64_t c = chunk_len(seq_len, world);
  std::vector<int64_t> out;
  for (int64_t id : chunk_ids(world, rank)) {
    auto p = chunk_positions(id, c);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Tensor shard_buffer(const Tensor& buffer, int64_t seq_dim, int64_t world, int64_t rank) {
  if (world == 1) return buffer;
  const int64_t c = chunk_len(buffer.dim(seq_dim), world);
  std::vector<Tensor> parts;
  for (int64_t id : chunk_ids(world, rank)) parts.push_back(ops::narrow(buffer, seq_dim, id * c, c));
  return ops::cat(parts, seq_dim);
}

std::vector<int64_t> shard_tokens(const std::vector<int64_t>& ids, int64_t rows, int64_t seq, int64_t world,
                                  int64_t rank) {
  const auto pos = shard_positions(seq, world, rank);
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(rows) * pos.size());
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t p : pos) out.push_back(ids[static_cast<size_t>(r * seq + p)]);
  }
  return out;
}

ShardedBuffers shard_sequence(const std::vector<Tensor>& buffers, const std::vector<BufferSpec>& specs,
                              const sim::Group& cp_group, int rank) {
  if (buffers.size() != specs.size()) throw CPError("shard_sequence: one spec per buffer required");
  const auto world = static_cast<int64_t>(cp_group.size());
  const int64_t me = group_index(cp_group, rank);
  ShardedBuffers out;
  for (size_t i = 0; i < buffers.size(); ++i) {
    if (specs[i].seq_dim < 0 || specs[i].seq_dim >= buffers[i].rank()) {
      throw CPError("shard_sequence: seq dim " + std::to_string(specs[i].seq_dim) + " invalid for buffer " +
                    std::to_string(i));
    }
    out.sharded.push_back(shard_buffer(buffers[i], specs[i].seq_dim, world, me));
    out.originals.push_back(specs[i].restore ? buffers[i] : Tensor());
  }
  return out;
}

Tensor unshard_gathered(const Tensor& gathered, int64_t seq_dim, int64_t world) {
  const int64_t c = chunk_len(gathered.dim(seq_dim), world);
  std::vector<Tensor> chunks(static_cast<size_t>(2 * world));
  for (int64_t r = 0; r < world; ++r) {
    const auto ids = chunk_ids(world, r);
    chunks[ids[0]] = ops::narrow(gathered, seq_dim, 2 * r * c, c);
    chunks[ids[1]] = ops::narrow(gathered, seq_dim, 2 * r * c + c, c);
  }
  return ops::cat(chunks, seq_dim);
}

int64_t causal_score_count(int64_t seq_len, int64_t world, int64_t rank) {
  int64_t n = 0;
  for (int64_t p : shard_positions(seq_len, world, rank)) n += p + 1;
  return n;
}

int64_t RingState::bytes() const {
  int64_t b = result.out.nbytes() + static_cast<int64_t>(result.lse.size() * sizeof(double));
  for (const auto& t : k_chunks) b += t.nbytes();
  for (const auto& t : v_chunks) b += t.nbytes();
  return b;
}

namespace {

// Every rank's K/V shard, indexed by position in the group.
std::pair<std::vector<Tensor>, std::vector<Tensor>> collect_kv(sim::RankContext& ctx, const sim::Group& group,
                                                              const Tensor& k, const Tensor& v,
                                                              RotateMethod method) {
  const auto w = static_cast<int64_t>(group.size());
  if (method == RotateMethod::kAllGather) {
    return {ctx.all_gather_list(group, k, "cp.kv_allgather"), ctx.all_gather_list(group, v, "cp.kv_allgather")};
  }
  const int64_t me = group_index(group, ctx.rank());
  std::vector<Tensor> ks(static_cast<size_t>(w)), vs(static_cast<size_t>(w));
  ks[me] = k;
  vs[me] = v;
  Tensor cur_k = k, cur_v = v;
  const int next = group[(me + 1) % w];
  const int prev = group[(me - 1 + w) % w];
  for (int64_t t = 1; t < w; ++t) {
    ctx.send(next, cur_k, "cp.ring_k");
    ctx.send(next, cur_v, "cp.ring_v");
    cur_k = ctx.recv(prev, k.shape(), k.dtype(), "cp.ring_k");
    cur_v = ctx.recv(prev, v.shape(), v.dtype(), "cp.ring_v");
    const int64_t owner = (me - t + w) % w;
    ks[owner] = cur_k;
    vs[owner] = cur_v;
  }
  return {ks, vs};
}

std::vector<double> lse_rows(const std::vector<double>& lse, int64_t heads, int64_t s_local, int64_t start,
                             int64_t len) {
  std::vector<double> out;
  out.reserve(static_cast<size_t>(heads * len));
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < len; ++i) out.push_back(lse[static_cast<size_t>(h * s_local + start + i)]);
  }
  return out;
}

}  // namespace

RingState ring_attention(sim::RankContext& ctx, const sim::Group& group, const Tensor& q, const Tensor& k,
                         const Tensor& v, RotateMethod method, bool causal) {
  const auto w = static_cast<int64_t>(group.size());
  const int64_t me = group_index(group, ctx.rank());
  const int64_t heads = q.dim(0), s_local = q.dim(1);
  if (w == 1) {
    RingState st;
    st.result = ops::sdpa(q, k, v, causal);
    st.k_chunks = {k};
    st.v_chunks = {v};
    st.chunk_len = s_local;
    return st;
  }
  if (s_local % 2 != 0 || k.dim(1) != s_local || v.dim(1) != s_local) {
    throw CPError("ring_attention: local shards must hold two equal chunks, got " + shape_str(q.shape()));
  }
  const int64_t c = s_local / 2;
  auto [ks, vs] = collect_kv(ctx, group, k, v, method);

  RingState st;
  st.chunk_len = c;
  st.k_chunks.resize(static_cast<size_t>(2 * w));
  st.v_chunks.resize(static_cast<size_t>(2 * w));
  for (int64_t j = 0; j < w; ++j) {
    const auto ids = chunk_ids(w, j);
    for (int half = 0; half < 2; ++half) {
      st.k_chunks[ids[half]] = ops::narrow(ks[j], 1, half * c, c);
      st.v_chunks[ids[half]] = ops::narrow(vs[j], 1, half * c, c);
    }
  }

  const auto my_ids = chunk_ids(w, me);
  std::vector<Tensor> outs;
  std::vector<double> lse(static_cast<size_t>(heads * s_local));
  for (int half = 0; half < 2; ++half) {
    const int64_t a = my_ids[half];
    const Tensor qa = ops::narrow(q, 1, half * c, c);
    const auto qpos = chunk_positions(a, c);
    std::vector<ops::AttentionPartial> parts;
    for (int64_t b = 0; b < 2 * w; ++b) {
      if (causal && b > a) continue;
      parts.push_back(ops::attention_block(qa, st.k_chunks[b], st.v_chunks[b], qpos, chunk_positions(b, c), causal));
    }
    auto merged = ops::merge_attention(parts);
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t i = 0; i < c; ++i) {
        lse[static_cast<size_t>(h * s_local + half * c + i)] = merged.lse[static_cast<size_t>(h * c + i)];
      }
    }
    outs.push_back(std::move(merged.out));
  }
  st.result.out = ops::cat(outs, 1);
  st.result.lse = std::move(lse);
  return st;
}

ops::AttentionGrads ring_attention_backward(sim::RankContext& ctx, const sim::Group& group, const Tensor& q,
                                            const RingState& st, const Tensor& d_out, RotateMethod method,
                                            bool causal) {
  const auto w = static_cast<int64_t>(group.size());
  const int64_t me = group_index(group, ctx.rank());
  if (w == 1) return ops::sdpa_backward(q, st.k_chunks[0], st.v_chunks[0], causal, st.result, d_out);
  const int64_t heads = q.dim(0), s_local = q.dim(1), c = st.chunk_len;
  const auto my_ids = chunk_ids(w, me);

  std::vector<Tensor> dq_parts;
  std::vector<std::optional<Tensor>> dk(static_cast<size_t>(2 * w)), dv(static_cast<size_t>(2 * w));
  for (int half = 0; half < 2; ++half) {
    const int64_t a = my_ids[half];
    const Tensor qa = ops::narrow(q, 1, half * c, c);
    const Tensor oa = ops::narrow(st.result.out, 1, half * c, c);
    const Tensor da = ops::narrow(d_out, 1, half * c, c);
    const auto la = lse_rows(st.result.lse, heads, s_local, half * c, c);
    const auto qpos = chunk_positions(a, c);
    std::optional<Tensor> dq;
    for (int64_t b = 0; b < 2 * w; ++b) {
      if (causal && b > a) continue;
      auto g = ops::attention_block_backward(qa, st.k_chunks[b], st.v_chunks[b], qpos, chunk_positions(b, c), causal,
                                             oa, la, da);
      if (dq) ops::accumulate(*dq, g.d_q);
      else dq = std::move(g.d_q);
      if (dk[b]) ops::accumulate(*dk[b], g.d_k);
      else dk[b] = std::move(g.d_k);
      if (dv[b]) ops::accumulate(*dv[b], g.d_v);
      else dv[b] = std::move(g.d_v);
    }
    dq_parts.push_back(std::move(*dq));
  }

  // per-owner contributions, laid out like the owner's local shard
  const Shape chunk_shape = st.k_chunks[0].shape();
  std::vector<Tensor> send_k, send_v;
  for (int64_t j = 0; j < w; ++j) {
    std::vector<Tensor> pk, pv;
    for (int64_t id : chunk_ids(w, j)) {
      pk.push_back(dk[id] ? *dk[id] : Tensor(chunk_shape, q.dtype()));
      pv.push_back(dv[id] ? *dv[id] : Tensor(st.v_chunks[0].shape(), q.dtype()));
    }
    send_k.push_back(ops::cat(pk, 1));
    send_v.push_back(ops::cat(pv, 1));
  }
  ops::AttentionGrads out;
  out.d_q = ops::cat(dq_parts, 1);
  if (method == RotateMethod::kAllGather) {
    out.d_k = ctx.reduce_scatter_list(group, send_k, sim::ReduceOp::kSum, "cp.dkv_reduce_scatter").at(0);
    out.d_v = ctx.reduce_scatter_list(group, send_v, sim::ReduceOp::kSum, "cp.dkv_reduce_scatter").at(0);
  } else {
    auto rk = ctx.all_to_all(group, send_k, "cp.dkv_alltoall");
    auto rv = ctx.all_to_all(group, send_v, "cp.dkv_alltoall");
    out.d_k = rk[0];
    out.d_v = rv[0];
    for (int64_t j = 1; j < w; ++j) {
      ops::accumulate(out.d_k, rk[j]);
      ops::accumulate(out.d_v, rv[j]);
    }
  }
  return out;
}

}  // namespace titanlab::cp
