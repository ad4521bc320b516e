// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "titanlab/ndtensor/ops.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::cp {

enum class RotateMethod { kAllGather, kAllToAll };

RotateMethod rotate_method_from_name(const std::string& name);
const char* rotate_method_name(RotateMethod m);

struct CPConfig {
  int64_t degree = 1;
  RotateMethod rotate_method = RotateMethod::kAllGather;
};

class CPError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Load-balanced layout: the sequence splits into 2W chunks and rank r holds
// chunks r and 2W-1-r, in that order.
std::vector<int64_t> chunk_ids(int64_t world, int64_t rank);
std::vector<int64_t> shard_positions(int64_t seq_len, int64_t world, int64_t rank);

struct BufferSpec {
  int64_t seq_dim = 0;
  bool restore = true;  // keep the unsharded buffer around after sharding
};

Tensor shard_buffer(const Tensor& buffer, int64_t seq_dim, int64_t world, int64_t rank);
// Token-id buffers stored as [rows, seq].
std::vector<int64_t> shard_tokens(const std::vector<int64_t>& ids, int64_t rows, int64_t seq, int64_t world,
                                  int64_t rank);

struct ShardedBuffers {
  std::vector<Tensor> sharded;
  std::vector<Tensor> originals;  // empty entries where restore is off
};

// Shards every buffer along its sequence dim for this rank of the CP group.
ShardedBuffers shard_sequence(const std::vector<Tensor>& buffers, const std::vector<BufferSpec>& specs,
                              const sim::Group& cp_group, int rank);

// Inverse of the load-balanced layout for a tensor whose dim `seq_dim`
// concatenates the per-rank shards in rank order.
Tensor unshard_gathered(const Tensor& gathered, int64_t seq_dim, int64_t world);

// Unmasked causal score count for a rank's queries.
int64_t causal_score_count(int64_t seq_len, int64_t world, int64_t rank);

// Saved state of a ring attention forward, needed by the backward.
struct RingState {
  ops::AttentionPartial result;  // merged local output and log-sum-exp
  std::vector<Tensor> k_chunks;  // all 2W key chunks in chunk order
  std::vector<Tensor> v_chunks;
  int64_t chunk_len = 0;

  int64_t bytes() const;
};

// q, k, v: [heads, 2*chunk, head_dim] shards laid out by shard_positions.
// Partial results are merged in ascending key-chunk order, so both rotate
// methods give bit-identical outputs.
RingState ring_attention(sim::RankContext& ctx, const sim::Group& group, const Tensor& q, const Tensor& k,
                         const Tensor& v, RotateMethod method, bool causal);

ops::AttentionGrads ring_attention_backward(sim::RankContext& ctx, const sim::Group& group, const Tensor& q,
                                            const RingState& state, const Tensor& d_out, RotateMethod method,
                                            bool causal);

}  // namespace titanlab::cp
