// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "titanlab/ndtensor/tensor.h"

// Kernels with explicit backward functions. All functions are pure: inputs are
// never modified and results are fresh tensors rounded to the input dtype.
namespace titanlab::ops {

struct GradPair {
  Tensor value;
  std::optional<Tensor> grad;
};

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// aᵀ · b
Tensor matmul_tn(const Tensor& a, const Tensor& b);

struct MatmulGrads {
  Tensor d_a;
  Tensor d_b;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& d_out);

// Treats all leading dims of x as rows: [..., in] @ [in, out] -> [..., out].
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear_backward_input(const Tensor& w, const Tensor& d_out);
Tensor linear_backward_weight(const Tensor& x, const Tensor& d_out);

// ---- attention ------------------------------------------------------------

// Attention over [heads, seq, head_dim] with explicit token positions so the
// same kernel serves full attention and the per-block steps of ring attention.
// Causal masking hides key j from query i when key_pos[j] > query_pos[i].
// Each query row must see at least one key.
struct AttentionPartial {
  Tensor out;                // [heads, q_seq, head_dim], normalized within the block
  std::vector<double> lse;   // [heads * q_seq], log-sum-exp of the scaled scores
};

AttentionPartial attention_block(const Tensor& q, const Tensor& k, const Tensor& v,
                                 std::span<const int64_t> q_pos, std::span<const int64_t> k_pos,
                                 bool causal);

struct AttentionGrads {
  Tensor d_q;
  Tensor d_k;
  Tensor d_v;
};

// Gradient contribution of one key block, given the final merged output and
// log-sum-exp over all blocks (flash-attention style recomputation).
AttentionGrads attention_block_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                        std::span<const int64_t> q_pos,
                                        std::span<const int64_t> k_pos, bool causal,
                                        const Tensor& out, std::span<const double> lse,
                                        const Tensor& d_out);

// Combines per-block partials in the order given.
AttentionPartial merge_attention(std::span<const AttentionPartial> parts);

// softmax(q·kᵀ/√hd + mask)·v for positions 0..seq-1.
AttentionPartial sdpa(const Tensor& q, const Tensor& k, const Tensor& v, bool causal);
AttentionGrads sdpa_backward(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                             const AttentionPartial& fwd, const Tensor& d_out);

// ---- normalization / loss -------------------------------------------------

struct RmsNormOut {
  Tensor out;
  std::vector<double> rstd;  // one per trailing-dim vector
};
RmsNormOut rms_norm(const Tensor& x, const Tensor& w, double eps);

struct RmsNormGrads {
  Tensor d_x;
  Tensor d_w;
};
RmsNormGrads rms_norm_backward(const Tensor& x, const Tensor& w, std::span<const double> rstd,
                               const Tensor& d_out);

Tensor softmax_rows(const Tensor& logits);

struct CrossEntropyOut {
  double loss;
  Tensor probs;
};
// Mean over rows of -log softmax(logits)[target].
CrossEntropyOut softmax_cross_entropy(const Tensor& logits, std::span<const int64_t> targets);
// (softmax - onehot) * scale / rows
Tensor softmax_cross_entropy_backward(const Tensor& probs, std::span<const int64_t> targets,
                                      double scale = 1.0);

// ---- elementwise and layout ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu(const Tensor& x);
Tensor silu_backward(const Tensor& x, const Tensor& d_out);
// out += a, in place; dtypes and shapes must match.
void accumulate(Tensor& out, const Tensor& a);

// Rows of `table` selected by ids; ids outside [row_offset, row_offset + rows)
// produce zero rows (vocab-sharded tables). Output shape: ids_shape + [dim].
Tensor embedding(const Tensor& table, std::span<const int64_t> ids, const Shape& ids_shape,
                 int64_t row_offset = 0);
// Scatter-adds d_out rows into a zero table of `table_shape`.
Tensor embedding_backward(const Shape& table_shape, DType dtype, std::span<const int64_t> ids,
                          const Tensor& d_out, int64_t row_offset = 0);

// freqs: [seq, head_dim/2, 2] holding (cos, sin) per position and pair.
Tensor rotary_freqs(int64_t seq_len, int64_t head_dim, double theta = 10000.0);
// x: [heads, seq, head_dim]; rotates (even, odd) pairs. inverse=true applies
// the transpose rotation, which is the backward.
Tensor rotary_apply(const Tensor& x, const Tensor& freqs, bool inverse = false);

Tensor transpose2d(const Tensor& x);
// Swaps dims a and b of an n-D tensor.
Tensor transpose(const Tensor& x, int64_t a, int64_t b);
Tensor narrow(const Tensor& x, int64_t dim, int64_t start, int64_t length);
Tensor cat(std::span<const Tensor> parts, int64_t dim);
// Writes `part` into `dst` at offset `start` along `dim`.
void narrow_assign(Tensor& dst, int64_t dim, int64_t start, const Tensor& part);

}  // namespace titanlab::ops
