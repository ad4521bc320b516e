// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "titanlab/ndtensor/tensor.h"
#include "titanlab/simruntime/mesh.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::dt {

// How a tensor is laid out along one mesh dim.
struct Placement {
  enum class Kind { kShard, kReplicate, kPartial };

  Kind kind = Kind::kReplicate;
  int64_t dim = -1;  // tensor dim, Shard only

  static Placement shard(int64_t d) { return {Kind::kShard, d}; }
  static Placement replicate() { return {Kind::kReplicate, -1}; }
  static Placement partial() { return {Kind::kPartial, -1}; }

  bool is_shard() const { return kind == Kind::kShard; }
  bool is_shard(int64_t d) const { return kind == Kind::kShard && dim == d; }
  bool is_replicate() const { return kind == Kind::kReplicate; }
  bool is_partial() const { return kind == Kind::kPartial; }

  bool operator==(const Placement&) const = default;
  std::string str() const;
};

using Placements = std::vector<Placement>;

std::string placements_str(const Placements& p);
Placement parse_placement(const std::string& text);

class PlacementError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Ceiling-division chunking: chunk c of n rows over `parts` covers
// [c*ceil(n/parts), min((c+1)*ceil(n/parts), n)); trailing chunks may be empty.
struct ChunkRange {
  int64_t offset = 0;
  int64_t length = 0;
};
ChunkRange chunk_range(int64_t n, int64_t parts, int64_t index);

// Hyperrectangle of the global tensor held by one rank.
struct Region {
  Shape offsets;
  Shape lengths;
};

void validate_placements(const Shape& global_shape, const sim::DeviceMesh& mesh,
                         const Placements& placements);
Region local_region(const Shape& global_shape, const sim::DeviceMesh& mesh,
                    const Placements& placements, int rank);

class DTensor {
 public:
  DTensor() = default;
  DTensor(Tensor local, sim::DeviceMesh mesh, Placements placements, Shape global_shape);

  const Tensor& local() const { return local_; }
  Tensor& mutable_local() { return local_; }
  const sim::DeviceMesh& mesh() const { return mesh_; }
  const Placements& placements() const { return placements_; }
  const Shape& global_shape() const { return global_shape_; }
  DType dtype() const { return local_.dtype(); }

  Region region(int rank) const { return local_region(global_shape_, mesh_, placements_, rank); }
  DTensor with_local(Tensor local) const;

 private:
  Tensor local_;
  sim::DeviceMesh mesh_;
  Placements placements_;
  Shape global_shape_;
};

// Slices (or copies) `full`, which must be identical on every rank. Partial
// placements put the whole value on coordinate 0 and zeros elsewhere.
DTensor distribute(sim::RankContext& ctx, const Tensor& full, const sim::DeviceMesh& mesh,
                   const Placements& placements);

DTensor redistribute(sim::RankContext& ctx, const DTensor& dt, const Placements& target,
                     std::string_view label = "redistribute");

Tensor full_tensor(sim::RankContext& ctx, const DTensor& dt, std::string_view label = "full_tensor");

enum class MatmulStyle { kColwise, kRowwise };

// colwise: x Replicate, w Shard(1) -> out Shard(last)
// rowwise: x Shard(last), w Shard(0) -> out Partial
// Both operands fully replicated degenerates to a plain matmul.
DTensor sharded_matmul(sim::RankContext& ctx, const DTensor& x, const DTensor& w, MatmulStyle style);

// Token-wise ops: x may be Replicate or Shard on any non-trailing dim.
DTensor sharded_rms_norm(const DTensor& x, const DTensor& w, double eps);
// table Shard(0) -> Partial output, Shard(1) -> Shard(last), Replicate -> Replicate.
DTensor sharded_embedding(const DTensor& table, std::span<const int64_t> ids, const Shape& ids_shape,
                          int rank);
DTensor sharded_add(const DTensor& a, const DTensor& b);
DTensor sharded_mul(const DTensor& a, const DTensor& b);
DTensor sharded_silu(const DTensor& x);
// q, k, v [heads, seq, hd] sharded on heads (dim 0) or replicated.
DTensor sharded_sdpa(const DTensor& q, const DTensor& k, const DTensor& v, bool causal);

}  // namespace titanlab::dt
