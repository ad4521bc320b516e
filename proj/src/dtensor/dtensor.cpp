// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/dtensor/dtensor.h"

#include <algorithm>

#include "titanlab/ndtensor/ops.h"

namespace titanlab::dt {

std::string Placement::str() const {
  switch (kind) {
    case Kind::kShard: return "Shard(" + std::to_string(dim) + ")";
    case Kind::kReplicate: return "Replicate()";
    case Kind::kPartial: return "Partial(sum)";
  }
  return "?";
}

std::string placements_str(const Placements& p) {
  std::string s = "[";
  for (size_t i = 0; i < p.size(); ++i) s += (i ? ", " : "") + p[i].str();
  return s + "]";
}

Placement parse_placement(const std::string& text) {
  if (text == "R" || text == "Replicate" || text == "Replicate()") return Placement::replicate();
  if (text == "P" || text == "Partial" || text == "Partial(sum)") return Placement::partial();
  std::string t = text;
  if (t.starts_with("Shard(") && t.ends_with(")")) t = t.substr(6, t.size() - 7);
  else if (t.starts_with("S")) t = t.substr(1);
  try {
    size_t used = 0;
    const int64_t d = std::stoll(t, &used);
    if (used == t.size() && d >= 0) return Placement::shard(d);
  } catch (const std::exception&) {
  }
  throw PlacementError("cannot parse placement '" + text + "'");
}

ChunkRange chunk_range(int64_t n, int64_t parts, int64_t index) {
  const int64_t size = parts > 0 ? (n + parts - 1) / parts : n;
  const int64_t offset = std::min(index * size, n);
  return {offset, std::min(size, n - offset)};
}

void validate_placements(const Shape& global_shape, const sim::DeviceMesh& mesh,
                         const Placements& placements) {
  if (static_cast<int64_t>(placements.size()) != mesh.ndim()) {
    throw PlacementError("expected " + std::to_string(mesh.ndim()) + " placements for mesh " +
                         mesh.str() + ", got " + placements_str(placements));
  }
  std::vector<int64_t> sharded;
  for (const auto& p : placements) {
    if (!p.is_shard()) continue;
    if (p.dim < 0 || p.dim >= static_cast<int64_t>(global_shape.size())) {
      throw PlacementError(p.str() + " out of range for global shape " + shape_str(global_shape));
    }
    if (std::find(sharded.begin(), sharded.end(), p.dim) != sharded.end()) {
      throw PlacementError("tensor dim " + std::to_string(p.dim) + " sharded twice in " +
                           placements_str(placements));
    }
    sharded.push_back(p.dim);
  }
}

Region local_region(const Shape& global_shape, const sim::DeviceMesh& mesh,
                    const Placements& placements, int rank) {
  Region r{Shape(global_shape.size(), 0), global_shape};
  const auto coord = mesh.coordinate(rank);
  for (size_t i = 0; i < placements.size(); ++i) {
    const auto& p = placements[i];
    if (!p.is_shard()) continue;
    const ChunkRange c = chunk_range(global_shape[p.dim], mesh.shape()[i], coord[i]);
    r.offsets[p.dim] = c.offset;
    r.lengths[p.dim] = c.length;
  }
  return r;
}

DTensor::DTensor(Tensor local, sim::DeviceMesh mesh, Placements placements, Shape global_shape)
    : local_(std::move(local)),
      mesh_(std::move(mesh)),
      placements_(std::move(placements)),
      global_shape_(std::move(global_shape)) {
  validate_placements(global_shape_, mesh_, placements_);
}

DTensor DTensor::with_local(Tensor local) const {
  DTensor out = *this;
  out.local_ = std::move(local);
  return out;
}

namespace {

Tensor slice_region(const Tensor& full, const Region& region) {
  Tensor out = full;
  for (size_t d = 0; d < region.offsets.size(); ++d) {
    if (region.offsets[d] != 0 || region.lengths[d] != full.dim(static_cast<int64_t>(d))) {
      out = ops::narrow(out, static_cast<int64_t>(d), region.offsets[d], region.lengths[d]);
    }
  }
  return out;
}

Shape local_shape_for(const DTensor& dt, int rank, const Placements& placements) {
  return local_region(dt.global_shape(), dt.mesh(), placements, rank).lengths;
}

}  // namespace

DTensor distribute(sim::RankContext& ctx, const Tensor& full, const sim::DeviceMesh& mesh,
                   const Placements& placements) {
  validate_placements(full.shape(), mesh, placements);
  const Region region = local_region(full.shape(), mesh, placements, ctx.rank());
  Tensor local = slice_region(full, region);
  const auto coord = mesh.coordinate(ctx.rank());
  for (size_t i = 0; i < placements.size(); ++i) {
    if (placements[i].is_partial() && coord[i] != 0) local = Tensor(local.shape(), local.dtype());
  }
  return DTensor(std::move(local), mesh, placements, full.shape());
}

DTensor redistribute(sim::RankContext& ctx, const DTensor& dt, const Placements& target,
                     std::string_view label) {
  const auto& mesh = dt.mesh();
  validate_placements(dt.global_shape(), mesh, target);
  Placements cur = dt.placements();
  Tensor local = dt.local();
  const int rank = ctx.rank();
  const auto coord = mesh.coordinate(rank);
  const int64_t ndim = mesh.ndim();

  // 1. Shard -> anything else: gather back to Replicate first.
  for (int64_t i = 0; i < ndim; ++i) {
    if (!cur[i].is_shard() || cur[i] == target[i]) continue;
    const int64_t d = cur[i].dim;
    auto parts = ctx.all_gather_list(mesh.group(rank, i), local, label);
    local = ops::cat(parts, d);
    cur[i] = Placement::replicate();
  }
  // 2. Partial -> Shard: reduce_scatter with chunks padded to the ceiling size.
  for (int64_t i = 0; i < ndim; ++i) {
    if (!cur[i].is_partial() || !target[i].is_shard()) continue;
    const int64_t d = target[i].dim;
    const int64_t w = mesh.shape()[i];
    const int64_t n = local.dim(d);
    const int64_t padded = (n + w - 1) / w;
    std::vector<Tensor> chunks;
    for (int64_t c = 0; c < w; ++c) {
      const ChunkRange r = chunk_range(n, w, c);
      Tensor chunk = ops::narrow(local, d, r.offset, r.length);
      if (r.length < padded) {
        Shape ps = chunk.shape();
        ps[d] = padded;
        Tensor pad(ps, chunk.dtype());
        ops::narrow_assign(pad, d, 0, chunk);
        chunk = std::move(pad);
      }
      chunks.push_back(std::move(chunk));
    }
    Tensor mine = ctx.reduce_scatter_list(mesh.group(rank, i), chunks, sim::ReduceOp::kSum, label).at(0);
    local = ops::narrow(mine, d, 0, chunk_range(n, w, coord[i]).length);
    cur[i] = target[i];
  }
  // 3. Partial -> Replicate
  for (int64_t i = 0; i < ndim; ++i) {
    if (!cur[i].is_partial() || !target[i].is_replicate()) continue;
    local = ctx.all_reduce(mesh.group(rank, i), local, sim::ReduceOp::kSum, label);
    cur[i] = Placement::replicate();
  }
  // 4. Replicate -> Shard: local slice.
  for (int64_t i = 0; i < ndim; ++i) {
    if (!cur[i].is_replicate() || !target[i].is_shard()) continue;
    const int64_t d = target[i].dim;
    const ChunkRange r = chunk_range(local.dim(d), mesh.shape()[i], coord[i]);
    local = ops::narrow(local, d, r.offset, r.length);
    cur[i] = target[i];
  }
  // 5. Replicate -> Partial: coordinate 0 keeps the value.
  for (int64_t i = 0; i < ndim; ++i) {
    if (!cur[i].is_replicate() || !target[i].is_partial()) continue;
    if (coord[i] != 0) local = Tensor(local.shape(), local.dtype());
    cur[i] = target[i];
  }
  if (cur != target) {
    throw PlacementError("redistribute: could not reach " + placements_str(target) + " from " +
                         placements_str(dt.placements()));
  }
  DTensor out(std::move(local), mesh, target, dt.global_shape());
  if (out.local().shape() != local_shape_for(out, rank, target)) {
    throw PlacementError("redistribute: local shape " + shape_str(out.local().shape()) +
                         " inconsistent with " + placements_str(target));
  }
  return out;
}

Tensor full_tensor(sim::RankContext& ctx, const DTensor& dt, std::string_view label) {
  Placements all(dt.placements().size(), Placement::replicate());
  if (dt.placements() == all) return dt.local();
  return redistribute(ctx, dt, all, label).local();
}

namespace {

// Index of the single non-replicated mesh dim, or -1 when fully replicated.
int64_t active_mesh_dim(const DTensor& t) {
  int64_t found = -1;
  for (size_t i = 0; i < t.placements().size(); ++i) {
    if (t.placements()[i].is_replicate()) continue;
    if (found >= 0) throw PlacementError("sharded op: more than one non-replicated mesh dim");
    found = static_cast<int64_t>(i);
  }
  return found;
}

bool all_replicate(const DTensor& t) { return active_mesh_dim(t) < 0; }

}  // namespace

DTensor sharded_matmul(sim::RankContext& ctx, const DTensor& x, const DTensor& w, MatmulStyle style) {
  (void)ctx;
  if (!(x.mesh() == w.mesh())) throw PlacementError("sharded_matmul: operands on different meshes");
  if (w.global_shape().size() != 2) throw PlacementError("sharded_matmul: weight must be 2-D");
  Shape out_shape = x.global_shape();
  out_shape.back() = w.global_shape()[1];
  const int64_t last = static_cast<int64_t>(out_shape.size()) - 1;
  const int64_t n = x.mesh().ndim();

  if (all_replicate(x) && all_replicate(w)) {
    return DTensor(ops::linear(x.local(), w.local()), x.mesh(), x.placements(), out_shape);
  }
  if (style == MatmulStyle::kColwise) {
    const int64_t i = active_mesh_dim(w);
    if (!all_replicate(x) || i < 0 || !w.placements()[i].is_shard(1)) {
      throw PlacementError("colwise matmul expects x Replicate and w Shard(1); got x " +
                           placements_str(x.placements()) + ", w " + placements_str(w.placements()));
    }
    Placements out(n, Placement::replicate());
    out[i] = Placement::shard(last);
    return DTensor(ops::linear(x.local(), w.local()), x.mesh(), out, out_shape);
  }
  const int64_t i = active_mesh_dim(w);
  const int64_t xi = active_mesh_dim(x);
  if (i < 0 || xi != i || !w.placements()[i].is_shard(0) || !x.placements()[i].is_shard(last)) {
    throw PlacementError("rowwise matmul expects x Shard(last) and w Shard(0) on one mesh dim; got x " +
                         placements_str(x.placements()) + ", w " + placements_str(w.placements()));
  }
  Placements out(n, Placement::replicate());
  out[i] = Placement::partial();
  return DTensor(ops::linear(x.local(), w.local()), x.mesh(), out, out_shape);
}

DTensor sharded_rms_norm(const DTensor& x, const DTensor& w, double eps) {
  if (!all_replicate(w)) throw PlacementError("sharded_rms_norm: weight must be replicated");
  const int64_t last = static_cast<int64_t>(x.global_shape().size()) - 1;
  for (const auto& p : x.placements()) {
    if (p.is_partial() || p.is_shard(last)) {
      throw PlacementError("sharded_rms_norm: input placement " + p.str() + " not token-wise");
    }
  }
  return x.with_local(ops::rms_norm(x.local(), w.local(), eps).out);
}

DTensor sharded_embedding(const DTensor& table, std::span<const int64_t> ids, const Shape& ids_shape,
                          int rank) {
  Shape out_shape = ids_shape;
  out_shape.push_back(table.global_shape()[1]);
  const int64_t last = static_cast<int64_t>(out_shape.size()) - 1;
  Placements out(table.placements().size(), Placement::replicate());
  int64_t row_offset = 0;
  for (size_t i = 0; i < table.placements().size(); ++i) {
    const auto& p = table.placements()[i];
    if (p.is_shard(0)) {
      out[i] = Placement::partial();
      row_offset = table.region(rank).offsets[0];
    } else if (p.is_shard(1)) {
      out[i] = Placement::shard(last);
    } else if (p.is_partial()) {
      throw PlacementError("sharded_embedding: Partial table");
    }
  }
  return DTensor(ops::embedding(table.local(), ids, ids_shape, row_offset), table.mesh(), out, out_shape);
}

DTensor sharded_add(const DTensor& a, const DTensor& b) {
  if (a.placements() != b.placements()) throw PlacementError("sharded_add: placements differ");
  return a.with_local(ops::add(a.local(), b.local()));
}

DTensor sharded_mul(const DTensor& a, const DTensor& b) {
  if (a.placements() != b.placements()) throw PlacementError("sharded_mul: placements differ");
  for (const auto& p : a.placements()) {
    if (p.is_partial()) throw PlacementError("sharded_mul: product of partials is not linear");
  }
  return a.with_local(ops::mul(a.local(), b.local()));
}

DTensor sharded_silu(const DTensor& x) {
  for (const auto& p : x.placements()) {
    if (p.is_partial()) throw PlacementError("sharded_silu: Partial input");
  }
  return x.with_local(ops::silu(x.local()));
}

DTensor sharded_sdpa(const DTensor& q, const DTensor& k, const DTensor& v, bool causal) {
  if (q.placements() != k.placements() || k.placements() != v.placements()) {
    throw PlacementError("sharded_sdpa: q/k/v placements differ");
  }
  for (const auto& p : q.placements()) {
    if (!(p.is_replicate() || p.is_shard(0))) {
      throw PlacementError("sharded_sdpa: only head sharding is supported, got " + p.str());
    }
  }
  return q.with_local(ops::sdpa(q.local(), k.local(), v.local(), causal).out);
}

}  // namespace titanlab::dt
