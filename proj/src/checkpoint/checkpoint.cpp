// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/checkpoint/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>

#include "titanlab/ndtensor/float8.h"

namespace titanlab::ckpt {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "data files are written in host byte order");

namespace {

fs::path data_file(const fs::path& dir, int rank) { return dir / ("data_rank" + std::to_string(rank) + ".bin"); }

int64_t volume(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

void encode(const Tensor& t, std::string& out) {
  const auto n = static_cast<size_t>(t.numel());
  const auto& d = t.data();
  switch (t.dtype()) {
    case DType::kF64: {
      const size_t at = out.size();
      out.resize(at + n * 8);
      std::memcpy(out.data() + at, d.data(), n * 8);
      break;
    }
    case DType::kF32:
      for (double v : d) {
        const auto f = static_cast<float>(v);
        char b[4];
        std::memcpy(b, &f, 4);
        out.append(b, 4);
      }
      break;
    case DType::kF8E4M3:
      for (double v : d) out.push_back(static_cast<char>(fp8::encode_e4m3(v)));
      break;
  }
}

double decode_one(const char* p, DType dtype) {
  switch (dtype) {
    case DType::kF64: {
      double v;
      std::memcpy(&v, p, 8);
      return v;
    }
    case DType::kF32: {
      float f;
      std::memcpy(&f, p, 4);
      return static_cast<double>(f);
    }
    case DType::kF8E4M3: return fp8::decode_e4m3(static_cast<uint8_t>(*p));
  }
  return 0.0;
}

json shard_json(const ShardRecord& r) {
  return {{"fqn", r.fqn},
          {"global_shape", r.global_shape},
          {"dtype", dtype_name(r.dtype)},
          {"offsets", r.offsets},
          {"lengths", r.lengths},
          {"file_id", r.file_id},
          {"byte_range", {r.byte_offset, r.byte_length}}};
}

ShardRecord shard_from_json(const json& j) {
  ShardRecord r;
  r.fqn = j.at("fqn").get<std::string>();
  r.global_shape = j.at("global_shape").get<Shape>();
  r.dtype = dtype_from_name(j.at("dtype").get<std::string>());
  r.offsets = j.at("offsets").get<Shape>();
  r.lengths = j.at("lengths").get<Shape>();
  r.file_id = j.at("file_id").get<int>();
  const auto& br = j.at("byte_range");
  r.byte_offset = br.at(0).get<int64_t>();
  r.byte_length = br.at(1).get<int64_t>();
  return r;
}

// This rank's share of a save, detached from the live state.
struct Snapshot {
  int rank = 0;
  std::vector<std::pair<ShardRecord, Tensor>> shards;
  CheckpointMetadata metadata;  // complete on every rank
};

Snapshot prepare(sim::RankContext& ctx, const StateDict& state, const SaveInfo& info) {
  Snapshot snap;
  snap.rank = ctx.rank();
  int64_t offset = 0;
  for (const auto& [fqn, d0] : state) {
    dt::DTensor d = d0;
    dt::Placements target = d.placements();
    bool partial = false;
    for (auto& p : target) {
      if (p.is_partial()) {
        p = dt::Placement::replicate();
        partial = true;
      }
    }
    if (partial) d = dt::redistribute(ctx, d, target, "checkpoint.reduce_partial");
    // one copy of replicated data: the rank at coordinate 0 of every replicate dim
    const auto coord = d.mesh().coordinate(ctx.rank());
    bool writer = true;
    for (size_t i = 0; i < target.size(); ++i) {
      if (target[i].is_replicate() && coord[i] != 0) writer = false;
    }
    const dt::Region reg = d.region(ctx.rank());
    if (!writer || volume(reg.lengths) == 0) continue;
    ShardRecord r{fqn, d.global_shape(), d.dtype(), reg.offsets, reg.lengths, ctx.rank(), offset, 0};
    r.byte_length = volume(reg.lengths) * dtype_size(d.dtype());
    offset += r.byte_length;
    snap.shards.emplace_back(r, d.local());  // Tensor copies are deep
  }
  json mine = {{"dp_rank", info.dp_rank}, {"cursor", info.loader_cursor}, {"shards", json::array()}};
  for (const auto& [r, t] : snap.shards) mine["shards"].push_back(shard_json(r));
  const auto all = ctx.all_gather_strings(ctx.world_group(), mine.dump(), "checkpoint.metadata");
  CheckpointMetadata& md = snap.metadata;
  md.step = info.step;
  md.world_size = ctx.world_size();
  md.layout = info.layout;
  for (const auto& s : all) {
    const json j = json::parse(s);
    md.loader_cursors[j.at("dp_rank").get<int64_t>()] = j.at("cursor").get<int64_t>();
    for (const auto& r : j.at("shards")) md.shards.push_back(shard_from_json(r));
  }
  validate_tiling(md);
  return snap;
}

void write_data(const Snapshot& snap, const fs::path& dir) {
  fs::create_directories(dir);
  std::string bytes;
  for (const auto& [r, t] : snap.shards) encode(t, bytes);
  const fs::path p = data_file(dir, snap.rank);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw CheckpointError("short write to " + p.string());
}

void write_metadata(const CheckpointMetadata& md, const fs::path& dir) {
  fs::create_directories(dir);
  const fs::path p = dir / "metadata.json";
  std::ofstream out(p, std::ios::trunc);
  out << to_json(md).dump(2) << "\n";
  out.close();
  if (!out) throw CheckpointError("short write to " + p.string());
}

// Assembles the hyperrectangle `want` of `fqn` from the stored shards.
Tensor read_region(const fs::path& dir, const std::vector<const ShardRecord*>& recs, const dt::Region& want,
                   DType dtype) {
  Tensor out(want.lengths, dtype);
  std::map<int, std::ifstream> files;
  const auto nd = want.offsets.size();
  for (const ShardRecord* r : recs) {
    Shape lo(nd), hi(nd);
    bool empty = false;
    for (size_t i = 0; i < nd; ++i) {
      lo[i] = std::max(want.offsets[i], r->offsets[i]);
      hi[i] = std::min(want.offsets[i] + want.lengths[i], r->offsets[i] + r->lengths[i]);
      if (hi[i] <= lo[i]) empty = true;
    }
    if (empty) continue;
    const int64_t esize = dtype_size(r->dtype);
    if (r->byte_length != volume(r->lengths) * esize) {
      throw CheckpointError("corrupt byte range for " + r->fqn + ": " + std::to_string(r->byte_length) +
                            " bytes recorded for " + std::to_string(volume(r->lengths)) + " elements");
    }
    auto it = files.find(r->file_id);
    if (it == files.end()) {
      const fs::path p = data_file(dir, r->file_id);
      std::ifstream in(p, std::ios::binary);
      if (!in) throw CheckpointError("cannot open " + p.string());
      it = files.emplace(r->file_id, std::move(in)).first;
    }
    std::ifstream& in = it->second;
    in.seekg(0, std::ios::end);
    if (static_cast<int64_t>(in.tellg()) < r->byte_offset + r->byte_length) {
      throw CheckpointError("corrupt byte range for " + r->fqn + ": data file is too short");
    }
    // copy contiguous runs along the innermost dim
    const int64_t run = nd == 0 ? 1 : hi[nd - 1] - lo[nd - 1];
    std::vector<char> buf(static_cast<size_t>(run * esize));
    Shape idx = lo;
    for (;;) {
      int64_t src = 0, dst = 0;
      for (size_t i = 0; i < nd; ++i) {
        src = src * r->lengths[i] + (idx[i] - r->offsets[i]);
        dst = dst * want.lengths[i] + (idx[i] - want.offsets[i]);
      }
      in.seekg(r->byte_offset + src * esize);
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      if (!in) throw CheckpointError("short read from data file " + std::to_string(r->file_id));
      for (int64_t k = 0; k < run; ++k) out[dst + k] = decode_one(buf.data() + k * esize, r->dtype);
      // advance every dim but the last
      int64_t i = static_cast<int64_t>(nd) - 2;
      for (; i >= 0; --i) {
        const auto u = static_cast<size_t>(i);
        if (++idx[u] < hi[u]) break;
        idx[u] = lo[u];
      }
      if (i < 0) break;
    }
  }
  return out.to(dtype);
}

std::map<std::string, std::vector<const ShardRecord*>> by_fqn(const CheckpointMetadata& md) {
  std::map<std::string, std::vector<const ShardRecord*>> out;
  for (const auto& r : md.shards) out[r.fqn].push_back(&r);
  return out;
}

}  // namespace

std::vector<std::string> CheckpointMetadata::fqns() const {
  std::vector<std::string> out;
  for (const auto& r : shards) {
    if (out.empty() || out.back() != r.fqn) {
      if (std::find(out.begin(), out.end(), r.fqn) == out.end()) out.push_back(r.fqn);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

json to_json(const CheckpointMetadata& md) {
  json j;
  j["version"] = md.version;
  j["step"] = md.step;
  j["world_size"] = md.world_size;
  j["layout"] = md.layout;
  json loader = json::array();
  for (const auto& [r, c] : md.loader_cursors) loader.push_back({{"dp_rank", r}, {"cursor", c}});
  j["loader"] = loader;
  json shards = json::array();
  for (const auto& r : md.shards) shards.push_back(shard_json(r));
  j["shards"] = shards;
  return j;
}

CheckpointMetadata metadata_from_json(const json& j) {
  CheckpointMetadata md;
  md.version = j.at("version").get<int>();
  if (md.version != kFormatVersion) {
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(md.version));
  }
  md.step = j.at("step").get<int64_t>();
  md.world_size = j.at("world_size").get<int>();
  md.layout = j.value("layout", json::object());
  for (const auto& l : j.at("loader")) md.loader_cursors[l.at("dp_rank").get<int64_t>()] = l.at("cursor").get<int64_t>();
  for (const auto& r : j.at("shards")) md.shards.push_back(shard_from_json(r));
  return md;
}

CheckpointMetadata read_metadata(const fs::path& dir) {
  const fs::path p = dir / "metadata.json";
  std::ifstream in(p);
  if (!in) throw CheckpointError("cannot open " + p.string());
  try {
    return metadata_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw CheckpointError("malformed " + p.string() + ": " + e.what());
  }
}

void validate_tiling(const CheckpointMetadata& md) {
  for (const auto& [fqn, recs] : by_fqn(md)) {
    const Shape& g = recs.front()->global_shape;
    int64_t covered = 0;
    for (size_t a = 0; a < recs.size(); ++a) {
      const ShardRecord& r = *recs[a];
      if (r.global_shape != g || r.dtype != recs.front()->dtype) {
        throw CheckpointError("tiling violation: shards of " + fqn + " disagree on shape or dtype");
      }
      if (r.offsets.size() != g.size() || r.lengths.size() != g.size()) {
        throw CheckpointError("tiling violation: shard rank mismatch for " + fqn);
      }
      for (size_t i = 0; i < g.size(); ++i) {
        if (r.offsets[i] < 0 || r.lengths[i] < 0 || r.offsets[i] + r.lengths[i] > g[i]) {
          throw CheckpointError("tiling violation: shard of " + fqn + " exceeds the global shape");
        }
      }
      covered += volume(r.lengths);
      for (size_t b = 0; b < a; ++b) {
        const ShardRecord& o = *recs[b];
        bool overlap = volume(r.lengths) > 0 && volume(o.lengths) > 0;
        for (size_t i = 0; i < g.size() && overlap; ++i) {
          overlap = std::max(r.offsets[i], o.offsets[i]) < std::min(r.offsets[i] + r.lengths[i], o.offsets[i] + o.lengths[i]);
        }
        if (overlap) throw CheckpointError("tiling violation: duplicate coverage of " + fqn);
      }
    }
    if (covered != volume(g)) {
      throw CheckpointError("tiling violation: shards of " + fqn + " cover " + std::to_string(covered) + " of " +
                            std::to_string(volume(g)) + " elements");
    }
  }
}

void save(sim::RankContext& ctx, const StateDict& state, const fs::path& dir, const SaveInfo& info) {
  const Snapshot snap = prepare(ctx, state, info);
  write_data(snap, dir);
  ctx.barrier(ctx.world_group(), "checkpoint.barrier");
  if (ctx.rank() == 0) write_metadata(snap.metadata, dir);
  ctx.barrier(ctx.world_group(), "checkpoint.barrier");
}

void load_reshard(sim::RankContext& ctx, const fs::path& dir, StateDict& target) {
  const CheckpointMetadata md = read_metadata(dir);
  validate_tiling(md);
  const auto index = by_fqn(md);
  for (auto& [fqn, d] : target) {
    auto it = index.find(fqn);
    if (it == index.end()) throw CheckpointError("checkpoint has no tensor '" + fqn + "'");
    if (it->second.front()->global_shape != d.global_shape()) {
      throw CheckpointError("shape mismatch for " + fqn + ": stored " + shape_str(it->second.front()->global_shape) +
                            ", wanted " + shape_str(d.global_shape()));
    }
    for (const auto& p : d.placements()) {
      if (p.is_partial()) throw CheckpointError("cannot load into a Partial placement (" + fqn + ")");
    }
    d.mutable_local() = read_region(dir, it->second, d.region(ctx.rank()), d.dtype());
  }
}

Tensor read_full_tensor(const fs::path& dir, const CheckpointMetadata& md, const std::string& fqn) {
  const auto index = by_fqn(md);
  auto it = index.find(fqn);
  if (it == index.end()) throw CheckpointError("checkpoint has no tensor '" + fqn + "'");
  const ShardRecord& r = *it->second.front();
  return read_region(dir, it->second, dt::Region{Shape(r.global_shape.size(), 0), r.global_shape}, r.dtype);
}

AsyncSaver::~AsyncSaver() {
  if (!pending_.valid()) return;
  try {
    pending_.get();
  } catch (...) {
    // nobody is left to report to
  }
}

void AsyncSaver::save(sim::RankContext& ctx, const StateDict& state, const fs::path& dir, const SaveInfo& info) {
  wait();
  Snapshot snap = prepare(ctx, state, info);
  pending_ = std::async(std::launch::async, [snap = std::move(snap), dir] {
    write_data(snap, dir);
    if (snap.rank == 0) write_metadata(snap.metadata, dir);
  });
}

void AsyncSaver::wait() {
  if (pending_.valid()) pending_.get();
}

}  // namespace titanlab::ckpt
