// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <future>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "titanlab/dtensor/dtensor.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::ckpt {

inline constexpr int kFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using StateDict = std::map<std::string, dt::DTensor>;

struct ShardRecord {
  std::string fqn;
  Shape global_shape;
  DType dtype = DType::kF64;
  Shape offsets;
  Shape lengths;
  int file_id = 0;  // data_rank{file_id}.bin
  int64_t byte_offset = 0;
  int64_t byte_length = 0;

  bool operator==(const ShardRecord&) const = default;
};

struct CheckpointMetadata {
  int version = kFormatVersion;
  int64_t step = 0;
  int world_size = 1;
  nlohmann::json layout;                 // free-form description of the saving job
  std::map<int64_t, int64_t> loader_cursors;  // dp rank -> batches consumed
  std::vector<ShardRecord> shards;

  std::vector<std::string> fqns() const;
};

// What a rank contributes besides its tensors.
struct SaveInfo {
  int64_t step = 0;
  nlohmann::json layout;
  int64_t dp_rank = 0;
  int64_t loader_cursor = 0;
};

nlohmann::json to_json(const CheckpointMetadata& md);
CheckpointMetadata metadata_from_json(const nlohmann::json& j);
CheckpointMetadata read_metadata(const std::filesystem::path& dir);
// Per fqn the shards must tile the global shape: in bounds, no overlap, no gap.
void validate_tiling(const CheckpointMetadata& md);

// Collective over the world. Partial placements are reduced first; replicated
// copies are written once. Every rank writes data_rank{r}.bin, rank 0 also
// writes metadata.json.
void save(sim::RankContext& ctx, const StateDict& state, const std::filesystem::path& dir, const SaveInfo& info);

// Fills every local of `target` from the checkpoint, reading only the byte
// runs that intersect this rank's region. Not collective.
void load_reshard(sim::RankContext& ctx, const std::filesystem::path& dir, StateDict& target);

// Offline read of one full tensor.
Tensor read_full_tensor(const std::filesystem::path& dir, const CheckpointMetadata& md, const std::string& fqn);

// Snapshots synchronously (the collective part runs on the calling rank
// thread), then writes in a background task. One save in flight per saver: a
// second save waits for the first.
class AsyncSaver {
 public:
  AsyncSaver() = default;
  ~AsyncSaver();
  AsyncSaver(const AsyncSaver&) = delete;
  AsyncSaver& operator=(const AsyncSaver&) = delete;

  void save(sim::RankContext& ctx, const StateDict& state, const std::filesystem::path& dir, const SaveInfo& info);
  // Rethrows any I/O error of the pending save.
  void wait();
  bool pending() const { return pending_.valid(); }

 private:
  std::future<void> pending_;
};

}  // namespace titanlab::ckpt
