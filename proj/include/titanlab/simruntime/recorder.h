// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "titanlab/simruntime/mesh.h"

namespace titanlab::sim {

enum class CollectiveKind {
  kAllReduce,
  kAllGather,
  kReduceScatter,
  kBroadcast,
  kAllToAll,
  kSend,
  kRecv,
  kBarrier,
};

const char* kind_name(CollectiveKind kind);
CollectiveKind kind_from_name(const std::string& name);
inline bool is_p2p(CollectiveKind kind) {
  return kind == CollectiveKind::kSend || kind == CollectiveKind::kRecv;
}

// One flight-recorder entry. Timestamps are per-rank logical clocks; start/end
// stay empty for calls that never completed.
struct CollectiveRecord {
  int64_t seq_id = 0;
  CollectiveKind kind = CollectiveKind::kBarrier;
  Group group;
  int rank = 0;
  std::optional<int> peer;
  int64_t bytes = 0;
  int64_t enqueue_t = 0;
  std::optional<int64_t> start_t;
  std::optional<int64_t> end_t;
  std::string label;
  bool overlappable = false;

  bool completed() const { return end_t.has_value(); }
};

// Sorted by (rank, enqueue_t), one JSON object per line.
void write_dump(const std::filesystem::path& path, std::vector<CollectiveRecord> records);
std::vector<CollectiveRecord> read_dump(const std::filesystem::path& path);
std::string record_to_json(const CollectiveRecord& r);
CollectiveRecord record_from_json(const std::string& line);

struct CollectiveIssue {
  Group group;
  int64_t seq_id = 0;
  CollectiveKind kind = CollectiveKind::kBarrier;
  std::string label;
  std::vector<int> missing;   // members that never enqueued this call
  std::vector<int> waiting;   // members that enqueued but did not complete
  int64_t last_completed_by_all = -1;
  std::map<int, int64_t> last_enqueued;  // per member
};

struct P2PIssue {
  int src = 0;
  int dst = 0;
  int64_t last_completed_send = -1;
  int64_t last_completed_recv = -1;
  std::optional<int64_t> blocked_recv;    // dst waits for this seq and no send arrived
  std::optional<int64_t> unreceived_send; // src sent this seq and dst never posted the recv
  std::string label;
};

struct HangReport {
  std::vector<CollectiveIssue> collectives;
  std::vector<P2PIssue> p2p;

  bool empty() const { return collectives.empty() && p2p.empty(); }
  std::string text() const;
};

HangReport analyze_recorder(const std::vector<CollectiveRecord>& records);

}  // namespace titanlab::sim
