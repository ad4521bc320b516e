// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "titanlab/ndtensor/tensor.h"
#include "titanlab/simruntime/ledger.h"
#include "titanlab/simruntime/mesh.h"
#include "titanlab/simruntime/recorder.h"

namespace titanlab::sim {

enum class ReduceOp { kSum, kMax, kMin };

class Transport;

// A blocking call exceeded the timeout.
class HangError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised in ranks woken up because another rank already failed.
class AbortedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CollectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WorldOptions {
  std::chrono::milliseconds timeout{30000};
};

// The handle a rank worker uses to talk to its peers. Every call appends a
// flight-recorder entry and updates the ledger.
class RankContext {
 public:
  RankContext(int rank, int world_size, Transport* transport);

  int rank() const { return rank_; }
  int world_size() const { return world_size_; }
  Group world_group() const;

  Tensor all_reduce(const Group& group, const Tensor& x, ReduceOp op = ReduceOp::kSum,
                    std::string_view label = {});
  // Concatenation along dim 0 in group order.
  Tensor all_gather(const Group& group, const Tensor& x, std::string_view label = {});
  // Per-member tensors in group order; shapes may differ across members.
  std::vector<Tensor> all_gather_list(const Group& group, const Tensor& x,
                                      std::string_view label = {});
  // Dim 0 must divide evenly by the group size; member i receives chunk i.
  Tensor reduce_scatter(const Group& group, const Tensor& x, ReduceOp op = ReduceOp::kSum,
                        std::string_view label = {});
  // `chunks[i]` goes to member i; the result is every member's chunk for us.
  std::vector<Tensor> reduce_scatter_list(const Group& group, const std::vector<Tensor>& chunks,
                                          ReduceOp op = ReduceOp::kSum, std::string_view label = {});
  Tensor broadcast(const Group& group, const Tensor& x, int root, std::string_view label = {});
  std::vector<Tensor> all_to_all(const Group& group, const std::vector<Tensor>& chunks,
                                 std::string_view label = {});
  void barrier(const Group& group, std::string_view label = {});
  std::vector<std::string> all_gather_strings(const Group& group, const std::string& value,
                                              std::string_view label = {});

  // Buffered: returns once the message is queued on the (rank, peer) channel.
  void send(int peer, const Tensor& x, std::string_view label = {});
  // Blocks until the next message on the (peer, rank) channel arrives. When
  // `expect_label` is non-empty the message label must match it.
  Tensor recv(int peer, const Shape& shape, DType dtype, std::string_view label = {},
              std::string_view expect_label = {});

  CostLedger& ledger() { return ledger_; }
  const CostLedger& ledger() const { return ledger_; }
  const std::vector<CollectiveRecord>& records() const { return records_; }

  // Collectives issued while set are marked overlappable in the ledger.
  void set_overlappable(bool on) { overlappable_ = on; }
  bool overlappable() const { return overlappable_; }
  void set_chunked(bool on) { chunked_ = on; }

 private:
  friend class Transport;

  using Payload = std::vector<Tensor>;
  using Reducer = std::function<std::vector<Payload>(const std::vector<Payload>&)>;

  std::vector<Payload> rendezvous(CollectiveKind kind, const Group& group, Payload input,
                                  int64_t payload_bytes, std::string_view label,
                                  const Reducer& reducer);
  void account(CollectiveKind kind, int64_t sent, int64_t received);
  int64_t tick() { return ++clock_; }
  CollectiveRecord& open_record(CollectiveKind kind, const Group& group, int64_t seq,
                                std::optional<int> peer, int64_t bytes, std::string_view label);

  int rank_;
  int world_size_;
  Transport* transport_;
  int64_t clock_ = 0;
  std::map<std::string, int64_t> group_seq_;
  std::map<std::pair<int, int>, int64_t> channel_seq_;
  std::vector<CollectiveRecord> records_;
  CostLedger ledger_;
  bool overlappable_ = false;
  bool chunked_ = false;
};

class WorldError : public std::runtime_error {
 public:
  WorldError(const std::string& what, int failing_rank, std::vector<CollectiveRecord> records,
             HangReport report)
      : std::runtime_error(what),
        failing_rank_(failing_rank),
        records_(std::move(records)),
        report_(std::move(report)) {}

  int failing_rank() const { return failing_rank_; }
  const std::vector<CollectiveRecord>& records() const { return records_; }
  const HangReport& report() const { return report_; }

 private:
  int failing_rank_;
  std::vector<CollectiveRecord> records_;
  HangReport report_;
};

struct WorldTrace {
  std::vector<CollectiveRecord> records;  // sorted by (rank, enqueue_t)
  std::vector<CostLedger> ledgers;        // indexed by rank
};

// Runs `entry` once per rank on its own thread and joins them. Any failing
// rank aborts the world; the first genuine failure is rethrown as WorldError
// carrying the flight-recorder snapshot and its hang analysis.
WorldTrace run_world_raw(int world_size, const std::function<void(RankContext&)>& entry,
                         const WorldOptions& options = {});

template <typename R>
struct WorldRun {
  std::vector<R> results;
  WorldTrace trace;
};

template <typename R>
WorldRun<R> run_world(int world_size, const std::function<R(RankContext&)>& entry,
                      const WorldOptions& options = {}) {
  std::vector<std::optional<R>> slots(static_cast<size_t>(world_size));
  WorldTrace trace = run_world_raw(
      world_size, [&](RankContext& ctx) { slots[static_cast<size_t>(ctx.rank())] = entry(ctx); },
      options);
  WorldRun<R> out;
  out.results.reserve(slots.size());
  for (auto& s : slots) out.results.push_back(std::move(*s));
  out.trace = std::move(trace);
  return out;
}

template <typename R>
std::vector<R> spawn_world(int world_size, const std::function<R(RankContext&)>& entry,
                           const WorldOptions& options = {}) {
  return run_world<R>(world_size, entry, options).results;
}

}  // namespace titanlab::sim
