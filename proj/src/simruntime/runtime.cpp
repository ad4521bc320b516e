// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/simruntime/runtime.h"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>

#include "titanlab/ndtensor/ops.h"

namespace titanlab::sim {

namespace {

struct Message {
  std::string label;
  Tensor payload;
};

std::string describe(CollectiveKind kind, const Group& group, int64_t seq, std::string_view label) {
  std::string s = std::string(kind_name(kind)) + " seq " + std::to_string(seq) + " on group [" +
                  group_key(group) + "]";
  if (!label.empty()) s += " (" + std::string(label) + ")";
  return s;
}

double combine(ReduceOp op, double a, double b) {
  switch (op) {
    case ReduceOp::kSum: return a + b;
    case ReduceOp::kMax: return std::max(a, b);
    case ReduceOp::kMin: return std::min(a, b);
  }
  return a;
}

Tensor reduce_in_order(const std::vector<Tensor>& parts, ReduceOp op) {
  Tensor out = parts.at(0);
  auto o = out.mutable_data();
  for (size_t i = 1; i < parts.size(); ++i) {
    if (parts[i].shape() != out.shape() || parts[i].dtype() != out.dtype()) {
      throw CollectiveError("reduction inputs differ across members: " + shape_str(out.shape()) +
                            " vs " + shape_str(parts[i].shape()));
    }
    auto p = parts[i].data();
    for (size_t k = 0; k < o.size(); ++k) o[k] = combine(op, o[k], p[k]);
    out.round_in_place();
  }
  return out;
}

Tensor encode_string(const std::string& s) {
  std::vector<double> v(s.begin(), s.end());
  const auto n = static_cast<int64_t>(v.size());
  return Tensor({n}, std::move(v));
}

std::string decode_string(const Tensor& t) {
  std::string s;
  s.reserve(static_cast<size_t>(t.numel()));
  for (double c : t.data()) s.push_back(static_cast<char>(static_cast<int>(c)));
  return s;
}

}  // namespace

class Transport {
 public:
  Transport(int world_size, const WorldOptions& options)
      : world_size_(world_size), timeout_(options.timeout) {}

  struct Slot {
    CollectiveKind kind;
    std::vector<std::optional<RankContext::Payload>> inputs;
    int arrived = 0;
    int departed = 0;
    bool done = false;
    std::vector<RankContext::Payload> outputs;
    std::exception_ptr error;
  };

  bool aborted() {
    std::lock_guard lock(mu_);
    return aborted_;
  }

  void abort() {
    std::lock_guard lock(mu_);
    aborted_ = true;
    cv_.notify_all();
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::pair<std::string, int64_t>, Slot> slots_;
  std::map<std::pair<int, int>, std::deque<Message>> channels_;
  bool aborted_ = false;
  int world_size_;
  std::chrono::milliseconds timeout_;
};

RankContext::RankContext(int rank, int world_size, Transport* transport)
    : rank_(rank), world_size_(world_size), transport_(transport) {}

Group RankContext::world_group() const {
  Group g(static_cast<size_t>(world_size_));
  for (int i = 0; i < world_size_; ++i) g[static_cast<size_t>(i)] = i;
  return g;
}

CollectiveRecord& RankContext::open_record(CollectiveKind kind, const Group& group, int64_t seq,
                                           std::optional<int> peer, int64_t bytes,
                                           std::string_view label) {
  CollectiveRecord r;
  r.seq_id = seq;
  r.kind = kind;
  r.group = group;
  r.rank = rank_;
  r.peer = peer;
  r.bytes = bytes;
  r.enqueue_t = tick();
  r.label = std::string(label);
  r.overlappable = overlappable_;
  records_.push_back(std::move(r));
  return records_.back();
}

void RankContext::account(CollectiveKind kind, int64_t sent, int64_t received) {
  ledger_.bytes_sent += sent;
  ledger_.bytes_received += received;
  ledger_.collective_counts[kind] += 1;
  ledger_.bytes_by_kind[kind] += sent;
  if (overlappable_) ledger_.overlappable_bytes += sent;
  if (chunked_) ledger_.chunked_collective_bytes += sent;
}

std::vector<RankContext::Payload> RankContext::rendezvous(CollectiveKind kind, const Group& group,
                                                          Payload input, int64_t payload_bytes,
                                                          std::string_view label,
                                                          const Reducer& reducer) {
  auto it = std::find(group.begin(), group.end(), rank_);
  if (it == group.end()) {
    throw CollectiveError("rank " + std::to_string(rank_) + " is not a member of group [" +
                          group_key(group) + "]");
  }
  const size_t index = static_cast<size_t>(it - group.begin());
  if (group.size() == 1) {
    std::vector<Payload> in{std::move(input)};
    return reducer(in);
  }
  const std::string key = group_key(group);
  const int64_t seq = group_seq_[key]++;
  if (transport_->aborted()) {
    throw AbortedError("rank " + std::to_string(rank_) + ": world aborted before " +
                       describe(kind, group, seq, label));
  }
  const size_t record_index = records_.size();
  open_record(kind, group, seq, std::nullopt, payload_bytes, label);

  std::unique_lock lock(transport_->mu_);
  auto& slot = transport_->slots_[{key, seq}];
  if (slot.inputs.empty()) {
    slot.kind = kind;
    slot.inputs.resize(group.size());
  } else if (slot.kind != kind && !slot.error) {
    slot.error = std::make_exception_ptr(CollectiveError(
        "collective mismatch at seq " + std::to_string(seq) + " on group [" + key + "]: " +
        kind_name(slot.kind) + " vs " + kind_name(kind) + " from rank " + std::to_string(rank_)));
  }
  slot.inputs[index] = std::move(input);
  if (++slot.arrived == static_cast<int>(group.size())) {
    if (!slot.error) {
      try {
        std::vector<Payload> all;
        all.reserve(group.size());
        for (auto& p : slot.inputs) all.push_back(std::move(*p));
        slot.outputs = reducer(all);
      } catch (...) {
        slot.error = std::current_exception();
      }
    }
    slot.done = true;
    transport_->cv_.notify_all();
  }
  const bool ok = transport_->cv_.wait_for(lock, transport_->timeout_, [&] {
    return slot.done || transport_->aborted_;
  });
  if (!slot.done) {
    const bool was_aborted = transport_->aborted_;
    transport_->aborted_ = true;
    transport_->cv_.notify_all();
    lock.unlock();
    if (!ok && !was_aborted) {
      throw HangError("rank " + std::to_string(rank_) + " timed out after " +
                      std::to_string(transport_->timeout_.count()) + " ms in " +
                      describe(kind, group, seq, label));
    }
    throw AbortedError("rank " + std::to_string(rank_) + ": world aborted during " +
                       describe(kind, group, seq, label));
  }
  std::exception_ptr error = slot.error;
  Payload out;
  if (!error) out = std::move(slot.outputs[index]);
  if (++slot.departed == static_cast<int>(group.size())) transport_->slots_.erase({key, seq});
  lock.unlock();

  CollectiveRecord& rec = records_[record_index];
  rec.start_t = tick();
  rec.end_t = tick();
  if (error) std::rethrow_exception(error);
  return std::vector<Payload>{std::move(out)};
}

Tensor RankContext::all_reduce(const Group& group, const Tensor& x, ReduceOp op,
                               std::string_view label) {
  auto out = rendezvous(CollectiveKind::kAllReduce, group, {x}, x.nbytes(), label,
                        [op, n = group.size()](const std::vector<Payload>& in) {
                          std::vector<Tensor> parts;
                          for (const auto& p : in) parts.push_back(p.at(0));
                          Tensor r = reduce_in_order(parts, op);
                          return std::vector<Payload>(n, Payload{r});
                        });
  const int64_t w = static_cast<int64_t>(group.size());
  if (w > 1) {
    const int64_t moved = 2 * (w - 1) * x.nbytes() / w;
    account(CollectiveKind::kAllReduce, moved, moved);
  }
  return out[0].at(0);
}

std::vector<Tensor> RankContext::all_gather_list(const Group& group, const Tensor& x,
                                                 std::string_view label) {
  auto out = rendezvous(CollectiveKind::kAllGather, group, {x}, x.nbytes(), label,
                        [n = group.size()](const std::vector<Payload>& in) {
                          Payload all;
                          for (const auto& p : in) all.push_back(p.at(0));
                          return std::vector<Payload>(n, all);
                        });
  const int64_t w = static_cast<int64_t>(group.size());
  if (w > 1) {
    int64_t total = 0;
    for (const auto& t : out[0]) total += t.nbytes();
    account(CollectiveKind::kAllGather, (w - 1) * x.nbytes(), total - x.nbytes());
  }
  return out[0];
}

Tensor RankContext::all_gather(const Group& group, const Tensor& x, std::string_view label) {
  auto parts = all_gather_list(group, x, label);
  if (parts.size() == 1) return parts[0];
  for (const auto& p : parts) {
    if (p.rank() != x.rank() || p.dtype() != x.dtype()) {
      throw CollectiveError("all_gather: members contributed incompatible tensors");
    }
    for (int64_t d = 1; d < x.rank(); ++d) {
      if (p.dim(d) != x.dim(d)) {
        throw CollectiveError("all_gather: trailing shape mismatch " + shape_str(p.shape()) +
                              " vs " + shape_str(x.shape()));
      }
    }
  }
  return ops::cat(parts, 0);
}

std::vector<Tensor> RankContext::reduce_scatter_list(const Group& group,
                                                     const std::vector<Tensor>& chunks,
                                                     ReduceOp op, std::string_view label) {
  if (chunks.size() != group.size()) {
    throw CollectiveError("reduce_scatter: " + std::to_string(chunks.size()) + " chunks for group of " +
                          std::to_string(group.size()));
  }
  int64_t bytes = 0;
  for (const auto& c : chunks) bytes += c.nbytes();
  auto out = rendezvous(CollectiveKind::kReduceScatter, group, chunks, bytes, label,
                        [op](const std::vector<Payload>& in) {
                          std::vector<Payload> res(in.size());
                          for (size_t j = 0; j < in.size(); ++j) {
                            std::vector<Tensor> parts;
                            for (const auto& p : in) parts.push_back(p.at(j));
                            res[j] = Payload{reduce_in_order(parts, op)};
                          }
                          return res;
                        });
  const int64_t w = static_cast<int64_t>(group.size());
  if (w > 1) {
    const size_t me = static_cast<size_t>(std::find(group.begin(), group.end(), rank_) - group.begin());
    const int64_t mine = chunks[me].nbytes();
    account(CollectiveKind::kReduceScatter, bytes - mine, (w - 1) * mine);
  }
  return out[0];
}

Tensor RankContext::reduce_scatter(const Group& group, const Tensor& x, ReduceOp op,
                                   std::string_view label) {
  const int64_t w = static_cast<int64_t>(group.size());
  if (x.rank() < 1 || x.dim(0) % w != 0) {
    throw CollectiveError("reduce_scatter: dim 0 of " + shape_str(x.shape()) +
                          " not divisible by group size " + std::to_string(w));
  }
  const int64_t rows = x.dim(0) / w;
  std::vector<Tensor> chunks;
  for (int64_t i = 0; i < w; ++i) chunks.push_back(ops::narrow(x, 0, i * rows, rows));
  return reduce_scatter_list(group, chunks, op, label).at(0);
}

Tensor RankContext::broadcast(const Group& group, const Tensor& x, int root,
                              std::string_view label) {
  auto root_it = std::find(group.begin(), group.end(), root);
  if (root_it == group.end()) throw CollectiveError("broadcast: root not in group");
  const size_t root_index = static_cast<size_t>(root_it - group.begin());
  auto out = rendezvous(CollectiveKind::kBroadcast, group, {x}, x.nbytes(), label,
                        [root_index](const std::vector<Payload>& in) {
                          return std::vector<Payload>(in.size(), in[root_index]);
                        });
  const int64_t w = static_cast<int64_t>(group.size());
  if (w > 1) {
    const Tensor& r = out[0].at(0);
    if (rank_ == root) {
      account(CollectiveKind::kBroadcast, (w - 1) * r.nbytes(), 0);
    } else {
      account(CollectiveKind::kBroadcast, 0, r.nbytes());
    }
  }
  return out[0].at(0);
}

std::vector<Tensor> RankContext::all_to_all(const Group& group, const std::vector<Tensor>& chunks,
                                            std::string_view label) {
  if (chunks.size() != group.size()) throw CollectiveError("all_to_all: chunk count != group size");
  int64_t bytes = 0;
  for (const auto& c : chunks) bytes += c.nbytes();
  auto out = rendezvous(CollectiveKind::kAllToAll, group, chunks, bytes, label,
                        [](const std::vector<Payload>& in) {
                          std::vector<Payload> res(in.size());
                          for (size_t j = 0; j < in.size(); ++j) {
                            for (const auto& p : in) res[j].push_back(p.at(j));
                          }
                          return res;
                        });
  if (group.size() > 1) {
    const size_t me = static_cast<size_t>(std::find(group.begin(), group.end(), rank_) - group.begin());
    int64_t received = 0;
    for (size_t i = 0; i < out[0].size(); ++i) {
      if (i != me) received += out[0][i].nbytes();
    }
    account(CollectiveKind::kAllToAll, bytes - chunks[me].nbytes(), received);
  }
  return out[0];
}

void RankContext::barrier(const Group& group, std::string_view label) {
  rendezvous(CollectiveKind::kBarrier, group, {}, 0, label,
             [](const std::vector<Payload>& in) { return std::vector<Payload>(in.size()); });
  if (group.size() > 1) account(CollectiveKind::kBarrier, 0, 0);
}

std::vector<std::string> RankContext::all_gather_strings(const Group& group,
                                                         const std::string& value,
                                                         std::string_view label) {
  auto parts = all_gather_list(group, encode_string(value), label);
  std::vector<std::string> out;
  for (const auto& p : parts) out.push_back(decode_string(p));
  return out;
}

void RankContext::send(int peer, const Tensor& x, std::string_view label) {
  if (peer < 0 || peer >= world_size_ || peer == rank_) {
    throw CollectiveError("send: invalid peer " + std::to_string(peer) + " from rank " +
                          std::to_string(rank_));
  }
  const int64_t seq = channel_seq_[{rank_, peer}]++;
  if (transport_->aborted()) throw AbortedError("rank " + std::to_string(rank_) + ": world aborted before send");
  CollectiveRecord& rec = open_record(CollectiveKind::kSend, {rank_, peer}, seq, peer, x.nbytes(), label);
  {
    std::lock_guard lock(transport_->mu_);
    transport_->channels_[{rank_, peer}].push_back(Message{std::string(label), x});
    transport_->cv_.notify_all();
  }
  rec.start_t = tick();
  rec.end_t = tick();
  account(CollectiveKind::kSend, x.nbytes(), 0);
}

Tensor RankContext::recv(int peer, const Shape& shape, DType dtype, std::string_view label,
                         std::string_view expect_label) {
  if (peer < 0 || peer >= world_size_ || peer == rank_) {
    throw CollectiveError("recv: invalid peer " + std::to_string(peer) + " at rank " +
                          std::to_string(rank_));
  }
  const int64_t seq = channel_seq_[{peer, rank_}]++;
  const std::string chan = "channel " + std::to_string(peer) + "->" + std::to_string(rank_) +
                           " seq " + std::to_string(seq);
  if (transport_->aborted()) throw AbortedError("rank " + std::to_string(rank_) + ": world aborted before recv on " + chan);
  const size_t record_index = records_.size();
  open_record(CollectiveKind::kRecv, {peer, rank_}, seq, peer, numel_of(shape) * dtype_size(dtype), label);

  std::unique_lock lock(transport_->mu_);
  auto& queue = transport_->channels_[{peer, rank_}];
  const bool ok = transport_->cv_.wait_for(lock, transport_->timeout_, [&] {
    return !queue.empty() || transport_->aborted_;
  });
  if (queue.empty()) {
    const bool was_aborted = transport_->aborted_;
    transport_->aborted_ = true;
    transport_->cv_.notify_all();
    lock.unlock();
    if (!ok && !was_aborted) {
      throw HangError("rank " + std::to_string(rank_) + " timed out after " +
                      std::to_string(transport_->timeout_.count()) + " ms in recv on " + chan +
                      (label.empty() ? "" : " (" + std::string(label) + ")"));
    }
    throw AbortedError("rank " + std::to_string(rank_) + ": world aborted during recv on " + chan);
  }
  Message msg = std::move(queue.front());
  queue.pop_front();
  lock.unlock();

  CollectiveRecord& rec = records_[record_index];
  rec.start_t = tick();
  rec.end_t = tick();
  if (msg.payload.shape() != shape || msg.payload.dtype() != dtype) {
    throw CollectiveError("recv on " + chan + ": expected " + shape_str(shape) + " " +
                          dtype_name(dtype) + ", got " + shape_str(msg.payload.shape()) + " " +
                          dtype_name(msg.payload.dtype()));
  }
  if (!expect_label.empty() && msg.label != expect_label) {
    throw CollectiveError("recv on " + chan + ": expected message '" + std::string(expect_label) +
                          "', got '" + msg.label + "'");
  }
  account(CollectiveKind::kRecv, 0, msg.payload.nbytes());
  return std::move(msg.payload);
}

WorldTrace run_world_raw(int world_size, const std::function<void(RankContext&)>& entry,
                         const WorldOptions& options) {
  if (world_size < 1) throw std::invalid_argument("world size must be >= 1");
  Transport transport(world_size, options);
  std::vector<std::unique_ptr<RankContext>> contexts;
  for (int r = 0; r < world_size; ++r) {
    contexts.push_back(std::make_unique<RankContext>(r, world_size, &transport));
  }
  std::mutex fail_mu;
  std::exception_ptr first_error;
  int failing_rank = -1;
  std::string first_message;

  auto body = [&](int r) {
    try {
      entry(*contexts[static_cast<size_t>(r)]);
    } catch (const AbortedError&) {
      // secondary failure; the primary one is reported
    } catch (const std::exception& e) {
      {
        std::lock_guard lock(fail_mu);
        if (!first_error) {
          first_error = std::current_exception();
          failing_rank = r;
          first_message = e.what();
        }
      }
      transport.abort();
    } catch (...) {
      {
        std::lock_guard lock(fail_mu);
        if (!first_error) {
          first_error = std::current_exception();
          failing_rank = r;
          first_message = "unknown exception";
        }
      }
      transport.abort();
    }
  };

  if (world_size == 1) {
    body(0);
  } else {
    std::vector<std::thread> threads;
    for (int r = 0; r < world_size; ++r) threads.emplace_back(body, r);
    for (auto& t : threads) t.join();
  }

  WorldTrace trace;
  for (const auto& ctx : contexts) {
    trace.records.insert(trace.records.end(), ctx->records().begin(), ctx->records().end());
    trace.ledgers.push_back(ctx->ledger());
  }
  std::stable_sort(trace.records.begin(), trace.records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.rank, a.enqueue_t) < std::tie(b.rank, b.enqueue_t);
  });
  if (first_error) {
    HangReport report = analyze_recorder(trace.records);
    std::string what = "rank " + std::to_string(failing_rank) + " failed: " + first_message;
    if (!report.empty()) what += "\n" + report.text();
    throw WorldError(what, failing_rank, std::move(trace.records), std::move(report));
  }
  return trace;
}

}  // namespace titanlab::sim
