// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/simruntime/recorder.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace titanlab::sim {

using nlohmann::json;

namespace {
constexpr const char* kKindNames[] = {"all_reduce", "all_gather", "reduce_scatter", "broadcast",
                                      "all_to_all", "send",       "recv",           "barrier"};

std::string join(const std::vector<int>& v) {
  std::string s = "{";
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "}";
}
}  // namespace

const char* kind_name(CollectiveKind kind) { return kKindNames[static_cast<int>(kind)]; }

CollectiveKind kind_from_name(const std::string& name) {
  for (int i = 0; i < 8; ++i) {
    if (name == kKindNames[i]) return static_cast<CollectiveKind>(i);
  }
  throw std::invalid_argument("unknown collective kind '" + name + "'");
}

std::string record_to_json(const CollectiveRecord& r) {
  json j;
  j["seq_id"] = r.seq_id;
  j["kind"] = kind_name(r.kind);
  j["group"] = r.group;
  j["rank"] = r.rank;
  j["peer"] = r.peer ? json(*r.peer) : json(nullptr);
  j["bytes"] = r.bytes;
  j["enqueue_t"] = r.enqueue_t;
  j["start_t"] = r.start_t ? json(*r.start_t) : json(nullptr);
  j["end_t"] = r.end_t ? json(*r.end_t) : json(nullptr);
  j["label"] = r.label;
  if (r.overlappable) j["overlappable"] = true;
  return j.dump();
}

CollectiveRecord record_from_json(const std::string& line) {
  const json j = json::parse(line);
  CollectiveRecord r;
  r.seq_id = j.at("seq_id").get<int64_t>();
  r.kind = kind_from_name(j.at("kind").get<std::string>());
  r.group = j.at("group").get<Group>();
  r.rank = j.at("rank").get<int>();
  if (!j.at("peer").is_null()) r.peer = j.at("peer").get<int>();
  r.bytes = j.at("bytes").get<int64_t>();
  r.enqueue_t = j.at("enqueue_t").get<int64_t>();
  if (!j.at("start_t").is_null()) r.start_t = j.at("start_t").get<int64_t>();
  if (!j.at("end_t").is_null()) r.end_t = j.at("end_t").get<int64_t>();
  r.label = j.value("label", "");
  r.overlappable = j.value("overlappable", false);
  return r;
}

void write_dump(const std::filesystem::path& path, std::vector<CollectiveRecord> records) {
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.rank, a.enqueue_t) < std::tie(b.rank, b.enqueue_t);
  });
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open flight-recorder dump " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::vector<CollectiveRecord> read_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read flight-recorder dump " + path.string());
  std::vector<CollectiveRecord> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

HangReport analyze_recorder(const std::vector<CollectiveRecord>& records) {
  HangReport report;

  // Collectives: per group, walk seq ids upward until one is not complete on
  // every member.
  std::map<std::string, std::map<int64_t, std::vector<const CollectiveRecord*>>> by_group;
  std::map<std::string, Group> groups;
  for (const auto& r : records) {
    if (is_p2p(r.kind)) continue;
    const std::string key = group_key(r.group);
    by_group[key][r.seq_id].push_back(&r);
    groups[key] = r.group;
  }
  for (const auto& [key, seqs] : by_group) {
    const Group& members = groups[key];
    std::map<int, int64_t> last_enqueued;
    for (const auto& [seq, recs] : seqs) {
      for (const auto* r : recs) last_enqueued[r->rank] = std::max(last_enqueued[r->rank], seq);
    }
    int64_t last_complete = -1;
    for (const auto& [seq, recs] : seqs) {
      std::set<int> enq;
      std::vector<int> waiting;
      for (const auto* r : recs) {
        enq.insert(r->rank);
        if (!r->completed()) waiting.push_back(r->rank);
      }
      std::vector<int> missing;
      for (int m : members) {
        if (!enq.count(m)) missing.push_back(m);
      }
      if (missing.empty() && waiting.empty()) {
        last_complete = seq;
        continue;
      }
      CollectiveIssue issue;
      issue.group = members;
      issue.seq_id = seq;
      issue.kind = recs.front()->kind;
      issue.label = recs.front()->label;
      issue.missing = missing;
      std::sort(waiting.begin(), waiting.end());
      issue.waiting = waiting;
      issue.last_completed_by_all = last_complete;
      issue.last_enqueued = last_enqueued;
      report.collectives.push_back(std::move(issue));
      break;
    }
  }

  // Point-to-point: per (src, dst) channel compare the send and recv streams.
  struct Channel {
    std::map<int64_t, const CollectiveRecord*> sends;
    std::map<int64_t, const CollectiveRecord*> recvs;
  };
  std::map<std::pair<int, int>, Channel> channels;
  for (const auto& r : records) {
    if (!is_p2p(r.kind) || !r.peer) continue;
    if (r.kind == CollectiveKind::kSend) {
      channels[{r.rank, *r.peer}].sends[r.seq_id] = &r;
    } else {
      channels[{*r.peer, r.rank}].recvs[r.seq_id] = &r;
    }
  }
  for (const auto& [chan, c] : channels) {
    P2PIssue issue;
    issue.src = chan.first;
    issue.dst = chan.second;
    for (const auto& [seq, r] : c.sends) {
      if (r->completed()) issue.last_completed_send = std::max(issue.last_completed_send, seq);
    }
    for (const auto& [seq, r] : c.recvs) {
      if (r->completed()) issue.last_completed_recv = std::max(issue.last_completed_recv, seq);
    }
    for (const auto& [seq, r] : c.recvs) {
      if (!r->completed()) {
        issue.blocked_recv = seq;
        issue.label = r->label;
        break;
      }
    }
    for (const auto& [seq, r] : c.sends) {
      if (!c.recvs.count(seq)) {
        issue.unreceived_send = seq;
        if (issue.label.empty()) issue.label = r->label;
        break;
      }
    }
    if (issue.blocked_recv || issue.unreceived_send) report.p2p.push_back(std::move(issue));
  }
  return report;
}

std::string HangReport::text() const {
  std::ostringstream os;
  for (const auto& c : collectives) {
    os << "collective hang: group [" << group_key(c.group) << "] kind " << kind_name(c.kind)
       << " seq " << c.seq_id;
    if (!c.label.empty()) os << " (" << c.label << ")";
    os << ": missing ranks " << join(c.missing) << ", waiting ranks " << join(c.waiting)
       << ", last seq completed by all " << c.last_completed_by_all << "\n";
  }
  for (const auto& p : p2p) {
    os << "p2p hang: channel " << p.src << "->" << p.dst << ": last completed send seq "
       << p.last_completed_send << ", last completed recv seq " << p.last_completed_recv;
    if (p.blocked_recv) {
      os << "; rank " << p.dst << " blocked in recv seq " << *p.blocked_recv << " (no matching send)";
    }
    if (p.unreceived_send) {
      os << "; rank " << p.dst << " never posted recv seq " << *p.unreceived_send;
    }
    if (!p.label.empty()) os << " [" << p.label << "]";
    os << "\n";
  }
  return os.str();
}

}  // namespace titanlab::sim
