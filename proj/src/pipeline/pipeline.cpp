// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/pipeline/pipeline.h"

#include <algorithm>
#include <deque>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <tuple>

namespace titanlab::pp {

using Kind = ScheduleAction::Kind;

ScheduleKind schedule_from_name(const std::string& name) {
  if (name == "gpipe" || name == "GPipe") return ScheduleKind::kGPipe;
  if (name == "1f1b" || name == "1F1B") return ScheduleKind::k1F1B;
  if (name == "interleaved_1f1b" || name == "Interleaved1F1B") return ScheduleKind::kInterleaved1F1B;
  if (name == "zero_bubble" || name == "ZeroBubble") return ScheduleKind::kZeroBubble;
  throw PipelineError("unknown pipeline schedule '" + name + "'");
}

const char* schedule_name(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kGPipe: return "gpipe";
    case ScheduleKind::k1F1B: return "1f1b";
    case ScheduleKind::kInterleaved1F1B: return "interleaved_1f1b";
    case ScheduleKind::kZeroBubble: return "zero_bubble";
  }
  return "?";
}

void PipelineConfig::validate() const {
  if (degree < 1) throw PipelineError("pipeline degree must be >= 1");
  if (microbatches < 1) throw PipelineError("pipeline needs at least one microbatch");
  if (num_stages() % degree != 0) {
    throw PipelineError(std::to_string(num_stages()) + " stages do not divide over " + std::to_string(degree) +
                        " pipeline ranks");
  }
  const int64_t v = stages_per_rank();
  if (v != 1 && schedule != ScheduleKind::kInterleaved1F1B) {
    throw PipelineError(std::string("schedule ") + schedule_name(schedule) + " runs one stage per rank, got " +
                        std::to_string(v));
  }
}

// ---- splitting -----------------------------------------------------------------------

namespace {

// Block boundary a split point names: "layers.i" -> i, "norm" -> n_layers.
int64_t boundary_of(const std::string& fqn, int64_t n_layers) {
  if (fqn == "norm") return n_layers;
  static const std::regex layer_re(R"(layers\.(\d+))");
  std::smatch m;
  if (std::regex_match(fqn, m, layer_re)) {
    const int64_t i = std::stoll(m[1]);
    if (i < n_layers) return i;
    throw PipelineError("split point '" + fqn + "' names a layer past the last one");
  }
  if (fqn.rfind("layers.", 0) == 0) {
    throw PipelineError("split point '" + fqn + "' is inside a block; splits are at block boundaries");
  }
  throw PipelineError("unknown split point FQN '" + fqn + "'");
}

}  // namespace

std::vector<par::StageSpec> split_model(const model::MetaModel& meta, const PipelineConfig& cfg) {
  cfg.validate();
  const int64_t n_layers = meta.config().n_layers;
  std::vector<int64_t> bounds = {0};
  for (const auto& sp : cfg.split_points) {
    const int64_t b = boundary_of(sp, n_layers);
    const bool first = bounds.size() == 1;
    if ((!first && b <= bounds.back()) || (first && b < 0)) {
      throw PipelineError("split points are not in increasing layer order at '" + sp + "'");
    }
    bounds.push_back(b);
  }
  bounds.push_back(n_layers);
  std::vector<par::StageSpec> stages;
  const size_t n = bounds.size() - 1;
  for (size_t j = 0; j < n; ++j) {
    par::StageSpec st{bounds[j], bounds[j + 1], j == 0, j + 1 == n};
    if (st.first_layer == st.last_layer && !st.has_embedding && !st.has_head) {
      throw PipelineError("pipeline stage " + std::to_string(j) + " would be empty");
    }
    stages.push_back(st);
  }
  return stages;
}

int64_t stage_rank(const PipelineConfig& cfg, int64_t stage) { return stage % cfg.degree; }

std::vector<int64_t> rank_stages(const PipelineConfig& cfg, int64_t rank) {
  std::vector<int64_t> out;
  for (int64_t s = rank; s < cfg.num_stages(); s += cfg.degree) out.push_back(s);
  return out;
}

std::vector<std::string> even_split_points(int64_t n_layers, int64_t stages) {
  // units: embedding, each block, head; split before a block or before the head
  const int64_t units = n_layers + 2;
  if (stages < 1 || stages > units) {
    throw PipelineError("cannot split " + std::to_string(n_layers) + " layers into " + std::to_string(stages) +
                        " stages");
  }
  std::vector<std::string> out;
  for (int64_t j = 1; j < stages; ++j) {
    const int64_t u = j * units / stages;
    out.push_back(u <= n_layers ? "layers." + std::to_string(u - 1) : "norm");
  }
  return out;
}

// ---- actions ----------------------------------------------------------------------------

namespace {

const char* kind_tag(Kind k) {
  switch (k) {
    case Kind::kForward: return "F";
    case Kind::kBackward: return "B";
    case Kind::kBackwardInput: return "BI";
    case Kind::kBackwardWeight: return "BW";
    case Kind::kSendAct: return "SendAct";
    case Kind::kRecvAct: return "RecvAct";
    case Kind::kSendGrad: return "SendGrad";
    case Kind::kRecvGrad: return "RecvGrad";
  }
  return "?";
}

}  // namespace

std::string ScheduleAction::str() const {
  std::string s = std::string(kind_tag(kind)) + "(s=" + std::to_string(stage) + ",mb=" + std::to_string(mb);
  if (!is_compute()) s += ",peer=" + std::to_string(peer);
  return s + ")";
}

// ---- schedule construction ------------------------------------------------------------

namespace {

ScheduleAction act(Kind k, int64_t s, int64_t mb) { return {k, s, mb, -1}; }

// Greedy discrete-event construction used by the zero-bubble schedule and by
// looped schedules whose microbatch count is not a multiple of S: each free rank takes the first ready action its policy allows.
// Built from a feasible timeline, the resulting order cannot deadlock.
class Builder {
 public:
  Builder(int64_t S, int64_t V, int64_t m) : S_(S), V_(V), m_(m), N_(S * V) {
    const auto n = static_cast<size_t>(N_ * m_);
    f_end_.assign(n, -1);
    bi_end_.assign(n, -1);
  }

  std::vector<std::vector<ScheduleAction>> interleaved() {
    struct Rank {
      std::vector<std::pair<int64_t, int64_t>> fq, bq;  // (stage, mb)
      size_t fi = 0, bi = 0;
      int64_t cap = 0;
    };
    std::vector<Rank> ranks(static_cast<size_t>(S_));
    for (int64_t r = 0; r < S_; ++r) {
      Rank& rk = ranks[static_cast<size_t>(r)];
      std::vector<std::tuple<int64_t, int64_t, int64_t, int64_t>> fk, bk;
      for (int64_t c = 0; c < V_; ++c) {
        for (int64_t k = 0; k < m_; ++k) {
          fk.emplace_back(k / S_, c, k % S_, k);
          bk.emplace_back(k / S_, V_ - 1 - c, k % S_, k);
        }
      }
      std::sort(fk.begin(), fk.end());
      std::sort(bk.begin(), bk.end());
      for (auto [g, c, j, k] : fk) rk.fq.emplace_back(c * S_ + r, k);
      for (auto [g, c, j, k] : bk) rk.bq.emplace_back((V_ - 1 - c) * S_ + r, k);
      const int64_t total = V_ * m_;
      rk.cap = std::min(total, (S_ - r - 1) * 2 + (V_ - 1) * S_ + 1);
    }
    auto pick = [&](int64_t r, int64_t t, int64_t bonus) -> std::optional<ScheduleAction> {
      Rank& rk = ranks[static_cast<size_t>(r)];
      const bool f_left = rk.fi < rk.fq.size(), b_left = rk.bi < rk.bq.size();
      const bool f_ready = f_left && fwd_ready(rk.fq[rk.fi].first, rk.fq[rk.fi].second, t);
      const bool b_ready = b_left && bwd_ready(rk.bq[rk.bi].first, rk.bq[rk.bi].second, t);
      const auto inflight = static_cast<int64_t>(rk.fi - rk.bi);
      if (f_ready && inflight < rk.cap + bonus && (static_cast<int64_t>(rk.fi) < rk.cap || !b_ready)) {
        auto [s, k] = rk.fq[rk.fi++];
        return act(Kind::kForward, s, k);
      }
      if (b_ready) {
        auto [s, k] = rk.bq[rk.bi++];
        return act(Kind::kBackward, s, k);
      }
      return std::nullopt;
    };
    return run(pick, {1, 1, 1});
  }

  std::vector<std::vector<ScheduleAction>> zero_bubble() {
    struct Rank {
      int64_t fi = 0, bi = 0;
      std::deque<int64_t> bw;
    };
    std::vector<Rank> ranks(static_cast<size_t>(S_));
    auto pick = [&](int64_t r, int64_t t, int64_t bonus) -> std::optional<ScheduleAction> {
      Rank& rk = ranks[static_cast<size_t>(r)];
      const int64_t limit = S_ - r + bonus;
      const bool f_ready = rk.fi < m_ && fwd_ready(r, rk.fi, t);
      const bool b_ready = rk.bi < m_ && bwd_ready(r, rk.bi, t);
      if (f_ready && rk.fi < S_ - r) return act(Kind::kForward, r, rk.fi++);
      if (b_ready) {
        rk.bw.push_back(rk.bi);
        return act(Kind::kBackwardInput, r, rk.bi++);
      }
      if (f_ready && rk.fi - rk.bi < limit) return act(Kind::kForward, r, rk.fi++);
      if (!rk.bw.empty()) {
        const int64_t k = rk.bw.front();
        rk.bw.pop_front();
        return act(Kind::kBackwardWeight, r, k);
      }
      return std::nullopt;
    };
    return run(pick, {1, 1, 1});
  }

 private:
  size_t idx(int64_t s, int64_t k) const { return static_cast<size_t>(s * m_ + k); }
  bool done(const std::vector<int64_t>& v, int64_t s, int64_t k, int64_t t) const {
    const int64_t e = v[idx(s, k)];
    return e >= 0 && e <= t;
  }
  bool fwd_ready(int64_t s, int64_t k, int64_t t) const { return s == 0 || done(f_end_, s - 1, k, t); }
  bool bwd_ready(int64_t s, int64_t k, int64_t t) const {
    return done(f_end_, s, k, t) && (s == N_ - 1 || done(bi_end_, s + 1, k, t));
  }

  template <typename Pick>
  std::vector<std::vector<ScheduleAction>> run(Pick& pick, const UnitCosts& c) {
    std::vector<std::vector<ScheduleAction>> out(static_cast<size_t>(S_));
    std::vector<int64_t> busy(static_cast<size_t>(S_), 0);
    int64_t t = 0, bonus = 0;
    auto finished = [&] {
      for (size_t i = 0; i < f_end_.size(); ++i) {
        if (f_end_[i] < 0 || bi_end_[i] < 0) return false;
      }
      return true;
    };
    size_t emitted_bw = 0, expected_bw = 0;
    for (;;) {
      bool picked = false;
      for (int64_t r = 0; r < S_; ++r) {
        if (busy[static_cast<size_t>(r)] > t) continue;
        auto a = pick(r, t, bonus);
        if (!a) continue;
        picked = true;
        int64_t cost = c.forward;
        if (a->kind == Kind::kForward) {
          f_end_[idx(a->stage, a->mb)] = t + cost;
        } else if (a->kind == Kind::kBackward) {
          cost = c.backward_input + c.backward_weight;
          bi_end_[idx(a->stage, a->mb)] = t + cost;
        } else if (a->kind == Kind::kBackwardInput) {
          cost = c.backward_input;
          bi_end_[idx(a->stage, a->mb)] = t + cost;
          ++expected_bw;
        } else {
          cost = c.backward_weight;
          ++emitted_bw;
        }
        busy[static_cast<size_t>(r)] = t + cost;
        out[static_cast<size_t>(r)].push_back(*a);
      }
      int64_t next = -1;
      for (int64_t b : busy) {
        if (b > t && (next < 0 || b < next)) next = b;
      }
      if (next >= 0) {
        t = next;
        bonus = 0;
        continue;
      }
      if (finished() && emitted_bw == expected_bw) break;
      if (!picked) ++bonus;  // every rank idle: relax the in-flight limit
      if (bonus > V_ * m_ + 1) throw std::logic_error("pipeline schedule construction stalled");
    }
    return out;
  }

  int64_t S_, V_, m_, N_;
  std::vector<int64_t> f_end_, bi_end_;
};

// Megatron-style looped 1F1B, for m divisible by S: microbatches advance in
// groups of S through the V local stages, with (S-r-1)*2 + (V-1)*S warmup
// forwards on rank r, then strict F/B alternation.
std::vector<std::vector<ScheduleAction>> looped_1f1b(int64_t S, int64_t V, int64_t m) {
  const int64_t total = V * m;
  auto unit = [&](int64_t r, int64_t k, bool backward) {
    const int64_t group = k / (S * V), w = k % (S * V);
    const int64_t chunk = backward ? V - 1 - w / S : w / S;
    return act(backward ? Kind::kBackward : Kind::kForward, chunk * S + r, group * S + w % S);
  };
  std::vector<std::vector<ScheduleAction>> out(static_cast<size_t>(S));
  for (int64_t r = 0; r < S; ++r) {
    auto& l = out[static_cast<size_t>(r)];
    const int64_t warmup = std::min(total, (S - r - 1) * 2 + (V - 1) * S);
    int64_t f = 0, b = 0;
    while (f < warmup) l.push_back(unit(r, f++, false));
    while (f < total) {
      l.push_back(unit(r, f++, false));
      l.push_back(unit(r, b++, true));
    }
    while (b < total) l.push_back(unit(r, b++, true));
  }
  return out;
}

}  // namespace

std::vector<std::vector<ScheduleAction>> build_compute(const PipelineConfig& cfg) {
  cfg.validate();
  const int64_t S = cfg.degree, m = cfg.microbatches;
  std::vector<std::vector<ScheduleAction>> out(static_cast<size_t>(S));
  switch (cfg.schedule) {
    case ScheduleKind::kGPipe:
      for (int64_t r = 0; r < S; ++r) {
        auto& l = out[static_cast<size_t>(r)];
        for (int64_t k = 0; k < m; ++k) l.push_back(act(Kind::kForward, r, k));
        for (int64_t k = 0; k < m; ++k) l.push_back(act(Kind::kBackward, r, k));
      }
      return out;
    case ScheduleKind::k1F1B:
      for (int64_t r = 0; r < S; ++r) {
        auto& l = out[static_cast<size_t>(r)];
        const int64_t warmup = std::min(S - r, m);
        for (int64_t k = 0; k < warmup; ++k) l.push_back(act(Kind::kForward, r, k));
        for (int64_t k = 0; k < m; ++k) {
          l.push_back(act(Kind::kBackward, r, k));
          if (warmup + k < m) l.push_back(act(Kind::kForward, r, warmup + k));
        }
      }
      return out;
    case ScheduleKind::kInterleaved1F1B:
      if (m % S == 0) return looped_1f1b(S, cfg.stages_per_rank(), m);
      return Builder(S, cfg.stages_per_rank(), m).interleaved();
    case ScheduleKind::kZeroBubble: return Builder(S, 1, m).zero_bubble();
  }
  return out;
}

PipelineSchedule insert_comms(const PipelineConfig& cfg, std::vector<std::vector<ScheduleAction>> compute) {
  PipelineSchedule sched;
  sched.kind = cfg.schedule;
  sched.degree = cfg.degree;
  sched.stages_per_rank = cfg.stages_per_rank();
  sched.microbatches = cfg.microbatches;
  sched.grad_scale = 1.0 / static_cast<double>(cfg.microbatches);
  const int64_t n = sched.num_stages();
  const auto S = static_cast<int64_t>(compute.size());
  auto fwd = [](const ScheduleAction& a) { return a.kind == Kind::kForward; };
  auto bwd_in = [](const ScheduleAction& a) {
    return a.kind == Kind::kBackward || a.kind == Kind::kBackwardInput;
  };
  // sends go right after their producer; this fixes each channel's order
  std::map<std::pair<int64_t, int64_t>, std::vector<ScheduleAction>> channel;  // (src, dst) -> recv actions
  for (int64_t r = 0; r < S; ++r) {
    for (const auto& a : compute[static_cast<size_t>(r)]) {
      const int64_t s = a.stage;
      if (fwd(a) && s < n - 1 && sched.owner(s + 1) != r) {
        channel[{r, sched.owner(s + 1)}].push_back({Kind::kRecvAct, s + 1, a.mb, r});
      }
      if (bwd_in(a) && s > 0 && sched.owner(s - 1) != r) {
        channel[{r, sched.owner(s - 1)}].push_back({Kind::kRecvGrad, s - 1, a.mb, r});
      }
    }
  }
  std::map<std::pair<int64_t, int64_t>, size_t> next_recv;
  sched.ranks.resize(compute.size());
  for (int64_t r = 0; r < S; ++r) {
    auto& l = sched.ranks[static_cast<size_t>(r)];
    // receive everything queued ahead of `want` on its channel, then `want`
    auto receive = [&](const ScheduleAction& want) {
      const auto& q = channel[{want.peer, r}];
      auto& i = next_recv[{want.peer, r}];
      for (size_t j = i; j < q.size(); ++j) {
        if (q[j] == want) {
          l.insert(l.end(), q.begin() + static_cast<std::ptrdiff_t>(i), q.begin() + static_cast<std::ptrdiff_t>(j) + 1);
          i = j + 1;
          return;
        }
      }
      // already received earlier, ahead of another message
    };
    for (const auto& a : compute[static_cast<size_t>(r)]) {
      const int64_t s = a.stage;
      if (fwd(a) && s > 0 && sched.owner(s - 1) != r) receive({Kind::kRecvAct, s, a.mb, sched.owner(s - 1)});
      if (bwd_in(a) && s < n - 1 && sched.owner(s + 1) != r) {
        receive({Kind::kRecvGrad, s, a.mb, sched.owner(s + 1)});
      }
      l.push_back(a);
      if (fwd(a) && s < n - 1 && sched.owner(s + 1) != r) l.push_back({Kind::kSendAct, s, a.mb, sched.owner(s + 1)});
      if (bwd_in(a) && s > 0 && sched.owner(s - 1) != r) l.push_back({Kind::kSendGrad, s, a.mb, sched.owner(s - 1)});
    }
  }
  return sched;
}

PipelineSchedule build_schedule(const PipelineConfig& cfg) { return insert_comms(cfg, build_compute(cfg)); }

// ---- validation ----------------------------------------------------------------------------

namespace {

// What a comm action carries: (is grad, producing stage, mb).
using MsgKey = std::tuple<bool, int64_t, int64_t>;

MsgKey message_of(const ScheduleAction& a) {
  switch (a.kind) {
    case Kind::kSendAct: return {false, a.stage, a.mb};
    case Kind::kRecvAct: return {false, a.stage - 1, a.mb};
    case Kind::kSendGrad: return {true, a.stage, a.mb};
    case Kind::kRecvGrad: return {true, a.stage + 1, a.mb};
    default: return {false, -1, -1};
  }
}

std::string msg_str(const MsgKey& k) {
  return std::string(std::get<0>(k) ? "grad" : "act") + "(s=" + std::to_string(std::get<1>(k)) +
         ",mb=" + std::to_string(std::get<2>(k)) + ")";
}

bool is_send(Kind k) { return k == Kind::kSendAct || k == Kind::kSendGrad; }

ScheduleIssue issue(std::string what, int64_t rank, int64_t index, int64_t other = -1) {
  return {std::move(what), rank, index, other};
}

}  // namespace

std::optional<ScheduleIssue> validate_schedule(const PipelineSchedule& sched) {
  const int64_t S = sched.degree, N = sched.num_stages(), m = sched.microbatches;
  if (static_cast<int64_t>(sched.ranks.size()) != S) {
    return issue("schedule has " + std::to_string(sched.ranks.size()) + " rank lists for degree " +
                     std::to_string(S),
                 -1, -1);
  }
  // structure: ranges, ownership, peers
  for (int64_t r = 0; r < S; ++r) {
    const auto& l = sched.ranks[static_cast<size_t>(r)];
    for (size_t i = 0; i < l.size(); ++i) {
      const auto& a = l[i];
      const auto ii = static_cast<int64_t>(i);
      if (a.stage < 0 || a.stage >= N || a.mb < 0 || a.mb >= m) {
        return issue(a.str() + " is out of range", r, ii);
      }
      if (sched.owner(a.stage) != r) return issue(a.str() + " issued by a rank not owning the stage", r, ii);
      if (a.is_compute()) continue;
      const bool towards_next = a.kind == Kind::kSendAct || a.kind == Kind::kRecvGrad;
      const int64_t nb = towards_next ? a.stage + 1 : a.stage - 1;
      if (nb < 0 || nb >= N) return issue(a.str() + " has no neighbouring stage", r, ii);
      if (a.peer != sched.owner(nb) || a.peer == r) return issue(a.str() + " names the wrong peer", r, ii);
    }
  }
  // each microbatch exactly once per compute kind per stage
  {
    std::vector<int64_t> f(static_cast<size_t>(N * m)), bi(f.size()), bw(f.size());
    std::vector<std::pair<int64_t, int64_t>> where(f.size(), {-1, -1});
    for (int64_t r = 0; r < S; ++r) {
      const auto& l = sched.ranks[static_cast<size_t>(r)];
      for (size_t i = 0; i < l.size(); ++i) {
        const auto& a = l[i];
        if (!a.is_compute()) continue;
        const auto x = static_cast<size_t>(a.stage * m + a.mb);
        where[x] = {r, static_cast<int64_t>(i)};
        if (a.kind == Kind::kForward) ++f[x];
        if (a.kind == Kind::kBackward || a.kind == Kind::kBackwardInput) ++bi[x];
        if (a.kind == Kind::kBackward || a.kind == Kind::kBackwardWeight) ++bw[x];
      }
    }
    for (int64_t s = 0; s < N; ++s) {
      for (int64_t k = 0; k < m; ++k) {
        const auto x = static_cast<size_t>(s * m + k);
        const std::string at = "(s=" + std::to_string(s) + ",mb=" + std::to_string(k) + ")";
        if (f[x] != 1) return issue("forward" + at + " appears " + std::to_string(f[x]) + " times", sched.owner(s), where[x].second);
        if (bi[x] != 1) {
          return issue("input backward" + at + " appears " + std::to_string(bi[x]) + " times", sched.owner(s),
                       where[x].second);
        }
        if (bw[x] != 1) {
          return issue("weight backward" + at + " appears " + std::to_string(bw[x]) + " times", sched.owner(s),
                       where[x].second);
        }
      }
    }
  }
  // channels: matching and FIFO order
  std::map<std::pair<int64_t, int64_t>, std::vector<int64_t>> sends, recvs;  // (src,dst) -> action index
  for (int64_t r = 0; r < S; ++r) {
    const auto& l = sched.ranks[static_cast<size_t>(r)];
    for (size_t i = 0; i < l.size(); ++i) {
      const auto& a = l[i];
      if (a.is_compute()) continue;
      if (is_send(a.kind)) sends[{r, a.peer}].push_back(static_cast<int64_t>(i));
      else recvs[{a.peer, r}].push_back(static_cast<int64_t>(i));
    }
  }
  std::set<std::pair<int64_t, int64_t>> channels;
  for (const auto& [c, v] : sends) channels.insert(c);
  for (const auto& [c, v] : recvs) channels.insert(c);
  std::map<std::pair<int64_t, int64_t>, std::pair<int64_t, int64_t>> match;  // (dst, recv idx) -> (src, send idx)
  for (const auto& ch : channels) {
    const auto& sv = sends[ch];
    const auto& rv = recvs[ch];
    const auto& sl = sched.ranks[static_cast<size_t>(ch.first)];
    const auto& rl = sched.ranks[static_cast<size_t>(ch.second)];
    std::multiset<MsgKey> sent;
    for (int64_t i : sv) sent.insert(message_of(sl[static_cast<size_t>(i)]));
    for (int64_t i : rv) {
      const MsgKey k = message_of(rl[static_cast<size_t>(i)]);
      auto it = sent.find(k);
      if (it == sent.end()) {
        return issue("deadlock: " + rl[static_cast<size_t>(i)].str() + " blocks forever, rank " +
                         std::to_string(ch.first) + " never sends " + msg_str(k),
                     ch.second, i);
      }
      sent.erase(it);
    }
    if (!sent.empty()) {
      for (int64_t i : sv) {
        if (sent.count(message_of(sl[static_cast<size_t>(i)]))) {
          return issue(sl[static_cast<size_t>(i)].str() + " is never received", ch.first, i);
        }
      }
    }
    for (size_t j = 0; j < rv.size(); ++j) {
      const MsgKey want = message_of(rl[static_cast<size_t>(rv[j])]);
      const MsgKey got = message_of(sl[static_cast<size_t>(sv[j])]);
      if (want != got) {
        return issue("FIFO violation on channel " + std::to_string(ch.first) + "->" + std::to_string(ch.second) +
                         ": receive #" + std::to_string(j) + " expects " + msg_str(want) + " but gets " +
                         msg_str(got),
                     ch.second, rv[j]);
      }
      match[{ch.second, rv[j]}] = {ch.first, sv[j]};
    }
  }
  // happens-before graph: program order plus send -> recv
  std::vector<int64_t> base(static_cast<size_t>(S) + 1, 0);
  for (int64_t r = 0; r < S; ++r) {
    base[static_cast<size_t>(r) + 1] = base[static_cast<size_t>(r)] + static_cast<int64_t>(sched.ranks[static_cast<size_t>(r)].size());
  }
  const auto total = static_cast<size_t>(base.back());
  auto node = [&](int64_t r, int64_t i) { return static_cast<size_t>(base[static_cast<size_t>(r)] + i); };
  std::vector<std::vector<size_t>> preds(total);
  for (int64_t r = 0; r < S; ++r) {
    const auto n = static_cast<int64_t>(sched.ranks[static_cast<size_t>(r)].size());
    for (int64_t i = 1; i < n; ++i) preds[node(r, i)].push_back(node(r, i - 1));
  }
  for (const auto& [rcv, snd] : match) preds[node(rcv.first, rcv.second)].push_back(node(snd.first, snd.second));
  std::vector<std::vector<size_t>> succs(total);
  std::vector<size_t> indeg(total);
  for (size_t v = 0; v < total; ++v) {
    indeg[v] = preds[v].size();
    for (size_t p : preds[v]) succs[p].push_back(v);
  }
  std::vector<size_t> order;
  order.reserve(total);
  for (size_t v = 0; v < total; ++v) {
    if (indeg[v] == 0) order.push_back(v);
  }
  for (size_t h = 0; h < order.size(); ++h) {
    for (size_t w : succs[order[h]]) {
      if (--indeg[w] == 0) order.push_back(w);
    }
  }
  auto locate = [&](size_t v) {
    int64_t r = 0;
    while (static_cast<size_t>(base[static_cast<size_t>(r) + 1]) <= v) ++r;
    return std::pair<int64_t, int64_t>{r, static_cast<int64_t>(v) - base[static_cast<size_t>(r)]};
  };
  if (order.size() != total) {
    // report the first blocked receive on the cycle
    for (size_t v = 0; v < total; ++v) {
      if (indeg[v] == 0) continue;
      auto [r, i] = locate(v);
      const auto& a = sched.ranks[static_cast<size_t>(r)][static_cast<size_t>(i)];
      if (a.is_compute() || is_send(a.kind)) continue;
      return issue("deadlock: cycle in happens-before graph, " + a.str() + " never completes", r, i);
    }
    return issue("deadlock: cycle in happens-before graph", -1, -1);
  }
  // ancestor sets
  const size_t words = (total + 63) / 64;
  std::vector<std::vector<uint64_t>> anc(total, std::vector<uint64_t>(words, 0));
  for (size_t v : order) {
    for (size_t p : preds[v]) {
      for (size_t w = 0; w < words; ++w) anc[v][w] |= anc[p][w];
      anc[v][p / 64] |= uint64_t{1} << (p % 64);
    }
  }
  std::map<std::tuple<int, int64_t, int64_t>, size_t> compute_node;  // (0 F / 1 BI / 2 BW, stage, mb)
  for (int64_t r = 0; r < S; ++r) {
    const auto& l = sched.ranks[static_cast<size_t>(r)];
    for (size_t i = 0; i < l.size(); ++i) {
      const auto& a = l[i];
      const size_t v = node(r, static_cast<int64_t>(i));
      if (a.kind == Kind::kForward) compute_node[{0, a.stage, a.mb}] = v;
      if (a.kind == Kind::kBackward || a.kind == Kind::kBackwardInput) compute_node[{1, a.stage, a.mb}] = v;
      if (a.kind == Kind::kBackward || a.kind == Kind::kBackwardWeight) compute_node[{2, a.stage, a.mb}] = v;
    }
  }
  auto before = [&](size_t a, size_t b) { return ((anc[b][a / 64] >> (a % 64)) & 1U) != 0; };
  for (int64_t r = 0; r < S; ++r) {
    const auto& l = sched.ranks[static_cast<size_t>(r)];
    for (size_t i = 0; i < l.size(); ++i) {
      const auto& a = l[i];
      const size_t v = node(r, static_cast<int64_t>(i));
      std::vector<std::pair<size_t, std::string>> needs;
      const int64_t s = a.stage, k = a.mb;
      auto need = [&](int kind, int64_t st, const char* what) {
        needs.emplace_back(compute_node.at({kind, st, k}), what);
      };
      switch (a.kind) {
        case Kind::kForward:
          if (s > 0) need(0, s - 1, "forward of the previous stage");
          break;
        case Kind::kBackward:
        case Kind::kBackwardInput:
          need(0, s, "its own forward");
          if (s < N - 1) need(1, s + 1, "input backward of the next stage");
          break;
        case Kind::kBackwardWeight: need(1, s, "its input backward"); break;
        case Kind::kSendAct: need(0, s, "the forward producing it"); break;
        case Kind::kSendGrad: need(1, s, "the backward producing it"); break;
        default: break;
      }
      for (const auto& [p, what] : needs) {
        if (p == v || !before(p, v)) {
          auto [pr, pi] = locate(p);
          return issue("dependency violation: " + a.str() + " does not happen after " + what, r,
                       static_cast<int64_t>(i), pr == r ? pi : -1);
        }
      }
    }
  }
  return std::nullopt;
}

// ---- text form ----------------------------------------------------------------------------

std::string dump_schedule(const PipelineSchedule& sched) {
  std::ostringstream os;
  for (size_t r = 0; r < sched.ranks.size(); ++r) {
    for (const auto& a : sched.ranks[r]) os << "rank " << r << ": " << a.str() << "\n";
  }
  return os.str();
}

PipelineSchedule parse_schedule(const std::string& text, const PipelineConfig& cfg) {
  cfg.validate();
  PipelineSchedule sched = insert_comms(cfg, std::vector<std::vector<ScheduleAction>>(static_cast<size_t>(cfg.degree)));
  static const std::regex line_re(R"(rank (\d+): (\w+)\(s=(\d+),mb=(\d+)(?:,peer=(\d+))?\))");
  static const std::map<std::string, Kind> kinds = {
      {"F", Kind::kForward},         {"B", Kind::kBackward},     {"BI", Kind::kBackwardInput},
      {"BW", Kind::kBackwardWeight}, {"SendAct", Kind::kSendAct}, {"RecvAct", Kind::kRecvAct},
      {"SendGrad", Kind::kSendGrad}, {"RecvGrad", Kind::kRecvGrad}};
  std::istringstream is(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::smatch m;
    if (!std::regex_match(line, m, line_re) || !kinds.count(m[2])) {
      throw PipelineError("schedule line " + std::to_string(lineno) + " is malformed: " + line);
    }
    const int64_t r = std::stoll(m[1]);
    if (r < 0 || r >= cfg.degree) throw PipelineError("schedule line " + std::to_string(lineno) + ": bad rank");
    ScheduleAction a{kinds.at(m[2]), std::stoll(m[3]), std::stoll(m[4]), m[5].matched ? std::stoll(m[5]) : -1};
    if (a.is_compute() == m[5].matched) {
      throw PipelineError("schedule line " + std::to_string(lineno) + ": peer only belongs on comm actions");
    }
    sched.ranks[static_cast<size_t>(r)].push_back(a);
  }
  return sched;
}

// ---- timeline -------------------------------------------------------------------------------

Rational make_rational(int64_t num, int64_t den) {
  if (den == 0) throw std::invalid_argument("zero denominator");
  const int64_t g = std::gcd(num, den);
  Rational q{num / (g == 0 ? 1 : g), den / (g == 0 ? 1 : g)};
  if (q.den < 0) {
    q.num = -q.num;
    q.den = -q.den;
  }
  return q;
}

BubbleReport bubble_analysis(const PipelineSchedule& sched, const UnitCosts& costs) {
  const auto S = static_cast<int64_t>(sched.ranks.size());
  BubbleReport rep;
  std::vector<size_t> pc(static_cast<size_t>(S), 0);
  std::vector<int64_t> free_at(static_cast<size_t>(S), 0), busy(static_cast<size_t>(S), 0);
  std::map<std::pair<int64_t, int64_t>, std::deque<int64_t>> channel;  // delivery times
  auto cost = [&](Kind k) {
    switch (k) {
      case Kind::kForward: return costs.forward;
      case Kind::kBackward: return costs.backward_input + costs.backward_weight;
      case Kind::kBackwardInput: return costs.backward_input;
      case Kind::kBackwardWeight: return costs.backward_weight;
      default: return int64_t{0};
    }
  };
  for (;;) {
    bool progress = false, remaining = false;
    for (int64_t r = 0; r < S; ++r) {
      const auto& l = sched.ranks[static_cast<size_t>(r)];
      auto& p = pc[static_cast<size_t>(r)];
      auto& t = free_at[static_cast<size_t>(r)];
      while (p < l.size()) {
        const auto& a = l[p];
        if (is_send(a.kind)) {
          channel[{r, a.peer}].push_back(t);
        } else if (!a.is_compute()) {
          auto& q = channel[{a.peer, r}];
          if (q.empty()) break;
          t = std::max(t, q.front());
          q.pop_front();
        } else {
          const int64_t c = cost(a.kind);
          rep.timeline.push_back({r, a, t, t + c});
          t += c;
          busy[static_cast<size_t>(r)] += c;
        }
        ++p;
        progress = true;
      }
      if (p < l.size()) remaining = true;
    }
    if (!remaining) break;
    if (!progress) throw PipelineError("schedule deadlocks during timeline replay");
  }
  for (int64_t t : free_at) rep.total_time = std::max(rep.total_time, t);
  const int64_t max_busy = busy.empty() ? 0 : *std::max_element(busy.begin(), busy.end());
  rep.bubble_fraction = rep.total_time == 0 ? Rational{0, 1} : make_rational(rep.total_time - max_busy, rep.total_time);
  for (const auto& l : sched.ranks) {
    int64_t live = 0;
    for (const auto& a : l) {
      if (a.kind == Kind::kForward) rep.peak_inflight_microbatches = std::max(rep.peak_inflight_microbatches, ++live);
      if (a.kind == Kind::kBackward || a.kind == Kind::kBackwardInput) --live;
    }
  }
  std::sort(rep.timeline.begin(), rep.timeline.end(),
            [](const TimelineEntry& a, const TimelineEntry& b) { return std::tie(a.start, a.rank) < std::tie(b.start, b.rank); });
  return rep;
}

// ---- execution ----------------------------------------------------------------------------

namespace {

std::string wire_label(bool grad, int64_t stage, int64_t mb) {
  return std::string(grad ? "pp.grad" : "pp.act") + " s=" + std::to_string(stage) + " mb=" + std::to_string(mb);
}

}  // namespace

StepOutput execute_schedule(sim::RankContext& ctx, const PipelineSchedule& sched, int64_t pp_rank,
                            const std::vector<int>& pp_peers, const std::map<int64_t, par::ModelPart*>& parts,
                            const model::Batch& local_batch) {
  const int64_t N = sched.num_stages(), m = sched.microbatches;
  if (static_cast<int64_t>(pp_peers.size()) != sched.degree) throw PipelineError("pp peer list has the wrong size");
  for (int64_t s = pp_rank; s < N; s += sched.degree) {
    if (!parts.count(s)) throw PipelineError("no model part for owned stage " + std::to_string(s));
  }
  if (local_batch.batch % m != 0) {
    throw PipelineError("local batch of " + std::to_string(local_batch.batch) + " rows does not split into " +
                        std::to_string(m) + " microbatches");
  }
  const int64_t rows = local_batch.batch / m;
  for (auto& [s, p] : parts) p->begin_step(local_batch, m);

  using Key = std::pair<int64_t, int64_t>;
  std::map<Key, Tensor> act_out, act_in, grad_out, grad_in;
  auto take = [](std::map<Key, Tensor>& from, Key k, const char* what) {
    auto it = from.find(k);
    if (it == from.end()) {
      throw PipelineError(std::string("missing ") + what + " for stage " + std::to_string(k.first) + " mb " +
                          std::to_string(k.second));
    }
    Tensor t = std::move(it->second);
    from.erase(it);
    return t;
  };
  for (const auto& a : sched.ranks.at(static_cast<size_t>(pp_rank))) {
    const Key key{a.stage, a.mb};
    par::ModelPart& part = *parts.at(a.stage);
    switch (a.kind) {
      case Kind::kForward: {
        Tensor in;
        if (a.stage > 0) {
          in = sched.owner(a.stage - 1) == pp_rank ? take(act_out, {a.stage - 1, a.mb}, "activation")
                                                   : take(act_in, key, "activation");
        }
        Tensor out = part.forward(a.mb, in);
        if (a.stage < N - 1) act_out[key] = std::move(out);
        break;
      }
      case Kind::kBackward:
      case Kind::kBackwardInput: {
        Tensor d;
        if (a.stage < N - 1) {
          d = sched.owner(a.stage + 1) == pp_rank ? take(grad_out, {a.stage + 1, a.mb}, "gradient")
                                                  : take(grad_in, key, "gradient");
        }
        Tensor g = a.kind == Kind::kBackward ? part.backward(a.mb, d) : part.backward_input(a.mb, d);
        if (a.stage > 0) grad_out[key] = std::move(g);
        break;
      }
      case Kind::kBackwardWeight: part.backward_weight(a.mb); break;
      case Kind::kSendAct:
        ctx.send(pp_peers[static_cast<size_t>(a.peer)], take(act_out, key, "activation"),
                 wire_label(false, a.stage, a.mb));
        break;
      case Kind::kSendGrad:
        ctx.send(pp_peers[static_cast<size_t>(a.peer)], take(grad_out, key, "gradient"),
                 wire_label(true, a.stage, a.mb));
        break;
      case Kind::kRecvAct: {
        const std::string l = wire_label(false, a.stage - 1, a.mb);
        act_in[key] = ctx.recv(pp_peers[static_cast<size_t>(a.peer)], part.boundary_shape(rows), part.compute_dtype(),
                               l, l);
        break;
      }
      case Kind::kRecvGrad: {
        const std::string l = wire_label(true, a.stage + 1, a.mb);
        grad_in[key] = ctx.recv(pp_peers[static_cast<size_t>(a.peer)], part.boundary_shape(rows),
                                part.compute_dtype(), l, l);
        break;
      }
    }
  }
  StepOutput out;
  for (auto& [s, p] : parts) {
    p->finish_step();
    if (p->stage().has_head) {
      out.has_loss = true;
      out.loss = p->step_loss();
      out.microbatch_losses = p->microbatch_losses();
    }
  }
  return out;
}

}  // namespace titanlab::pp
