// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <vector>

#include "titanlab/checkpoint/checkpoint.h"
#include "titanlab/cli/job_config.h"
#include "titanlab/contextparallel/contextparallel.h"
#include "titanlab/dataloader/dataloader.h"
#include "titanlab/dtensor/dtensor.h"
#include "titanlab/model/model.h"
#include "titanlab/ndtensor/float8.h"
#include "titanlab/ndtensor/ops.h"
#include "titanlab/parallelize/model_part.h"
#include "titanlab/parallelize/parallelize.h"
#include "titanlab/perfmodel/perfmodel.h"
#include "titanlab/pipeline/pipeline.h"
#include "titanlab/simruntime/runtime.h"
#include "titanlab/train/trainer.h"

namespace titanlab {
namespace {

namespace fs = std::filesystem;
using namespace std::chrono_literals;

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects failures; the first few are reported.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (failures_ <= 3) first_ += (first_.empty() ? "" : "; ") + what;
  }
  Outcome outcome(const std::string& summary) const {
    if (failures_ == 0) return {true, summary};
    return {false, std::to_string(failures_) + " failure(s): " + first_};
  }

 private:
  int failures_ = 0;
  std::string first_;
};

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = nd(gen);
  return t;
}

// Small integers: every sum and product below is exact in F64.
Tensor integer_tensor(const Shape& shape, std::mt19937_64& gen) {
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = static_cast<double>(static_cast<int64_t>(gen() % 9) - 4);
  return t;
}

double rel_diff(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

// max |a - b| / max |b|
double scaled_diff(const Tensor& a, const Tensor& b) {
  double scale = 0.0;
  for (double v : b.data()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / std::max(scale, 1e-300);
}

class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(fs::temp_directory_path() / ("titanlab_accept_" + std::to_string(::getpid()) + "_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// ---- 1: loss convergence -------------------------------------------------------------

std::vector<std::string> tiny_job(int64_t world, int64_t dp) {
  return {"--job.world_size=" + std::to_string(world),
          "--model.dim=64",
          "--model.n_layers=2",
          "--model.n_heads=2",
          "--model.vocab_size=256",
          "--model.seq_len=128",
          "--training.steps=20",
          "--training.seed=7",
          "--training.local_batch=" + std::to_string(8 / dp)};
}

std::vector<std::string> operator+(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct GridConfig {
  std::string name;
  std::vector<std::string> overrides;
};

// The 4D grid; every entry is plain config overrides.
std::vector<GridConfig> grid() {
  return {
      {"FSDP4", tiny_job(4, 4)},
      {"HSDP2x2", tiny_job(4, 4) + std::vector<std::string>{"--parallelism.data_parallel_replicate_degree=2"}},
      {"FSDP2xTP2", tiny_job(4, 2) + std::vector<std::string>{"--parallelism.tensor_parallel_degree=2"}},
      {"FSDP2xTP2+LP", tiny_job(4, 2) + std::vector<std::string>{"--parallelism.tensor_parallel_degree=2",
                                                                 "--parallelism.enable_loss_parallel=true"}},
      {"PP2(1f1b,m4)xFSDP2",
       tiny_job(4, 2) + std::vector<std::string>{"--parallelism.pipeline_parallel_degree=2",
                                                 "--parallelism.pipeline_parallel_schedule=1f1b",
                                                 "--parallelism.pipeline_parallel_microbatches=4"}},
      {"FSDP2xCP2", tiny_job(4, 2) + std::vector<std::string>{"--parallelism.context_parallel_degree=2"}},
      {"dp2xtp2xpp2xcp2",
       tiny_job(16, 2) + std::vector<std::string>{"--parallelism.data_parallel_shard_degree=2",
                                                  "--parallelism.tensor_parallel_degree=2",
                                                  "--parallelism.pipeline_parallel_degree=2",
                                                  "--parallelism.context_parallel_degree=2",
                                                  "--parallelism.pipeline_parallel_schedule=interleaved_1f1b",
                                                  "--parallelism.pipeline_parallel_microbatches=4"}},
  };
}

Outcome loss_convergence() {
  Check c;
  double worst = 0.0;
  std::map<int64_t, std::vector<double>> oracle;  // by global batch
  for (const auto& g : grid()) {
    const train::TrainConfig cfg = cli::to_train_config(cli::parse_config("", g.overrides));
    auto& want = oracle[cfg.global_batch()];
    if (want.empty()) want = train::train_oracle(cfg).losses;
    const auto got = train::train(cfg).losses;
    c.expect(got.size() == 20 && want.size() == 20, g.name + ": expected 20 steps");
    for (size_t i = 0; i < std::min(got.size(), want.size()); ++i) {
      const double e = rel_diff(got[i], want[i]);
      worst = std::max(worst, e);
      c.expect(e <= 1e-9, g.name + " step " + std::to_string(i + 1) + " rel err " + sci(e));
    }
  }
  return c.outcome(std::to_string(grid().size()) + " configs x 20 steps, max rel err " + sci(worst) +
                   " (tol 1e-9)");
}

// ---- 2: schedules --------------------------------------------------------------------

using Kind = pp::ScheduleAction::Kind;

pp::PipelineConfig sched_cfg(pp::ScheduleKind kind, int64_t S, int64_t m, int64_t V) {
  pp::PipelineConfig c;
  c.degree = S;
  c.schedule = kind;
  c.microbatches = m;
  for (int64_t i = 1; i < S * V; ++i) c.split_points.push_back("layers." + std::to_string(i));
  return c;
}

// Single-action mutations that change what the schedule means: deleting any
// action, swapping receives on one channel, moving a receive after its
// consumer or a send before its producer, reordering dependent computes.
std::vector<pp::PipelineSchedule> mutants(const pp::PipelineSchedule& s, std::mt19937_64& gen, int n) {
  std::vector<std::tuple<size_t, size_t, size_t>> swaps;
  for (size_t r = 0; r < s.ranks.size(); ++r) {
    const auto& l = s.ranks[r];
    for (size_t i = 0; i < l.size(); ++i) {
      for (size_t j = i + 1; j < l.size(); ++j) {
        const auto &a = l[i], &b = l[j];
        const bool same = a.stage == b.stage && a.mb == b.mb;
        const bool recv_a = a.kind == Kind::kRecvAct || a.kind == Kind::kRecvGrad;
        const bool recv_b = b.kind == Kind::kRecvAct || b.kind == Kind::kRecvGrad;
        const bool send_b = b.kind == Kind::kSendAct || b.kind == Kind::kSendGrad;
        if (recv_a && recv_b && a.peer == b.peer) swaps.emplace_back(r, i, j);
        if (j == i + 1 && recv_a && b.is_compute() && same) swaps.emplace_back(r, i, j);
        if (j == i + 1 && a.is_compute() && send_b && same) swaps.emplace_back(r, i, j);
        if (a.is_compute() && b.is_compute() && same) swaps.emplace_back(r, i, j);
        if (a.kind == Kind::kForward && b.kind == Kind::kForward && a.mb == b.mb && b.stage == a.stage + 1) {
          swaps.emplace_back(r, i, j);
        }
      }
    }
  }
  std::vector<pp::PipelineSchedule> out;
  for (int k = 0; k < n; ++k) {
    pp::PipelineSchedule m = s;
    if (k % 2 == 0 || swaps.empty()) {
      size_t r = gen() % m.ranks.size();
      while (m.ranks[r].empty()) r = (r + 1) % m.ranks.size();
      m.ranks[r].erase(m.ranks[r].begin() + static_cast<std::ptrdiff_t>(gen() % m.ranks[r].size()));
    } else {
      auto [r, i, j] = swaps[gen() % swaps.size()];
      std::swap(m.ranks[r][i], m.ranks[r][j]);
    }
    out.push_back(std::move(m));
  }
  return out;
}

Outcome schedules() {
  Check c;
  model::ModelConfig mc;
  mc.dim = 16;
  mc.n_heads = 2;
  mc.n_layers = 8;
  mc.vocab_size = 32;
  mc.seq_len = 8;
  const model::MetaModel meta = model::build_meta_model(mc);
  const uint64_t seed = 13;
  const double lr = 0.5;
  const data::TokenSource source{data::TaskKind::kBigram, mc.vocab_size, 4, {}};
  // dense reference gradient of the first step
  const model::ParamMap init = model::init_dense(meta, seed);
  const model::Batch batch = data::global_batch(source, seed, 0, 8, mc.seq_len);
  const model::ParamMap want = model::forward_backward_step(meta, init, batch).grads;

  int runs = 0;
  double worst = 0.0;
  for (auto kind : {pp::ScheduleKind::kGPipe, pp::ScheduleKind::k1F1B, pp::ScheduleKind::kInterleaved1F1B,
                    pp::ScheduleKind::kZeroBubble}) {
    for (int64_t S : {2, 4}) {
      for (int64_t m : {1, 2, 8}) {
        for (int64_t V : {1, 2}) {
          if (V == 2 && kind != pp::ScheduleKind::kInterleaved1F1B) continue;  // one stage per rank
          const std::string name = std::string(pp::schedule_name(kind)) + " S=" + std::to_string(S) +
                                   " m=" + std::to_string(m) + " V=" + std::to_string(V);
          const pp::PipelineConfig pc = sched_cfg(kind, S, m, V);
          const auto issue = pp::validate_schedule(pp::build_schedule(pc));
          c.expect(!issue, name + " invalid: " + (issue ? issue->what : ""));
          train::TrainConfig t;
          t.model = mc;
          t.part.dims = {S, 1, 1, 1, 1};
          t.pipeline = pc;
          t.source = source;
          t.local_batch = 8;
          t.steps = 1;
          t.seed = seed;
          t.sgd = {lr, 0.0};
          const auto res = train::train(t);
          ++runs;
          // one plain SGD step: grad = (p0 - p1) / lr
          for (const auto& [f, g] : want) {
            Tensor got = ops::scale(ops::sub(init.at(f), res.params.at(f)), 1.0 / lr);
            const double e = scaled_diff(got, g);
            worst = std::max(worst, e);
            c.expect(e <= 1e-9, name + " grad " + f + " rel err " + sci(e));
          }
        }
      }
    }
  }
  std::mt19937_64 gen(2026);
  int rejected = 0, total = 0;
  for (auto pc : {sched_cfg(pp::ScheduleKind::kGPipe, 4, 8, 1), sched_cfg(pp::ScheduleKind::k1F1B, 4, 8, 1),
                  sched_cfg(pp::ScheduleKind::kInterleaved1F1B, 4, 8, 2),
                  sched_cfg(pp::ScheduleKind::kZeroBubble, 4, 8, 1)}) {
    for (const auto& m : mutants(pp::build_schedule(pc), gen, 100)) {
      ++total;
      if (pp::validate_schedule(m)) ++rejected;
    }
  }
  c.expect(rejected == total, "validator accepted " + std::to_string(total - rejected) + " mutants");
  return c.outcome(std::to_string(runs) + " schedule configs valid, grad max rel err " + sci(worst) +
                   " (tol 1e-9); " + std::to_string(rejected) + "/" + std::to_string(total) + " mutants rejected");
}

// ---- 3: bubble -----------------------------------------------------------------------

std::string frac(const pp::Rational& r) { return std::to_string(r.num) + "/" + std::to_string(r.den); }

Outcome bubbles() {
  Check c;
  int exact = 0;
  std::string example;
  for (int64_t S : {2, 4, 8}) {
    for (int64_t m : {1, 2, 4, 8, 16}) {
      const pp::Rational want = pp::make_rational(S - 1, m + S - 1);
      for (auto kind : {pp::ScheduleKind::kGPipe, pp::ScheduleKind::k1F1B}) {
        const auto got = pp::bubble_analysis(pp::build_schedule(sched_cfg(kind, S, m, 1))).bubble_fraction;
        c.expect(got.num == want.num && got.den == want.den,
                 std::string(pp::schedule_name(kind)) + " S=" + std::to_string(S) + " m=" + std::to_string(m) +
                     " gave " + frac(got) + ", want " + frac(want));
        ++exact;
        if (S == 4 && m == 8 && kind == pp::ScheduleKind::k1F1B) example = frac(got);
      }
      if (m < 2) continue;
      const auto one = pp::bubble_analysis(pp::build_schedule(sched_cfg(pp::ScheduleKind::k1F1B, S, m, 1)));
      const auto inter =
          pp::bubble_analysis(pp::build_schedule(sched_cfg(pp::ScheduleKind::kInterleaved1F1B, S, m, 2)));
      const auto zb = pp::bubble_analysis(pp::build_schedule(sched_cfg(pp::ScheduleKind::kZeroBubble, S, m, 1)));
      const std::string at = " at S=" + std::to_string(S) + " m=" + std::to_string(m);
      c.expect(inter.bubble_fraction < one.bubble_fraction,
               "interleaved " + frac(inter.bubble_fraction) + " not below 1f1b " + frac(one.bubble_fraction) + at);
      c.expect(zb.bubble_fraction <= one.bubble_fraction,
               "zero_bubble " + frac(zb.bubble_fraction) + " above 1f1b " + frac(one.bubble_fraction) + at);
    }
  }
  return c.outcome(std::to_string(exact) + " exact (S-1)/(m+S-1) checks (S=4,m=8: " + example +
                   "); interleaved < 1f1b and zero_bubble <= 1f1b for m >= 2");
}

// ---- 4: ring attention ---------------------------------------------------------------

Outcome ring_attention() {
  Check c;
  std::mt19937_64 gen(11);
  const int64_t seq = 64;
  const Tensor q = random_tensor({2, seq, 8}, gen), k = random_tensor({2, seq, 8}, gen);
  const Tensor v = random_tensor({2, seq, 8}, gen), dout = random_tensor({2, seq, 8}, gen);
  double worst = 0.0;
  int cases = 0;
  for (int w : {2, 4}) {
    for (auto method : {cp::RotateMethod::kAllGather, cp::RotateMethod::kAllToAll}) {
      for (bool causal : {true, false}) {
        const auto ref = ops::sdpa(q, k, v, causal);
        const auto ref_g = ops::sdpa_backward(q, k, v, causal, ref, dout);
        struct Out {
          Tensor out, dq, dk, dv;
        };
        auto res = sim::spawn_world<Out>(w, [&](sim::RankContext& ctx) {
          const auto g = ctx.world_group();
          const int r = ctx.rank();
          Tensor lq = cp::shard_buffer(q, 1, w, r), lk = cp::shard_buffer(k, 1, w, r);
          Tensor lv = cp::shard_buffer(v, 1, w, r), ld = cp::shard_buffer(dout, 1, w, r);
          auto st = cp::ring_attention(ctx, g, lq, lk, lv, method, causal);
          auto gr = cp::ring_attention_backward(ctx, g, lq, st, ld, method, causal);
          return Out{st.result.out, gr.d_q, gr.d_k, gr.d_v};
        });
        auto gather = [&](Tensor Out::*field) {
          std::vector<Tensor> parts;
          for (const auto& r : res) parts.push_back(r.*field);
          return cp::unshard_gathered(ops::cat(parts, 1), 1, w);
        };
        const double e = std::max({max_abs_diff(gather(&Out::out), ref.out), max_abs_diff(gather(&Out::dq), ref_g.d_q),
                                   max_abs_diff(gather(&Out::dk), ref_g.d_k), max_abs_diff(gather(&Out::dv), ref_g.d_v)});
        worst = std::max(worst, e);
        ++cases;
        c.expect(e <= 1e-12, "cp=" + std::to_string(w) + " " + cp::rotate_method_name(method) +
                                 (causal ? " causal" : " full") + " max abs err " + sci(e));
      }
    }
  }
  // per-rank unmasked causal scores, counted position by position
  for (int64_t s : {64, 128}) {
    for (int64_t w : {2, 4}) {
      std::set<int64_t> counts;
      for (int64_t r = 0; r < w; ++r) {
        int64_t n = 0;
        for (int64_t p : cp::shard_positions(s, w, r)) n += p + 1;
        counts.insert(n);
        c.expect(cp::causal_score_count(s, w, r) == n, "causal_score_count disagrees with brute force");
      }
      c.expect(counts.size() == 1, "unbalanced causal work at seq " + std::to_string(s) + " cp " + std::to_string(w));
    }
  }
  return c.outcome(std::to_string(cases) + " cases, max abs err " + sci(worst) +
                   " (tol 1e-12); causal scores equal across ranks");
}

// ---- 5: loss parallel ----------------------------------------------------------------

Outcome loss_parallel() {
  Check c;
  std::mt19937_64 gen(5);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int tp = trial % 2 == 0 ? 2 : 4;
    const int64_t rows = 1 + static_cast<int64_t>(gen() % 8);
    const int64_t vocab = tp * (2 + static_cast<int64_t>(gen() % 7));
    const Tensor logits = random_tensor({rows, vocab}, gen, 3.0);
    std::vector<int64_t> t(static_cast<size_t>(rows));
    for (auto& x : t) x = static_cast<int64_t>(gen() % static_cast<uint64_t>(vocab));
    // naive cross-entropy on the gathered logits
    double loss = 0.0;
    Tensor grad({rows, vocab});
    for (int64_t i = 0; i < rows; ++i) {
      double mx = -INFINITY;
      for (int64_t j = 0; j < vocab; ++j) mx = std::max(mx, logits[i * vocab + j]);
      double sum = 0.0;
      for (int64_t j = 0; j < vocab; ++j) sum += std::exp(logits[i * vocab + j] - mx);
      loss += mx + std::log(sum) - logits[i * vocab + t[static_cast<size_t>(i)]];
      for (int64_t j = 0; j < vocab; ++j) {
        const double p = std::exp(logits[i * vocab + j] - mx) / sum;
        grad[i * vocab + j] = (p - (j == t[static_cast<size_t>(i)] ? 1.0 : 0.0)) / static_cast<double>(rows);
      }
    }
    loss /= static_cast<double>(rows);
    auto res = sim::run_world<par::LossParallelOut>(tp, [&](sim::RankContext& ctx) {
      const int64_t w = vocab / tp;
      return par::loss_parallel_ce(ctx, ctx.world_group(), ops::narrow(logits, 1, ctx.rank() * w, w), t,
                                   ctx.rank() * w, vocab);
    });
    std::vector<Tensor> parts;
    for (const auto& r : res.results) {
      worst = std::max(worst, std::abs(r.loss - loss));
      c.expect(std::abs(r.loss - loss) <= 1e-12, "trial " + std::to_string(trial) + " loss err " + sci(std::abs(r.loss - loss)));
      parts.push_back(r.d_logits);
    }
    const double ge = max_abs_diff(ops::cat(parts, 1), grad);
    worst = std::max(worst, ge);
    c.expect(ge <= 1e-12, "trial " + std::to_string(trial) + " grad err " + sci(ge));
    for (const auto& l : res.trace.ledgers) {
      c.expect(l.bytes_by_kind.count(sim::CollectiveKind::kAllGather) == 0, "logits were all-gathered");
      c.expect(l.max_logit_bytes == rows * (vocab / tp) * 8, "a rank held more than its vocab shard");
    }
  }
  return c.outcome("200 instances, max abs err " + sci(worst) + " (tol 1e-12); no all_gather, logits stay vocab-sharded");
}

// ---- 6: checkpoint resharding --------------------------------------------------------

train::TrainConfig ckpt_job(const par::ParallelDims& dims) {
  train::TrainConfig t;
  t.model.dim = 32;
  t.model.n_layers = 2;
  t.model.n_heads = 2;
  t.model.vocab_size = 64;
  t.model.seq_len = 16;
  t.part.dims = dims;
  t.part.dp.shard_degree = dims.dp_shard;
  t.part.dp.replicate_degree = dims.dp_replicate;
  t.source = {data::TaskKind::kBigram, 64, 4, {}};
  t.local_batch = 8 / dims.dp();
  t.steps = 20;
  t.seed = 21;
  t.sgd = {0.05, 0.9};
  return t;
}

Outcome checkpoint_resharding() {
  Check c;
  TempDir dir("ckpt");
  const std::vector<std::pair<std::string, par::ParallelDims>> layouts = {
      {"Replicate", {1, 2, 1, 1, 1}}, {"FSDP2", {1, 1, 2, 1, 1}}, {"FSDP4", {1, 1, 4, 1, 1}},
      {"TP2xFSDP2", {1, 1, 2, 1, 2}}};
  int pairs = 0;
  for (const auto& [src_name, src_dims] : layouts) {
    train::TrainConfig src = ckpt_job(src_dims);
    src.steps = 2;
    src.checkpoint.interval = 2;
    src.checkpoint.dir = dir.path() / src_name;
    const train::TrainResult saved = train::train(src);
    const fs::path step = src.checkpoint.dir / "step_2";
    const auto md = ckpt::read_metadata(step);
    for (const auto& [dst_name, dst_dims] : layouts) {
      train::TrainConfig dst = ckpt_job(dst_dims);
      const model::MetaModel meta = model::build_meta_model(dst.model);
      struct Loaded {
        std::map<std::string, Tensor> full;
        int64_t cursor = 0;
      };
      auto loaded = sim::spawn_world<Loaded>(static_cast<int>(dst_dims.world()), [&](sim::RankContext& ctx) {
        train::RankTrainer trainer(ctx, dst, meta);
        trainer.load_checkpoint(step);
        Loaded out;
        for (const auto& [f, d] : trainer.state()) out.full[f] = dt::full_tensor(ctx, d);
        out.cursor = trainer.steps_done();
        return out;
      });
      ++pairs;
      const std::string pair = src_name + "->" + dst_name;
      for (const auto& l : loaded) {
        c.expect(l.cursor == 2, pair + ": loader cursor " + std::to_string(l.cursor));
        for (const auto& f : md.fqns()) {
          auto it = l.full.find(f);
          if (it == l.full.end()) {
            c.expect(false, pair + ": " + f + " not loaded");
            continue;
          }
          // parameters against the saving job's gathered tensors, optimizer state against the file
          auto p = saved.params.find(f);
          const Tensor want = p != saved.params.end() ? p->second : ckpt::read_full_tensor(step, md, f);
          c.expect(it->second.bit_equal(want), pair + ": " + f + " differs");
        }
      }
    }
  }
  // 10 + 10 against 20 uninterrupted steps, with momentum
  const train::TrainResult straight = train::train(ckpt_job({1, 1, 4, 1, 1}));
  train::TrainConfig first = ckpt_job({1, 1, 4, 1, 1});
  first.steps = 10;
  first.checkpoint.interval = 10;
  first.checkpoint.dir = dir.path() / "resume";
  const train::TrainResult a = train::train(first);
  train::TrainConfig second = ckpt_job({1, 1, 4, 1, 1});
  second.checkpoint.resume_from = first.checkpoint.dir / "step_10";
  const train::TrainResult b = train::train(second);
  std::vector<double> joined = a.losses;
  joined.insert(joined.end(), b.losses.begin(), b.losses.end());
  c.expect(joined == straight.losses, "resumed losses differ from the uninterrupted run");
  for (const auto& [f, t] : straight.params) c.expect(b.params.at(f).bit_equal(t), "resumed " + f + " differs");
  return c.outcome(std::to_string(pairs) + " layout pairs bit-exact; 10+10 resume bit-identical to 20 steps");
}

// ---- 7: redistribute and sharded-op algebra ------------------------------------------

// The region a rank holds, by ceiling-division chunking, computed here from scratch.
Tensor expected_local(const Tensor& full, const std::vector<int64_t>& mesh_shape, const std::vector<int64_t>& coord,
                      const dt::Placements& pl) {
  Tensor out = full;
  for (size_t md = 0; md < pl.size(); ++md) {
    if (!pl[md].is_shard()) continue;
    const int64_t d = pl[md].dim;
    const int64_t n = out.shape()[static_cast<size_t>(d)];
    const int64_t per = (n + mesh_shape[md] - 1) / mesh_shape[md];
    const int64_t off = std::min(n, coord[md] * per);
    const int64_t len = std::min(per, n - off);
    out = ops::narrow(out, d, off, len);
  }
  bool zero = false;
  for (size_t md = 0; md < pl.size(); ++md) zero |= pl[md].is_partial() && coord[md] != 0;
  return zero ? Tensor(out.shape()) : out;
}

dt::Placement random_placement(std::mt19937_64& gen, int64_t ndim, bool allow_partial) {
  const uint64_t k = gen() % (allow_partial ? 4 : 3);
  if (k == 0) return dt::Placement::replicate();
  if (k == 3) return dt::Placement::partial();
  return dt::Placement::shard(static_cast<int64_t>(gen() % static_cast<uint64_t>(ndim)));
}

Outcome dtensor_algebra() {
  Check c;
  std::mt19937_64 gen(77);
  int cases = 0;
  // round trips through redistribute
  for (int trial = 0; trial < 700; ++trial) {
    const bool two_d = trial % 2 == 1;
    const std::vector<int64_t> mesh_shape = two_d ? std::vector<int64_t>{2, 1 + static_cast<int64_t>(gen() % 3)}
                                                  : std::vector<int64_t>{1 + static_cast<int64_t>(gen() % 4)};
    const sim::DeviceMesh mesh = two_d ? sim::device_mesh(mesh_shape, {"a", "b"}) : sim::device_mesh(mesh_shape, {"a"});
    const int64_t ndim = 1 + static_cast<int64_t>(gen() % 3);
    Shape shape;
    for (int64_t d = 0; d < ndim; ++d) shape.push_back(1 + static_cast<int64_t>(gen() % 7));
    const Tensor full = random_tensor(shape, gen);
    dt::Placements src, dst;
    // a tensor dim is sharded by at most one mesh dim
    auto pick = [&](bool partial) {
      dt::Placements pl;
      while (pl.size() < mesh_shape.size()) {
        const dt::Placement p = random_placement(gen, ndim, partial);
        if (std::none_of(pl.begin(), pl.end(), [&](const dt::Placement& q) { return p.is_shard() && q == p; })) {
          pl.push_back(p);
        }
      }
      return pl;
    };
    src = pick(true);
    dst = pick(false);
    const int world = static_cast<int>(mesh.size());
    // every rank runs every collective; failures are collected, not returned early
    auto ok = sim::spawn_world<std::string>(world, [&](sim::RankContext& ctx) {
      std::string bad;
      const auto coord = mesh.coordinate(ctx.rank());
      const dt::DTensor a = dt::distribute(ctx, full, mesh, src);
      if (!a.local().bit_equal(expected_local(full, mesh_shape, coord, src))) bad += "distribute region ";
      const dt::DTensor b = dt::redistribute(ctx, a, dst);
      if (!b.local().bit_equal(expected_local(full, mesh_shape, coord, dst))) bad += "redistribute region ";
      const dt::DTensor back = dt::redistribute(ctx, b, src[0].is_partial() ? dst : src);
      if (!dt::full_tensor(ctx, back).bit_equal(full)) bad += "round trip ";
      if (!dt::full_tensor(ctx, b).bit_equal(full)) bad += "full_tensor ";
      return bad;
    });
    ++cases;
    for (const auto& s : ok) {
      c.expect(s.empty(), s + " failed for " + dt::placements_str(src) + " -> " + dt::placements_str(dst) + " shape " +
                              shape_str(shape));
    }
  }
  // Partial: per-rank addends reduce to their rank-order sum
  for (int trial = 0; trial < 150; ++trial) {
    const int w = 2 + static_cast<int>(gen() % 3);
    const sim::DeviceMesh mesh = sim::device_mesh({w}, {"a"});
    const Shape shape = {1 + static_cast<int64_t>(gen() % 6), 1 + static_cast<int64_t>(gen() % 4)};
    std::vector<Tensor> addends;
    for (int r = 0; r < w; ++r) addends.push_back(random_tensor(shape, gen));
    Tensor sum = addends[0];
    for (int r = 1; r < w; ++r) {
      for (int64_t i = 0; i < sum.numel(); ++i) sum[i] = sum[i] + addends[static_cast<size_t>(r)][i];
    }
    const dt::Placement target = trial % 2 == 0 ? dt::Placement::replicate() : dt::Placement::shard(gen() % 2);
    auto ok = sim::spawn_world<bool>(w, [&](sim::RankContext& ctx) {
      const dt::DTensor p(addends[static_cast<size_t>(ctx.rank())], mesh, {dt::Placement::partial()}, shape);
      const dt::DTensor r = dt::redistribute(ctx, p, {target});
      return r.local().bit_equal(expected_local(sum, {w}, {ctx.rank()}, {target})) &&
             dt::full_tensor(ctx, p).bit_equal(sum);
    });
    ++cases;
    for (bool b : ok) c.expect(b, "Partial -> " + target.str() + " is not the rank-order sum");
  }
  // sharded ops against the dense kernels
  for (int trial = 0; trial < 200; ++trial) {
    const int w = 1 + static_cast<int>(gen() % 4);
    const sim::DeviceMesh mesh = sim::device_mesh({w}, {"a"});
    const int64_t rows = 1 + static_cast<int64_t>(gen() % 5), in = w * (1 + static_cast<int64_t>(gen() % 3));
    const int64_t out = w * (1 + static_cast<int64_t>(gen() % 3));
    const Tensor x = random_tensor({rows, in}, gen), wt = random_tensor({in, out}, gen);
    // rowwise contraction reorders the sum; integer operands make it exact
    const Tensor xi = integer_tensor({rows, in}, gen), wi = integer_tensor({in, out}, gen);
    const Tensor seqx = random_tensor({2, 1 + static_cast<int64_t>(gen() % 7), in}, gen);
    const Tensor nw = random_tensor({in}, gen);
    const int64_t vocab = 1 + static_cast<int64_t>(gen() % 9);
    const Tensor table = random_tensor({vocab, in}, gen);
    std::vector<int64_t> ids(6);
    for (auto& id : ids) id = static_cast<int64_t>(gen() % static_cast<uint64_t>(vocab));
    const Tensor col_dense = ops::matmul(x, wt), row_dense = ops::matmul(xi, wi);
    const Tensor norm_dense = ops::rms_norm(seqx, nw, 1e-6).out;
    const Tensor emb_dense = ops::embedding(table, ids, {2, 3});
    auto ok = sim::spawn_world<std::string>(w, [&](sim::RankContext& ctx) {
      using P = dt::Placement;
      std::string bad;
      const auto col = dt::sharded_matmul(ctx, dt::distribute(ctx, x, mesh, {P::replicate()}),
                                          dt::distribute(ctx, wt, mesh, {P::shard(1)}), dt::MatmulStyle::kColwise);
      if (!dt::full_tensor(ctx, col).bit_equal(col_dense)) bad += "colwise matmul ";
      const auto row = dt::sharded_matmul(ctx, dt::distribute(ctx, xi, mesh, {P::shard(1)}),
                                          dt::distribute(ctx, wi, mesh, {P::shard(0)}), dt::MatmulStyle::kRowwise);
      if (!dt::full_tensor(ctx, row).bit_equal(row_dense) || !row.placements()[0].is_partial()) bad += "rowwise matmul ";
      const auto norm = dt::sharded_rms_norm(dt::distribute(ctx, seqx, mesh, {P::shard(1)}),
                                             dt::distribute(ctx, nw, mesh, {P::replicate()}), 1e-6);
      if (!dt::full_tensor(ctx, norm).bit_equal(norm_dense)) bad += "rms_norm ";
      for (auto p : {P::shard(0), P::shard(1), P::replicate()}) {
        const auto e = dt::sharded_embedding(dt::distribute(ctx, table, mesh, {p}), ids, {2, 3}, ctx.rank());
        if (!dt::full_tensor(ctx, e).bit_equal(emb_dense)) bad += "embedding " + p.str() + " ";
      }
      return bad;
    });
    cases += 6;
    for (const auto& s : ok) c.expect(s.empty(), s + " differs from the dense kernel at world " + std::to_string(w));
  }
  return c.outcome(std::to_string(cases) + " random cases (round trips, Partial sums, matmul/norm/embedding), all bit-exact");
}

// ---- 8: gradients --------------------------------------------------------------------

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

// Central differences of f along every element of x.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-6) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

Outcome gradients() {
  Check c;
  std::mt19937_64 gen(8);
  double worst = 0.0;
  int checked = 0;
  auto check = [&](const std::string& name, const Tensor& analytic, const std::function<double(const Tensor&)>& f,
                   const Tensor& at) {
    const double e = scaled_diff(analytic, numeric_grad(f, at));
    worst = std::max(worst, e);
    ++checked;
    c.expect(e <= 1e-6, name + " rel err " + sci(e));
  };
  {
    const Tensor a = random_tensor({3, 4}, gen), b = random_tensor({4, 5}, gen), r = random_tensor({3, 5}, gen);
    const auto g = ops::matmul_backward(a, b, r);
    check("matmul d_a", g.d_a, [&](const Tensor& t) { return dot(ops::matmul(t, b), r); }, a);
    check("matmul d_b", g.d_b, [&](const Tensor& t) { return dot(ops::matmul(a, t), r); }, b);
  }
  {
    const Tensor x = random_tensor({2, 3, 4}, gen), w = random_tensor({4, 5}, gen), r = random_tensor({2, 3, 5}, gen);
    check("linear input", ops::linear_backward_input(w, r), [&](const Tensor& t) { return dot(ops::linear(t, w), r); }, x);
    check("linear weight", ops::linear_backward_weight(x, r), [&](const Tensor& t) { return dot(ops::linear(x, t), r); }, w);
  }
  for (bool causal : {true, false}) {
    const Tensor q = random_tensor({2, 5, 3}, gen), k = random_tensor({2, 5, 3}, gen);
    const Tensor v = random_tensor({2, 5, 3}, gen), r = random_tensor({2, 5, 3}, gen);
    const auto fwd = ops::sdpa(q, k, v, causal);
    const auto g = ops::sdpa_backward(q, k, v, causal, fwd, r);
    const std::string tag = causal ? " causal" : "";
    check("sdpa d_q" + tag, g.d_q, [&](const Tensor& t) { return dot(ops::sdpa(t, k, v, causal).out, r); }, q);
    check("sdpa d_k" + tag, g.d_k, [&](const Tensor& t) { return dot(ops::sdpa(q, t, v, causal).out, r); }, k);
    check("sdpa d_v" + tag, g.d_v, [&](const Tensor& t) { return dot(ops::sdpa(q, k, t, causal).out, r); }, v);
    // one key block at shifted positions
    const std::vector<int64_t> qp = {4, 5, 6, 7, 8}, kp = {0, 2, 4, 6, 8};
    const auto blk = ops::attention_block(q, k, v, qp, kp, causal);
    const auto bg = ops::attention_block_backward(q, k, v, qp, kp, causal, blk.out, blk.lse, r);
    auto f = [&](const Tensor& tq, const Tensor& tk, const Tensor& tv) {
      return dot(ops::attention_block(tq, tk, tv, qp, kp, causal).out, r);
    };
    check("attention_block d_q" + tag, bg.d_q, [&](const Tensor& t) { return f(t, k, v); }, q);
    check("attention_block d_k" + tag, bg.d_k, [&](const Tensor& t) { return f(q, t, v); }, k);
    check("attention_block d_v" + tag, bg.d_v, [&](const Tensor& t) { return f(q, k, t); }, v);
  }
  {
    const Tensor x = random_tensor({2, 3, 6}, gen), w = random_tensor({6}, gen), r = random_tensor({2, 3, 6}, gen);
    const auto fwd = ops::rms_norm(x, w, 1e-5);
    const auto g = ops::rms_norm_backward(x, w, fwd.rstd, r);
    check("rms_norm d_x", g.d_x, [&](const Tensor& t) { return dot(ops::rms_norm(t, w, 1e-5).out, r); }, x);
    check("rms_norm d_w", g.d_w, [&](const Tensor& t) { return dot(ops::rms_norm(x, t, 1e-5).out, r); }, w);
  }
  {
    const Tensor logits = random_tensor({4, 7}, gen, 2.0);
    const std::vector<int64_t> t = {0, 6, 3, 3};
    const auto fwd = ops::softmax_cross_entropy(logits, t);
    check("cross_entropy", ops::softmax_cross_entropy_backward(fwd.probs, t),
          [&](const Tensor& l) { return ops::softmax_cross_entropy(l, t).loss; }, logits);
  }
  {
    const Tensor x = random_tensor({3, 5}, gen), r = random_tensor({3, 5}, gen);
    check("silu", ops::silu_backward(x, r), [&](const Tensor& t) { return dot(ops::silu(t), r); }, x);
  }
  {
    const Tensor table = random_tensor({6, 3}, gen), r = random_tensor({2, 2, 3}, gen);
    const std::vector<int64_t> ids = {1, 5, 1, 0};
    check("embedding", ops::embedding_backward(table.shape(), DType::kF64, ids, r),
          [&](const Tensor& t) { return dot(ops::embedding(t, ids, {2, 2}), r); }, table);
  }
  {
    const Tensor x = random_tensor({2, 4, 6}, gen), r = random_tensor({2, 4, 6}, gen);
    const Tensor freqs = ops::rotary_freqs(4, 6);
    check("rotary", ops::rotary_apply(r, freqs, true), [&](const Tensor& t) { return dot(ops::rotary_apply(t, freqs), r); },
          x);
  }
  {
    const Tensor x = random_tensor({2, 3, 4}, gen), r = random_tensor({4, 3, 2}, gen);
    check("transpose", ops::transpose(r, 0, 2), [&](const Tensor& t) { return dot(ops::transpose(t, 0, 2), r); }, x);
  }
  return c.outcome(std::to_string(checked) + " backward checks, max rel err " + sci(worst) + " (tol 1e-6)");
}

// ---- 9: activation checkpointing -----------------------------------------------------

struct AcRun {
  std::map<std::string, Tensor> grads;
  int64_t peak = 0;
};

AcRun run_ac(par::ACConfig ac) {
  model::ModelConfig mc;
  mc.dim = 16;
  mc.n_heads = 2;
  mc.n_layers = 4;
  mc.vocab_size = 32;
  mc.seq_len = 8;
  const model::MetaModel meta = model::build_meta_model(mc);
  par::PartConfig pc;
  pc.ac = ac;
  pc.seed = 3;
  auto res = sim::run_world<AcRun>(1, [&](sim::RankContext& ctx) {
    const sim::DeviceMesh mesh = par::build_world_mesh(pc.dims);
    par::ModelPart part(ctx, meta, mesh, pc, {0, mc.n_layers, true, true});
    part.begin_step(data::global_batch({data::TaskKind::kBigram, 32, 4, {}}, 3, 0, 4, mc.seq_len), 1);
    part.forward(0);
    part.backward(0);
    part.finish_step();
    AcRun out;
    for (const auto& [f, g] : part.grads()) out.grads[f] = dt::full_tensor(ctx, g);
    return out;
  });
  res.results[0].peak = res.trace.ledgers[0].activation_bytes_peak;
  return res.results[0];
}

Outcome activation_checkpointing() {
  Check c;
  const AcRun none = run_ac({par::ACMode::kNone, "2"});
  const AcRun full = run_ac({par::ACMode::kFull, "2"});
  const AcRun k1 = run_ac({par::ACMode::kSelective, "1"});
  const AcRun op = run_ac({par::ACMode::kSelective, "op"});
  for (const auto* r : {&full, &k1, &op}) {
    for (const auto& [f, g] : none.grads) c.expect(r->grads.at(f).bit_equal(g), f + " gradient changed under AC");
  }
  c.expect(full.peak < none.peak, "full AC does not lower the peak");
  c.expect(k1.peak == full.peak, "selective k=1 differs from full");
  c.expect(full.peak < op.peak && op.peak < none.peak, "op-level AC not between full and none");
  return c.outcome("4 layers, activation peak none " + std::to_string(none.peak) + " > op " + std::to_string(op.peak) +
                   " > full " + std::to_string(full.peak) + " = k1 " + std::to_string(k1.peak) +
                   " bytes; gradients bit-identical");
}

// ---- 10: float8 ----------------------------------------------------------------------

constexpr double kFloat8Lr = 0.05;

// e4m3 decoded from its fields: bias 7, S.1111.111 is NaN.
double decode_fields(int bits) {
  const int sign = bits >> 7, exp = (bits >> 3) & 0xF, man = bits & 0x7;
  if (exp == 0xF && man == 0x7) return NAN;
  const double mag = exp == 0 ? std::ldexp(man / 8.0, -6) : std::ldexp(1.0 + man / 8.0, exp - 7);
  return sign ? -mag : mag;
}

Outcome float8() {
  Check c;
  double best = 0.0;
  for (int b = 0; b < 256; ++b) {
    const double v = decode_fields(b);
    if (std::isnan(v)) {
      c.expect(std::isnan(fp8::decode_e4m3(static_cast<uint8_t>(b))), "NaN pattern decodes to a number");
      continue;
    }
    best = std::max(best, std::abs(v));
    c.expect(fp8::decode_e4m3(static_cast<uint8_t>(b)) == v, "pattern " + std::to_string(b) + " decodes wrongly");
  }
  c.expect(best == 448.0 && fp8::e4m3_max() == 448.0, "E4M3_MAX is not 448");

  // scaled quantize-dequantize; scaled magnitudes below the normal range are counted separately
  std::mt19937_64 gen(10);
  const double min_normal = std::ldexp(1.0, -6);
  double worst = 0.0;
  int64_t normal = 0, below = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_tensor({64}, gen, std::ldexp(1.0, static_cast<int>(gen() % 40) - 20));
    const double scale = par::scale_for_amax(par::amax(x));
    const Tensor q = par::quantize_dequantize(x, scale);
    for (int64_t i = 0; i < x.numel(); ++i) {
      if (std::abs(x[i]) * scale < min_normal) {
        ++below;
        continue;
      }
      ++normal;
      worst = std::max(worst, std::abs(q[i] - x[i]) / std::abs(x[i]));
    }
  }
  c.expect(worst <= 0.25, "quantize-dequantize rel err " + sci(worst));

  train::TrainConfig t;
  t.model.dim = 64;
  t.model.n_layers = 2;
  t.model.n_heads = 2;
  t.model.vocab_size = 256;
  t.model.seq_len = 128;
  t.part.float8.enabled = true;
  t.part.float8.strategy = par::Float8Strategy::kDynamic;
  t.source = {data::TaskKind::kBigram, 256, 4, {}};
  t.local_batch = 8;
  t.steps = 50;
  t.seed = 7;
  t.sgd = {kFloat8Lr, 0.9};
  const auto losses = train::train(t).losses;
  const double drop = 1.0 - losses.back() / losses.front();
  c.expect(drop >= 0.20, "float8 training reduced the loss by only " + std::to_string(100 * drop) + "%");
  return c.outcome("max |e4m3| = 448 by enumeration; qdq rel err " + sci(worst) + " over " + std::to_string(normal) +
                   " normal-range values (tol 0.25, " + std::to_string(below) + " subnormal skipped); loss " +
                   std::to_string(losses.front()).substr(0, 6) + " -> " + std::to_string(losses.back()).substr(0, 6) +
                   " in 50 steps (" + std::to_string(static_cast<int>(100 * drop)) + "% drop)");
}

// ---- 11: hang diagnosis --------------------------------------------------------------

Outcome hang_diagnosis() {
  Check c;
  sim::WorldOptions opts;
  opts.timeout = 300ms;
  auto failed = [&](int world, const std::function<void(sim::RankContext&)>& body) -> std::optional<sim::WorldError> {
    try {
      sim::run_world_raw(world, body, opts);
    } catch (const sim::WorldError& e) {
      return e;
    }
    return std::nullopt;
  };
  // rank 2 skips the 8th all_reduce
  if (auto e = failed(4, [](sim::RankContext& ctx) {
        for (int i = 0; i < 8; ++i) {
          if (ctx.rank() == 2 && i == 7) return;
          ctx.all_reduce(ctx.world_group(), Tensor({2}), sim::ReduceOp::kSum, "step");
        }
      })) {
    const auto& r = e->report();
    c.expect(r.collectives.size() == 1 && r.collectives[0].missing == std::vector<int>{2} &&
                 r.collectives[0].kind == sim::CollectiveKind::kAllReduce && r.collectives[0].seq_id == 7,
             "missing collective misreported: " + r.text());
  } else {
    c.expect(false, "missing collective did not fail");
  }
  // rank 0 stops sending after three messages
  if (auto e = failed(2, [](sim::RankContext& ctx) {
        for (int mb = 0; mb < 5; ++mb) {
          if (ctx.rank() == 0) {
            if (mb == 3) return;
            ctx.send(1, Tensor({2}), "act");
          } else {
            ctx.recv(0, {2}, DType::kF64, "act");
          }
        }
      })) {
    const auto& r = e->report();
    c.expect(r.p2p.size() == 1 && r.p2p[0].src == 0 && r.p2p[0].dst == 1 && r.p2p[0].blocked_recv == 3,
             "missing recv misreported: " + r.text());
  } else {
    c.expect(false, "missing p2p did not fail");
  }
  // rank 3 is late to a barrier
  if (auto e = failed(4, [](sim::RankContext& ctx) {
        if (ctx.rank() == 3) std::this_thread::sleep_for(900ms);
        ctx.barrier(ctx.world_group(), "sync");
      })) {
    const auto& r = e->report();
    c.expect(r.collectives.size() == 1 && r.collectives[0].missing == std::vector<int>{3} &&
                 r.collectives[0].kind == sim::CollectiveKind::kBarrier && r.collectives[0].seq_id == 0,
             "straggler misreported: " + r.text());
  } else {
    c.expect(false, "straggler did not fail");
  }
  return c.outcome("missing all_reduce (rank 2, seq 7), blocked recv (0->1, seq 3), late barrier (rank 3, seq 0) named");
}

// ---- 12: perfmodel -------------------------------------------------------------------

Outcome perfmodel() {
  Check c;
  double worst = 0.0;
  int rows = 0;
  for (const auto& g : grid()) {
    auto ov = g.overrides;
    ov.push_back("--training.steps=1");
    const train::TrainConfig cfg = cli::to_train_config(cli::parse_config("", ov));
    const perf::Report rep = perf::ledger_report(cfg, train::train(cfg).ledgers);
    for (const auto& row : rep.json["comparison"]) {
      const std::string q = row["quantity"];
      if (q != "params_resident" && q != "grads") continue;
      const double e = row["rel_error"];
      worst = std::max(worst, e);
      ++rows;
      c.expect(e <= 0.10, g.name + " rank " + std::to_string(row["rank"].get<int>()) + " " + q + " off by " + sci(e));
    }
    // exact monotonicity around each grid point
    const perf::ParallelSpec base = perf::spec_from_config(cfg);
    const perf::MemoryBreakdown m = perf::estimate_memory(base);
    auto sharded = [](const perf::MemoryBreakdown& x) { return x.params_resident + x.grads + x.optimizer_state; };
    perf::ParallelSpec more = base;
    more.dims.dp_shard *= 2;
    c.expect(sharded(perf::estimate_memory(more)) <= sharded(m), g.name + ": more dp_shard grew state");
    more = base;
    more.dims.tp *= 2;
    if (base.model.n_heads % more.dims.tp == 0) {
      c.expect(sharded(perf::estimate_memory(more)) <= sharded(m), g.name + ": more tp grew state");
    }
    perf::ParallelSpec adam = base;
    adam.optimizer = perf::OptimizerKind::kAdam;
    c.expect(perf::estimate_memory(adam).optimizer_state == 2 * m.optimizer_state, g.name + ": Adam state not 2x");
    double prev = INFINITY;
    for (auto ac : {par::ACConfig{par::ACMode::kNone, "2"}, par::ACConfig{par::ACMode::kSelective, "op"},
                    par::ACConfig{par::ACMode::kFull, "2"}}) {
      perf::ParallelSpec s = base;
      s.ac = ac;
      const double a = perf::estimate_memory(s).activations_peak;
      c.expect(a <= prev, g.name + ": activation estimate not monotone in AC");
      prev = a;
    }
    c.expect(std::abs(m.total() - (m.params_resident + m.grads + m.optimizer_state + m.activations_peak +
                                   m.transient_unsharded)) == 0.0,
             g.name + ": breakdown does not sum");
  }
  return c.outcome(std::to_string(rows) + " param/grad rows over the criterion-1 grid, max rel err " + sci(worst) +
                   " (tol 0.10); monotonicity exact");
}

}  // namespace
}  // namespace titanlab

// Optional arguments select criteria by number.
int main(int argc, char** argv) {
  using titanlab::Outcome;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"4D loss convergence", titanlab::loss_convergence},
      {"schedule equivalence and validation", titanlab::schedules},
      {"bubble economics", titanlab::bubbles},
      {"ring attention equivalence", titanlab::ring_attention},
      {"loss parallel", titanlab::loss_parallel},
      {"checkpoint resharding", titanlab::checkpoint_resharding},
      {"redistribute and sharded-op algebra", titanlab::dtensor_algebra},
      {"gradient correctness", titanlab::gradients},
      {"activation checkpoint ledger", titanlab::activation_checkpointing},
      {"float8 emulation", titanlab::float8},
      {"hang diagnosis", titanlab::hang_diagnosis},
      {"perfmodel sanity", titanlab::perfmodel},
  };
  int failed = 0;
  const auto start = std::chrono::steady_clock::now();
  std::set<size_t> only;
  for (int a = 1; a < argc; ++a) only.insert(static_cast<size_t>(std::stoul(argv[a])));
  int ran = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += o.pass ? 0 : 1;
    std::printf("%-4s criterion %2zu  %-36s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%d/%d criteria passed in %.1fs\n", ran - failed, ran, total);
  return failed == 0 ? 0 : 1;
}
