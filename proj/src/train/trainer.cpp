// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/train/trainer.h"

#include <algorithm>
#include <mutex>

namespace titanlab::train {

pp::PipelineConfig TrainConfig::resolved_pipeline() const {
  pp::PipelineConfig p = pipeline;
  p.degree = part.dims.pp;
  if (p.split_points.empty() && p.degree > 1) {
    const int64_t v = p.schedule == pp::ScheduleKind::kInterleaved1F1B ? 2 : 1;
    p.split_points = pp::even_split_points(model.n_layers, p.degree * v);
  }
  return p;
}

void TrainConfig::validate() const {
  part.dims.validate();
  if (local_batch < 1) throw par::ParallelError("local_batch must be >= 1");
  if (steps < 0) throw par::ParallelError("steps must be >= 0");
  const auto p = resolved_pipeline();
  p.validate();
  if (local_batch % p.microbatches != 0) {
    throw pp::PipelineError("local_batch " + std::to_string(local_batch) + " does not split into " +
                            std::to_string(p.microbatches) + " microbatches");
  }
  if (source.vocab_size != model.vocab_size) throw par::ParallelError("token source vocab differs from the model's");
}

RankTrainer::RankTrainer(sim::RankContext& ctx, const TrainConfig& cfg, const model::MetaModel& meta)
    : ctx_(ctx), cfg_(cfg), meta_(meta), opt_(cfg.sgd) {
  const auto& dims = cfg_.part.dims;
  mesh_ = par::build_world_mesh(dims);
  const auto pcfg = cfg_.resolved_pipeline();
  const auto stages = pp::split_model(meta_, pcfg);
  schedule_ = pp::build_schedule(pcfg);
  const auto coord = mesh_.coordinate(ctx_.rank());
  pp_rank_ = coord[0];
  pp_peers_ = mesh_.group(ctx_.rank(), "pp");
  par::PartConfig pc = cfg_.part;
  pc.seed = cfg_.seed;
  // composition order: pipeline split, then per part TP, AC and data parallel
  for (int64_t s : pp::rank_stages(pcfg, pp_rank_)) {
    parts_[s] = std::make_unique<par::ModelPart>(ctx_, meta_, mesh_, pc, stages[static_cast<size_t>(s)]);
  }
  loader_.seed = cfg_.seed;
  loader_.dp_rank = coord[1] * dims.dp_shard + coord[2];
  loader_.dp_degree = dims.dp();
  loader_.local_batch = cfg_.local_batch;
  loader_.seq_len = cfg_.model.seq_len;
}

RankTrainer::~RankTrainer() = default;

pp::StepOutput RankTrainer::step() {
  const model::Batch batch = data::next_batch(loader_, cfg_.source);
  std::map<int64_t, par::ModelPart*> parts;
  for (auto& [s, p] : parts_) parts[s] = p.get();
  pp::StepOutput out = pp::execute_schedule(ctx_, schedule_, pp_rank_, pp_peers_, parts, batch);
  for (auto& [s, p] : parts_) p->optimizer_step(opt_);
  if (pp_peers_.size() > 1) {
    // every rank reports the step loss; only the last stage contributes
    Tensor l({1});
    l[0] = out.has_loss ? out.loss : 0.0;
    l = ctx_.all_reduce(pp_peers_, l, sim::ReduceOp::kSum, "pp.loss_all_reduce");
    out.loss = l[0];
  }
  return out;
}

std::vector<par::ModelPart*> RankTrainer::parts() {
  std::vector<par::ModelPart*> out;
  for (auto& [s, p] : parts_) out.push_back(p.get());
  return out;
}

std::map<std::string, dt::DTensor> RankTrainer::state() const {
  std::map<std::string, dt::DTensor> out;
  for (const auto& [s, p] : parts_) {
    for (const auto& [f, d] : p->params()) {
      out.emplace(f, d);
      auto it = opt_.state().find(f);
      if (it != opt_.state().end()) out.emplace("optim." + f + ".momentum", d.with_local(it->second));
    }
  }
  return out;
}

void RankTrainer::load_state(const std::map<std::string, dt::DTensor>& state, int64_t cursor) {
  for (auto& [s, p] : parts_) {
    for (auto& [f, d] : p->params()) {
      auto it = state.find(f);
      if (it == state.end()) throw std::invalid_argument("checkpoint state lacks " + f);
      d.mutable_local() = it->second.local();
      auto m = state.find("optim." + f + ".momentum");
      if (m != state.end()) opt_.state()[f] = m->second.local();
      else opt_.state().erase(f);
    }
  }
  loader_.cursor = cursor;
}

void RankTrainer::save_checkpoint(const std::filesystem::path& dir, ckpt::AsyncSaver* saver) {
  const ckpt::SaveInfo info{loader_.cursor, layout_json(cfg_), loader_.dp_rank, loader_.cursor};
  if (saver) {
    saver->save(ctx_, state(), dir, info);
  } else {
    ckpt::save(ctx_, state(), dir, info);
  }
}

void RankTrainer::load_checkpoint(const std::filesystem::path& dir) {
  const ckpt::CheckpointMetadata md = ckpt::read_metadata(dir);
  const auto stored = md.fqns();
  auto has = [&](const std::string& f) { return std::binary_search(stored.begin(), stored.end(), f); };
  std::map<std::string, dt::DTensor> target;
  for (const auto& [s, p] : parts_) {
    for (const auto& [f, d] : p->params()) {
      target.emplace(f, d);
      const std::string mom = "optim." + f + ".momentum";
      if (has(mom)) target.emplace(mom, d);
    }
  }
  ckpt::load_reshard(ctx_, dir, target);
  // every data-parallel rank consumed the same number of batches
  auto it = md.loader_cursors.find(loader_.dp_rank);
  const int64_t cursor = it != md.loader_cursors.end() ? it->second : md.step;
  load_state(target, cursor);
}

std::map<std::string, Tensor> RankTrainer::full_params() {
  std::map<std::string, Tensor> out;
  for (auto& [s, p] : parts_) {
    for (const auto& [f, d] : p->params()) out[f] = dt::full_tensor(ctx_, d);
  }
  return out;
}

nlohmann::json layout_json(const TrainConfig& cfg) {
  const auto& d = cfg.part.dims;
  return {{"pp", d.pp},       {"dp_replicate", d.dp_replicate}, {"dp_shard", d.dp_shard},
          {"cp", d.cp},       {"tp", d.tp},                     {"local_batch", cfg.local_batch},
          {"seed", cfg.seed}, {"model", {{"dim", cfg.model.dim}, {"n_layers", cfg.model.n_layers},
                                         {"n_heads", cfg.model.n_heads}, {"vocab_size", cfg.model.vocab_size},
                                         {"seq_len", cfg.model.seq_len}, {"ffn_hidden", cfg.model.ffn_hidden}}}};
}

TrainResult train(const TrainConfig& cfg, const std::function<void(const StepMetrics&)>& on_step,
                  const sim::WorldOptions& options) {
  cfg.validate();
  const model::MetaModel meta = model::build_meta_model(cfg.model);
  const int world = static_cast<int>(cfg.part.dims.world());
  TrainResult result;
  std::mutex mu;
  auto trace = sim::run_world_raw(
      world,
      [&](sim::RankContext& ctx) {
        RankTrainer trainer(ctx, cfg, meta);
        const auto& ck = cfg.checkpoint;
        if (!ck.resume_from.empty()) trainer.load_checkpoint(ck.resume_from);
        const int64_t first = trainer.steps_done();
        ckpt::AsyncSaver saver;
        std::vector<double> losses;
        std::vector<std::filesystem::path> saved;
        for (int64_t done = first + 1; done <= cfg.steps; ++done) {
          const pp::StepOutput out = trainer.step();
          losses.push_back(out.loss);
          const bool log = (cfg.log_every > 0 && done % cfg.log_every == 0) || done == cfg.steps;
          if (ctx.rank() == 0 && log && on_step) {
            on_step({done, out.loss, cfg.global_batch() * cfg.model.seq_len, ctx.ledger()});
          }
          if (ck.interval > 0 && done % ck.interval == 0) {
            const auto dir = ck.dir / ("step_" + std::to_string(done));
            trainer.save_checkpoint(dir, ck.async ? &saver : nullptr);
            saved.push_back(dir);
          }
        }
        saver.wait();
        // rank 0 writes metadata in its own background task
        if (ck.async && !saved.empty()) ctx.barrier(ctx.world_group(), "checkpoint.barrier");
        auto full = trainer.full_params();
        std::lock_guard<std::mutex> lock(mu);
        if (ctx.rank() == 0) {
          result.first_step = first;
          result.losses = losses;
          result.checkpoints = saved;
        }
        for (auto& [f, t] : full) result.params.try_emplace(f, std::move(t));
      },
      options);
  result.ledgers = std::move(trace.ledgers);
  return result;
}

TrainResult train_oracle(const TrainConfig& cfg) {
  cfg.validate();
  const model::MetaModel meta = model::build_meta_model(cfg.model);
  model::ParamMap params = model::init_dense(meta, cfg.seed);
  model::Sgd opt(cfg.sgd);
  const int64_t m = cfg.resolved_pipeline().microbatches;
  TrainResult result;
  for (int64_t s = 0; s < cfg.steps; ++s) {
    const auto batch = data::global_batch(cfg.source, cfg.seed, s, cfg.global_batch(), cfg.model.seq_len);
    auto r = model::forward_backward_step(meta, params, batch, m);
    result.losses.push_back(r.loss);
    opt.step(params, r.grads);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace titanlab::train
