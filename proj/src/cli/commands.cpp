// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/cli/commands.h"

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "titanlab/checkpoint/checkpoint.h"
#include "titanlab/cli/job_config.h"
#include "titanlab/perfmodel/perfmodel.h"
#include "titanlab/pipeline/pipeline.h"
#include "titanlab/simruntime/recorder.h"
#include "titanlab/train/trainer.h"

namespace titanlab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

std::string metrics_line(const train::StepMetrics& m) {
  json j = {{"step", m.step},
            {"loss", m.loss},
            {"tokens", m.tokens},
            {"bytes_sent", m.ledger.bytes_sent},
            {"bytes_received", m.ledger.bytes_received},
            {"activation_bytes_peak", m.ledger.activation_bytes_peak},
            {"parameter_bytes_peak", m.ledger.parameter_bytes_peak}};
  return j.dump();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace

int run_train(const fs::path& config, const std::vector<std::string>& overrides, std::ostream& out,
              std::ostream& err, const sim::WorldOptions& options) {
  JobConfig job;
  train::TrainConfig cfg;
  try {
    job = load_config(config, overrides);
    cfg = to_train_config(job);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  std::unique_ptr<std::ofstream> file;
  if (!job.metrics.path.empty()) {
    const fs::path mp(job.metrics.path);
    if (mp.has_parent_path()) fs::create_directories(mp.parent_path());
    file = std::make_unique<std::ofstream>(mp);
    if (!*file) {
      err << "config error: metrics.path: cannot write " << job.metrics.path << "\n";
      return kExitConfig;
    }
  }
  std::ostream& metrics = file ? *file : out;
  const fs::path dump_folder(job.job.dump_folder);

  try {
    err << "training " << cfg.steps << " steps on " << cfg.part.dims.world() << " ranks (" << cfg.part.dims.str()
        << ")\n";
    train::TrainResult result = train::train(
        cfg, [&](const train::StepMetrics& m) { metrics << metrics_line(m) << "\n" << std::flush; }, options);
    const perf::Report report = perf::ledger_report(cfg, result.ledgers);
    write_file(dump_folder / "report.json", report.json.dump(2) + "\n");
    write_file(dump_folder / "report.txt", report.text);
    if (!result.losses.empty()) err << "final loss " << fmt("%.6f", result.losses.back()) << "\n";
    for (const auto& c : result.checkpoints) err << "checkpoint " << c.string() << "\n";
    err << "report " << (dump_folder / "report.json").string() << "\n";
  } catch (const sim::WorldError& e) {
    const fs::path dump = dump_folder / "recorder_dump.jsonl";
    err << "runtime error: " << e.what() << "\n";
    try {
      fs::create_directories(dump_folder);
      sim::write_dump(dump, e.records());
      err << "recorder dump written to " << dump.string() << "\n";
    } catch (const std::exception& w) {
      err << "could not write recorder dump: " << w.what() << "\n";
    }
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_analyze_trace(const fs::path& dump, std::ostream& out, std::ostream& err) {
  std::vector<sim::CollectiveRecord> records;
  try {
    records = sim::read_dump(dump);
  } catch (const std::exception& e) {
    err << "cannot read dump: " << e.what() << "\n";
    return kExitConfig;
  }
  const sim::HangReport report = sim::analyze_recorder(records);
  out << records.size() << " records\n";
  if (report.empty()) {
    out << "no stuck collectives or point-to-point transfers\n";
  } else {
    out << report.text();
  }
  return kExitOk;
}

namespace {

par::ParallelDims parse_layout(const std::string& text) {
  par::ParallelDims d;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("layout", "expected name=degree, got '" + item + "'");
    const std::string name = item.substr(0, eq);
    int64_t v = 0;
    try {
      size_t used = 0;
      v = std::stoll(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing text");
    } catch (const std::exception&) {
      throw ConfigError("layout." + name, "expected an integer degree");
    }
    if (v < 1) throw ConfigError("layout." + name, "must be >= 1");
    if (name == "pp") d.pp = v;
    else if (name == "dp_replicate") d.dp_replicate = v;
    else if (name == "dp_shard") d.dp_shard = v;
    else if (name == "cp") d.cp = v;
    else if (name == "tp") d.tp = v;
    else throw ConfigError("layout." + name, "unknown degree (pp, dp_replicate, dp_shard, cp, tp)");
  }
  return d;
}

// A training config able to hold the checkpoint's state under `dims`.
train::TrainConfig convert_config(const ckpt::CheckpointMetadata& md, const par::ParallelDims& dims) {
  const json& l = md.layout;
  if (!l.contains("model")) throw ConfigError("layout", "checkpoint metadata has no model description");
  train::TrainConfig t;
  const json& m = l.at("model");
  t.model.dim = m.at("dim").get<int64_t>();
  t.model.n_layers = m.at("n_layers").get<int64_t>();
  t.model.n_heads = m.at("n_heads").get<int64_t>();
  t.model.vocab_size = m.at("vocab_size").get<int64_t>();
  t.model.seq_len = m.at("seq_len").get<int64_t>();
  t.model.ffn_hidden = m.value("ffn_hidden", int64_t{0});
  t.part.dims = dims;
  t.part.dims.validate();
  t.part.dp.shard_degree = dims.dp_shard;
  t.part.dp.replicate_degree = dims.dp_replicate;
  t.pipeline.degree = dims.pp;
  t.source.vocab_size = t.model.vocab_size;
  const int64_t global = l.at("local_batch").get<int64_t>() * l.at("dp_replicate").get<int64_t>() *
                         l.at("dp_shard").get<int64_t>();
  if (global % dims.dp() != 0) {
    throw ConfigError("layout", "global batch " + std::to_string(global) + " does not divide over " +
                                    std::to_string(dims.dp()) + " data-parallel ranks");
  }
  t.local_batch = global / dims.dp();
  t.seed = l.at("seed").get<uint64_t>();
  t.steps = md.step;
  t.validate();
  return t;
}

}  // namespace

int run_convert_checkpoint(const fs::path& src, const fs::path& dst, const std::string& layout, std::ostream& out,
                           std::ostream& err) {
  train::TrainConfig cfg;
  try {
    const ckpt::CheckpointMetadata md = ckpt::read_metadata(src);
    cfg = convert_config(md, parse_layout(layout));
  } catch (const std::exception& e) {
    err << "convert error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    const model::MetaModel meta = model::build_meta_model(cfg.model);
    sim::run_world_raw(static_cast<int>(cfg.part.dims.world()), [&](sim::RankContext& ctx) {
      train::RankTrainer trainer(ctx, cfg, meta);
      trainer.load_checkpoint(src);
      trainer.save_checkpoint(dst);
    });
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  out << "wrote " << dst.string() << " for " << cfg.part.dims.str() << "\n";
  return kExitOk;
}

int run_schedule(const ScheduleArgs& args, std::ostream& out, std::ostream& err) {
  pp::PipelineSchedule sched;
  try {
    pp::PipelineConfig cfg;
    cfg.degree = args.stages;
    cfg.schedule = pp::schedule_from_name(args.schedule);
    cfg.microbatches = args.microbatches;
    if (args.stages < 1 || args.stages_per_rank < 1) throw ConfigError("stages", "must be >= 1");
    for (int64_t i = 1; i < args.stages * args.stages_per_rank; ++i) {
      cfg.split_points.push_back("layers." + std::to_string(i));
    }
    cfg.validate();
    sched = pp::build_schedule(cfg);
  } catch (const std::exception& e) {
    err << "schedule error: " << e.what() << "\n";
    return kExitConfig;
  }
  out << pp::dump_schedule(sched);
  if (auto issue = pp::validate_schedule(sched)) {
    out << "invalid: " << issue->what << "\n";
    return kExitRuntime;
  }
  const pp::BubbleReport b = pp::bubble_analysis(sched);
  out << "valid\n"
      << "bubble fraction " << b.bubble_fraction.num << "/" << b.bubble_fraction.den << " ("
      << fmt("%.4f", b.bubble_fraction.value()) << ")\n";
  return kExitOk;
}

int run_estimate(const fs::path& config, const std::vector<std::string>& overrides, bool as_json, std::ostream& out,
                 std::ostream& err) {
  perf::ParallelSpec spec;
  try {
    spec = perf::spec_from_config(to_train_config(load_config(config, overrides)));
    spec.validate();
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  const perf::MemoryBreakdown mem = perf::estimate_memory(spec);
  const perf::StepTime st = perf::estimate_step_time(spec);
  if (as_json) {
    json j = {{"layout", spec.dims.str()},
              {"memory",
               {{"params_resident", mem.params_resident},
                {"grads", mem.grads},
                {"optimizer_state", mem.optimizer_state},
                {"activations_peak", mem.activations_peak},
                {"transient_unsharded", mem.transient_unsharded},
                {"total", mem.total()}}},
              {"step_time",
               {{"compute", st.compute},
                {"exposed_comm", st.exposed_comm},
                {"bubble", st.bubble},
                {"total", st.total},
                {"comm", st.comm},
                {"bubble_fraction",
                 std::to_string(st.bubble_fraction.num) + "/" + std::to_string(st.bubble_fraction.den)}}}};
    out << j.dump(2) << "\n";
    return kExitOk;
  }
  out << "layout " << spec.dims.str() << "\n"
      << "memory per rank (bytes)\n"
      << "  params_resident      " << fmt("%.0f", mem.params_resident) << "\n"
      << "  grads                " << fmt("%.0f", mem.grads) << "\n"
      << "  optimizer_state      " << fmt("%.0f", mem.optimizer_state) << "\n"
      << "  activations_peak     " << fmt("%.0f", mem.activations_peak) << "\n"
      << "  transient_unsharded  " << fmt("%.0f", mem.transient_unsharded) << "\n"
      << "  total                " << fmt("%.0f", mem.total()) << "\n"
      << "step time (s)\n"
      << "  compute              " << fmt("%.6g", st.compute) << "\n"
      << "  exposed_comm         " << fmt("%.6g", st.exposed_comm) << "\n";
  for (const auto& [k, v] : st.comm) out << "    " << k << std::string(17 - k.size(), ' ') << fmt("%.6g", v) << "\n";
  out << "  bubble               " << fmt("%.6g", st.bubble) << "\n"
      << "  total                " << fmt("%.6g", st.total) << "\n"
      << "  bubble_fraction      " << st.bubble_fraction.num << "/" << st.bubble_fraction.den << "\n";
  return kExitOk;
}

}  // namespace titanlab::cli
