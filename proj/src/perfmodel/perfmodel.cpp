// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/perfmodel/perfmodel.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace titanlab::perf {

using nlohmann::json;
using Kind = pp::ScheduleAction::Kind;

pp::PipelineConfig ParallelSpec::pipeline() const {
  pp::PipelineConfig p;
  p.degree = dims.pp;
  p.schedule = schedule;
  p.microbatches = microbatches;
  p.split_points = split_points;
  if (p.split_points.empty() && p.degree > 1) {
    const int64_t v = schedule == pp::ScheduleKind::kInterleaved1F1B ? 2 : 1;
    p.split_points = pp::even_split_points(model.n_layers, p.degree * v);
  }
  return p;
}

void ParallelSpec::validate() const {
  model.validate();
  dims.validate();
  ac.validate();
  pipeline().validate();
  if (local_batch < 1 || local_batch % microbatches != 0) {
    throw par::ParallelError("local_batch must be a positive multiple of the microbatch count");
  }
  if (tp_chunks < 1) throw par::ParallelError("tp chunk count must be >= 1");
  if (param_bytes < 1 || compute_bytes < 1 || grad_bytes < 1) throw par::ParallelError("element sizes must be >= 1");
  if (!(alpha >= 0) || !(bandwidth > 0) || !(flops_per_second > 0)) {
    throw par::ParallelError("link and compute rates must be positive");
  }
}

ParallelSpec spec_from_config(const train::TrainConfig& cfg) {
  ParallelSpec s;
  s.model = cfg.model;
  s.dims = cfg.part.dims;
  s.schedule = cfg.pipeline.schedule;
  s.microbatches = cfg.pipeline.microbatches;
  s.split_points = cfg.pipeline.split_points;
  s.ac = cfg.part.ac;
  s.loss_parallel = cfg.part.loss_parallel;
  s.tp_chunks = cfg.part.tp_chunks;
  s.local_batch = cfg.local_batch;
  s.param_bytes = dtype_size(DType::kF64);
  s.compute_bytes = dtype_size(cfg.part.dp.param_dtype);
  s.grad_bytes = dtype_size(cfg.part.dp.reduce_dtype);
  return s;
}

namespace {

struct Shapes {
  double rows, L, Ls, d, dt, ft, ht, vt, cp;
};

Shapes shapes(const ParallelSpec& s) {
  const auto& m = s.model;
  const double tp = static_cast<double>(s.dims.tp);
  const double cp = static_cast<double>(s.dims.cp);
  const double L = static_cast<double>(m.seq_len) / cp;
  return {static_cast<double>(s.local_batch / s.microbatches),
          L,
          L / tp,
          static_cast<double>(m.dim),
          static_cast<double>(m.dim) / tp,
          static_cast<double>(m.ffn_dim()) / tp,
          static_cast<double>(m.n_heads) / tp,
          static_cast<double>(m.vocab_size) / tp,
          cp};
}

// Saved bytes of one block for one microbatch under the AC policy.
double block_activation_bytes(const ParallelSpec& s, int64_t layer) {
  const Shapes x = shapes(s);
  double elems;
  if (s.ac.checkpoints_layer(layer)) {
    elems = x.Ls * x.d;
  } else if (s.ac.op_level()) {
    elems = 2 * x.Ls * x.d + 3 * x.L * x.dt + x.L * x.ft + x.ht * x.L;
  } else {
    elems = 5 * x.Ls * x.d + 2 * x.L * x.d + 8 * x.L * x.dt + 3 * x.L * x.ft + 2 * x.Ls + x.ht * x.L;
    if (x.cp > 1) elems += 2 * x.cp * x.L * x.dt;
  }
  return x.rows * elems * static_cast<double>(s.compute_bytes);
}

double head_activation_bytes(const ParallelSpec& s) {
  const Shapes x = shapes(s);
  return x.rows * (2 * x.Ls * x.d + x.L * x.d + x.L * x.vt + x.Ls) * static_cast<double>(s.compute_bytes);
}

double stage_activation_bytes(const ParallelSpec& s, const par::StageSpec& st) {
  double b = 0;
  for (int64_t l = st.first_layer; l < st.last_layer; ++l) b += block_activation_bytes(s, l);
  if (st.has_head) b += head_activation_bytes(s);
  return b;
}

double numel_of_fqns(const model::MetaModel& meta, const std::vector<std::string>& fqns) {
  double n = 0;
  for (const auto& f : fqns) n += static_cast<double>(numel_of(meta.find(f).shape));
  return n;
}

// Parameter groups gathered together: embedding, each block, head.
std::vector<std::vector<std::string>> stage_units(const par::StageSpec& st) {
  std::vector<std::vector<std::string>> out;
  if (st.has_embedding) out.push_back({"tok_embeddings.weight"});
  for (int64_t l = st.first_layer; l < st.last_layer; ++l) out.push_back(model::block_param_fqns(l));
  if (st.has_head) out.push_back({"norm.weight", "output.weight"});
  return out;
}

struct Layout {
  model::MetaModel meta;
  pp::PipelineConfig pcfg;
  std::vector<par::StageSpec> stages;
  pp::PipelineSchedule schedule;
};

Layout layout_of(const ParallelSpec& spec) {
  spec.validate();
  Layout l;
  l.meta = model::build_meta_model(spec.model);
  l.pcfg = spec.pipeline();
  l.stages = pp::split_model(l.meta, l.pcfg);
  l.schedule = pp::build_schedule(l.pcfg);
  return l;
}

MemoryBreakdown memory_for_rank(const ParallelSpec& spec, const Layout& lay, int64_t pp_rank) {
  const double shards = static_cast<double>(spec.dims.dp_shard * spec.dims.cp * spec.dims.tp);
  const double tp = static_cast<double>(spec.dims.tp);
  const bool zero3 = spec.dims.pp == 1;
  double params = 0, transient_max = 0, transient_sum = 0;
  std::map<int64_t, double> act;
  for (int64_t s : pp::rank_stages(lay.pcfg, pp_rank)) {
    const auto& st = lay.stages[static_cast<size_t>(s)];
    params += numel_of_fqns(lay.meta, st.fqns(lay.meta));
    for (const auto& u : stage_units(st)) {
      const double b = numel_of_fqns(lay.meta, u) * static_cast<double>(spec.compute_bytes) / tp;
      transient_max = std::max(transient_max, b);
      transient_sum += b;
    }
    act[s] = stage_activation_bytes(spec, st);
  }
  MemoryBreakdown m;
  m.params_resident = params * static_cast<double>(spec.param_bytes) / shards;
  m.grads = params * static_cast<double>(spec.grad_bytes) / shards;
  const double opt_factor = spec.optimizer == OptimizerKind::kAdam ? 2.0 : 1.0;
  m.optimizer_state = opt_factor * m.params_resident;
  // ZeRO-2 under pipelining keeps every unit of the rank gathered
  m.transient_unsharded = zero3 ? transient_max : transient_sum;
  // saved activations live from a microbatch's forward to its input backward
  double live = 0;
  for (const auto& a : lay.schedule.ranks[static_cast<size_t>(pp_rank)]) {
    if (a.kind == Kind::kForward) live += act[a.stage];
    if (a.kind == Kind::kBackward || a.kind == Kind::kBackwardInput) {
      m.activations_peak = std::max(m.activations_peak, live);
      live -= act[a.stage];
    }
  }
  m.activations_peak = std::max(m.activations_peak, live);
  return m;
}

double block_forward_flops(const ParallelSpec& s, const Shapes& x) {
  const double d = x.d, f = static_cast<double>(s.model.ffn_dim());
  const double seq = static_cast<double>(s.model.seq_len);
  const double matmul = 2 * x.L * (4 * d * d + 3 * d * f);
  const double attention = 0.5 * 4 * x.L * seq * d;  // causal
  return x.rows * (matmul + attention) / static_cast<double>(s.dims.tp);
}

double recompute_flops(const ParallelSpec& s, const Shapes& x, int64_t layer) {
  if (s.ac.checkpoints_layer(layer)) return block_forward_flops(s, x);
  if (s.ac.op_level()) {
    // k and the gate projection are not saved
    const double d = x.d, f = static_cast<double>(s.model.ffn_dim());
    return x.rows * 2 * x.L * (d * d + d * f) / static_cast<double>(s.dims.tp);
  }
  return 0;
}

}  // namespace

MemoryBreakdown estimate_memory(const ParallelSpec& spec, std::optional<int64_t> pp_rank) {
  const Layout lay = layout_of(spec);
  if (pp_rank) {
    if (*pp_rank < 0 || *pp_rank >= spec.dims.pp) throw par::ParallelError("pipeline rank out of range");
    return memory_for_rank(spec, lay, *pp_rank);
  }
  MemoryBreakdown best;
  for (int64_t r = 0; r < spec.dims.pp; ++r) {
    const MemoryBreakdown m = memory_for_rank(spec, lay, r);
    if (r == 0 || m.total() > best.total()) best = m;
  }
  return best;
}

double ring_time(int64_t world, double bytes, double alpha, double bandwidth) {
  if (world <= 1) return 0.0;
  const double w = static_cast<double>(world);
  return (w - 1) * alpha + (w - 1) / w * bytes / bandwidth;
}

StepTime estimate_step_time(const ParallelSpec& spec) {
  const Layout lay = layout_of(spec);
  const Shapes x = shapes(spec);
  const double m = static_cast<double>(spec.microbatches);
  const double tp = static_cast<double>(spec.dims.tp);
  const double cb = static_cast<double>(spec.compute_bytes);
  const double a = spec.alpha, bw = spec.bandwidth;
  const int64_t fsdp = spec.dims.dp_shard * spec.dims.cp;
  const bool zero3 = spec.dims.pp == 1;
  const pp::BubbleReport bubble = pp::bubble_analysis(lay.schedule, pp::UnitCosts{1, 1, 1});

  // per-microbatch compute seconds of every stage
  std::vector<double> stage_time(static_cast<size_t>(lay.pcfg.num_stages()), 0.0);
  for (size_t s = 0; s < stage_time.size(); ++s) {
    const auto& st = lay.stages[s];
    double flops = 0;
    for (int64_t l = st.first_layer; l < st.last_layer; ++l) {
      flops += 3 * block_forward_flops(spec, x) + recompute_flops(spec, x, l);
    }
    if (st.has_head) flops += 3 * x.rows * 2 * x.L * x.d * static_cast<double>(spec.model.vocab_size) / tp;
    stage_time[s] = flops / spec.flops_per_second;
  }
  // The unit-cost schedule (F = BI = BW = 1) paced by the slowest stage.
  const double unit = *std::max_element(stage_time.begin(), stage_time.end()) / 3;
  const double makespan = static_cast<double>(bubble.total_time) * unit;

  StepTime best;
  double busiest = 0;
  for (int64_t r = 0; r < spec.dims.pp; ++r) {
    StepTime t;
    t.bubble_fraction = bubble.bubble_fraction;
    double fsdp_time = 0, tp_block = 0, tp_other = 0, cp_time = 0, pp_time = 0;
    const double act_msg = x.rows * x.Ls * x.d * cb;  // one SP-sharded activation
    for (int64_t s : pp::rank_stages(lay.pcfg, r)) {
      const auto& st = lay.stages[static_cast<size_t>(s)];
      t.compute += m * stage_time[static_cast<size_t>(s)];
      for (int64_t l = st.first_layer; l < st.last_layer; ++l) {
        // two all_gathers and two reduce_scatters each way, on full activations
        tp_block += m * 8 * ring_time(spec.dims.tp, act_msg * tp, a, bw);
        // K and V rotate around the ring forward and their grads backward
        const double kv = 2 * x.rows * x.L * x.dt * cb;
        cp_time += m * 2 * static_cast<double>(spec.dims.cp - 1) * (a + kv / bw);
      }
      if (st.has_head) {
        tp_other += m * 2 * ring_time(spec.dims.tp, act_msg * tp, a, bw);
        if (!spec.loss_parallel) tp_other += m * ring_time(spec.dims.tp, x.rows * x.L * x.vt * tp * cb, a, bw);
      }
      for (const auto& u : stage_units(st)) {
        const double full = numel_of_fqns(lay.meta, u) / tp;
        const double gathers = zero3 ? 2 * m : 1;
        fsdp_time += gathers * ring_time(fsdp, full * cb, a, bw);
        fsdp_time += ring_time(fsdp, full * static_cast<double>(spec.grad_bytes), a, bw);
        fsdp_time += 2 * ring_time(spec.dims.dp_replicate, full * static_cast<double>(spec.grad_bytes) /
                                                             static_cast<double>(fsdp), a, bw);
      }
      // boundary activations out and their grads back, per microbatch
      if (s + 1 < lay.pcfg.num_stages()) pp_time += m * 2 * (a + act_msg / bw);
    }
    busiest = std::max(busiest, t.compute);
    t.tp_block_comm = tp_block;
    // chunked TP hides all but one chunk's collective behind compute
    const double tp_exposed = tp_block / static_cast<double>(spec.tp_chunks) + tp_other;
    t.comm = {{"fsdp", fsdp_time}, {"tp", tp_exposed}, {"cp", cp_time}, {"pp", pp_time}};
    t.exposed_comm = fsdp_time + tp_exposed + cp_time + pp_time;
    if (r == 0 || t.compute + t.exposed_comm > best.compute + best.exposed_comm) best = t;
  }
  // idle time of the busiest rank within the paced schedule
  best.bubble = std::max(0.0, makespan - busiest);
  best.compute = busiest;
  best.total = best.compute + best.exposed_comm + best.bubble;
  return best;
}

std::optional<int64_t> fsdp_comm_bound_world(ParallelSpec spec, int64_t max_world) {
  for (int64_t w = 1; w <= max_world; w *= 2) {
    spec.dims.dp_shard = w;
    const StepTime t = estimate_step_time(spec);
    if (t.comm.at("fsdp") > t.compute) return w;
  }
  return std::nullopt;
}

// ---- reports -------------------------------------------------------------------------

namespace {

const char* kSchemaText = R"json({
  "title": "titanlab ledger report",
  "type": "object",
  "required": ["schema_version", "layout", "tokens_per_step", "ranks", "comparison", "step_time"],
  "properties": {
    "schema_version": {"const": 1},
    "layout": {
      "type": "object",
      "required": ["pp", "dp_replicate", "dp_shard", "cp", "tp", "world"],
      "properties": {
        "pp": {"type": "integer", "minimum": 1},
        "dp_replicate": {"type": "integer", "minimum": 1},
        "dp_shard": {"type": "integer", "minimum": 1},
        "cp": {"type": "integer", "minimum": 1},
        "tp": {"type": "integer", "minimum": 1},
        "world": {"type": "integer", "minimum": 1}
      }
    },
    "tokens_per_step": {"type": "integer", "minimum": 0},
    "ranks": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["rank", "pp_rank", "bytes_sent", "bytes_received", "collectives", "activation_bytes_peak",
                     "recompute_bytes_peak", "parameter_bytes_resident", "gradient_bytes_resident",
                     "optimizer_bytes_resident", "transient_parameter_bytes_peak"],
        "properties": {
          "rank": {"type": "integer", "minimum": 0},
          "pp_rank": {"type": "integer", "minimum": 0},
          "bytes_sent": {"type": "integer", "minimum": 0},
          "bytes_received": {"type": "integer", "minimum": 0},
          "collectives": {
            "type": "array",
            "items": {
              "type": "object",
              "required": ["kind", "count", "bytes"],
              "properties": {
                "kind": {"enum": ["all_reduce", "all_gather", "reduce_scatter", "broadcast", "all_to_all", "send",
                                  "recv", "barrier"]},
                "count": {"type": "integer", "minimum": 0},
                "bytes": {"type": "integer", "minimum": 0}
              }
            }
          },
          "activation_bytes_peak": {"type": "integer", "minimum": 0},
          "recompute_bytes_peak": {"type": "integer", "minimum": 0},
          "parameter_bytes_resident": {"type": "integer", "minimum": 0},
          "gradient_bytes_resident": {"type": "integer", "minimum": 0},
          "optimizer_bytes_resident": {"type": "integer", "minimum": 0},
          "transient_parameter_bytes_peak": {"type": "integer", "minimum": 0}
        }
      }
    },
    "comparison": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["quantity", "rank", "estimated", "measured", "rel_error"],
        "properties": {
          "quantity": {"enum": ["params_resident", "grads", "optimizer_state", "activations_peak",
                                "transient_unsharded"]},
          "rank": {"type": "integer", "minimum": 0},
          "estimated": {"type": "number", "minimum": 0},
          "measured": {"type": "number", "minimum": 0},
          "rel_error": {"type": "number", "minimum": 0}
        }
      }
    },
    "step_time": {
      "type": "object",
      "required": ["compute", "exposed_comm", "bubble", "total", "bubble_fraction"],
      "properties": {
        "compute": {"type": "number", "minimum": 0},
        "exposed_comm": {"type": "number", "minimum": 0},
        "bubble": {"type": "number", "minimum": 0},
        "total": {"type": "number", "minimum": 0},
        "bubble_fraction": {"type": "string"}
      }
    }
  }
}
)json";

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

void check(const json& doc, const json& schema, const std::string& path, std::vector<std::string>& out) {
  if (schema.contains("const") && doc != schema["const"]) {
    out.push_back(path + ": expected " + schema["const"].dump());
  }
  if (schema.contains("enum")) {
    const auto& e = schema["enum"];
    if (std::find(e.begin(), e.end(), doc) == e.end()) out.push_back(path + ": " + doc.dump() + " not in enum");
  }
  if (schema.contains("type")) {
    const std::string t = schema["type"];
    bool ok = false;
    if (t == "object") ok = doc.is_object();
    else if (t == "array") ok = doc.is_array();
    else if (t == "string") ok = doc.is_string();
    else if (t == "integer") ok = doc.is_number_integer();
    else if (t == "number") ok = doc.is_number();
    else if (t == "boolean") ok = doc.is_boolean();
    if (!ok) {
      out.push_back(path + ": expected " + t);
      return;
    }
  }
  if (schema.contains("minimum") && doc.is_number() && doc.get<double>() < schema["minimum"].get<double>()) {
    out.push_back(path + ": below minimum " + schema["minimum"].dump());
  }
  if (doc.is_object()) {
    for (const auto& k : schema.value("required", json::array())) {
      if (!doc.contains(k.get<std::string>())) out.push_back(path + ": missing " + k.get<std::string>());
    }
    if (schema.contains("properties")) {
      for (const auto& [k, sub] : schema["properties"].items()) {
        if (doc.contains(k)) check(doc[k], sub, path + "." + k, out);
      }
    }
  }
  if (doc.is_array() && schema.contains("items")) {
    for (size_t i = 0; i < doc.size(); ++i) check(doc[i], schema["items"], path + "[" + std::to_string(i) + "]", out);
  }
}

}  // namespace

const json& report_schema() {
  static const json schema = json::parse(kSchemaText);
  return schema;
}

std::vector<std::string> validate_json(const json& doc, const json& schema) {
  std::vector<std::string> out;
  check(doc, schema, "$", out);
  return out;
}

Report ledger_report(const train::TrainConfig& cfg, const std::vector<sim::CostLedger>& ledgers) {
  const ParallelSpec spec = spec_from_config(cfg);
  const auto& d = spec.dims;
  if (static_cast<int64_t>(ledgers.size()) != d.world()) {
    throw par::ParallelError("report needs one ledger per rank: got " + std::to_string(ledgers.size()) + " for world " +
                             std::to_string(d.world()));
  }
  const int64_t per_stage = d.world() / d.pp;
  const StepTime st = estimate_step_time(spec);
  std::vector<MemoryBreakdown> est;
  for (int64_t r = 0; r < d.pp; ++r) est.push_back(estimate_memory(spec, r));

  Report rep;
  json& j = rep.json;
  j["schema_version"] = kReportSchemaVersion;
  j["layout"] = {{"pp", d.pp}, {"dp_replicate", d.dp_replicate}, {"dp_shard", d.dp_shard},
                 {"cp", d.cp}, {"tp", d.tp},                     {"world", d.world()}};
  j["tokens_per_step"] = cfg.global_batch() * cfg.model.seq_len;
  j["ranks"] = json::array();
  j["comparison"] = json::array();
  std::ostringstream text;
  text << "layout " << d.str() << ", " << j["tokens_per_step"].get<int64_t>() << " tokens/step\n";
  text << "rank  kind            count        bytes\n";
  for (int64_t r = 0; r < d.world(); ++r) {
    const auto& l = ledgers[static_cast<size_t>(r)];
    json row = {{"rank", r},
                {"pp_rank", r / per_stage},
                {"bytes_sent", l.bytes_sent},
                {"bytes_received", l.bytes_received},
                {"collectives", json::array()},
                {"activation_bytes_peak", l.activation_bytes_peak},
                {"recompute_bytes_peak", l.recompute_bytes_peak},
                {"parameter_bytes_resident", l.parameter_bytes_resident},
                {"gradient_bytes_resident", l.gradient_bytes_resident},
                {"optimizer_bytes_resident", l.optimizer_bytes_resident},
                {"transient_parameter_bytes_peak", l.transient_parameter_bytes_peak}};
    for (const auto& [k, n] : l.collective_counts) {
      auto it = l.bytes_by_kind.find(k);
      const int64_t bytes = it == l.bytes_by_kind.end() ? 0 : it->second;
      row["collectives"].push_back({{"kind", sim::kind_name(k)}, {"count", n}, {"bytes", bytes}});
      text << std::left << std::setw(6) << r << std::setw(16) << sim::kind_name(k) << std::right << std::setw(5) << n
           << std::setw(13) << bytes << "\n";
    }
    j["ranks"].push_back(row);
  }
  text << "rank  quantity              estimated     measured   rel_err\n";
  for (int64_t r = 0; r < d.world(); ++r) {
    const auto& l = ledgers[static_cast<size_t>(r)];
    const MemoryBreakdown& e = est[static_cast<size_t>(r / per_stage)];
    const std::pair<const char*, std::pair<double, double>> rows[] = {
        {"params_resident", {e.params_resident, static_cast<double>(l.parameter_bytes_resident)}},
        {"grads", {e.grads, static_cast<double>(l.gradient_bytes_resident)}},
        {"optimizer_state", {e.optimizer_state, static_cast<double>(l.optimizer_bytes_resident)}},
        {"activations_peak", {e.activations_peak, static_cast<double>(l.activation_bytes_peak)}},
        {"transient_unsharded", {e.transient_unsharded, static_cast<double>(l.transient_parameter_bytes_peak)}},
    };
    for (const auto& [q, v] : rows) {
      const double rel = v.second > 0 ? std::abs(v.first - v.second) / v.second : (v.first > 0 ? 1.0 : 0.0);
      j["comparison"].push_back(
          {{"quantity", q}, {"rank", r}, {"estimated", v.first}, {"measured", v.second}, {"rel_error", rel}});
      text << std::left << std::setw(6) << r << std::setw(20) << q << std::right << std::setw(12) << fmt(v.first, 6)
           << std::setw(13) << fmt(v.second, 6) << std::setw(10) << fmt(rel, 3) << "\n";
    }
  }
  const std::string bf =
      std::to_string(st.bubble_fraction.num) + "/" + std::to_string(st.bubble_fraction.den);
  j["step_time"] = {{"compute", st.compute},
                    {"exposed_comm", st.exposed_comm},
                    {"bubble", st.bubble},
                    {"total", st.total},
                    {"bubble_fraction", bf}};
  text << "estimated step: compute " << fmt(st.compute) << " s, exposed comm " << fmt(st.exposed_comm)
       << " s, bubble " << fmt(st.bubble) << " s (" << bf << "), total " << fmt(st.total) << " s\n";
  rep.text = text.str();
  return rep;
}

}  // namespace titanlab::perf
