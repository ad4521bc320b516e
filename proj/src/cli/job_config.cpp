// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/cli/job_config.h"

#include <fstream>
#include <functional>
#include <sstream>
#include <variant>

#define TOML_EXCEPTIONS 1
#include "toml.hpp"

#include "titanlab/dataloader/dataloader.h"

namespace titanlab::cli {

namespace {

using Slot = std::variant<int64_t*, double*, bool*, std::string*, std::vector<std::string>*>;

struct Field {
  std::string section;
  std::string key;
  Slot slot;

  std::string name() const { return section + "." + key; }
};

std::vector<Field> fields(JobConfig& c) {
  auto& p = c.parallelism;
  return {
      {"job", "world_size", &c.job.world_size},
      {"job", "dump_folder", &c.job.dump_folder},
      {"model", "dim", &c.model.dim},
      {"model", "n_layers", &c.model.n_layers},
      {"model", "n_heads", &c.model.n_heads},
      {"model", "vocab_size", &c.model.vocab_size},
      {"model", "seq_len", &c.model.seq_len},
      {"model", "ffn_hidden", &c.model.ffn_hidden},
      {"model", "norm_eps", &c.model.norm_eps},
      {"model", "rope_theta", &c.model.rope_theta},
      {"training", "steps", &c.training.steps},
      {"training", "lr", &c.training.lr},
      {"training", "momentum", &c.training.momentum},
      {"training", "seed", &c.training.seed},
      {"training", "local_batch", &c.training.local_batch},
      {"training", "mixed_precision_param", &c.training.mixed_precision_param},
      {"training", "mixed_precision_reduce", &c.training.mixed_precision_reduce},
      {"data", "task", &c.data.task},
      {"data", "branching", &c.data.branching},
      {"data", "tokens_file", &c.data.tokens_file},
      {"parallelism", "data_parallel_shard_degree", &p.data_parallel_shard_degree},
      {"parallelism", "data_parallel_replicate_degree", &p.data_parallel_replicate_degree},
      {"parallelism", "tensor_parallel_degree", &p.tensor_parallel_degree},
      {"parallelism", "enable_loss_parallel", &p.enable_loss_parallel},
      {"parallelism", "enable_async_tensor_parallel", &p.enable_async_tensor_parallel},
      {"parallelism", "context_parallel_degree", &p.context_parallel_degree},
      {"parallelism", "context_parallel_rotate_method", &p.context_parallel_rotate_method},
      {"parallelism", "pipeline_parallel_degree", &p.pipeline_parallel_degree},
      {"parallelism", "pipeline_parallel_split_points", &p.pipeline_parallel_split_points},
      {"parallelism", "pipeline_parallel_schedule", &p.pipeline_parallel_schedule},
      {"parallelism", "pipeline_parallel_microbatches", &p.pipeline_parallel_microbatches},
      {"activation_checkpoint", "mode", &c.activation_checkpoint.mode},
      {"activation_checkpoint", "selective_ac_type", &c.activation_checkpoint.selective_ac_type},
      {"float8", "enabled", &c.float8.enabled},
      {"float8", "strategy", &c.float8.strategy},
      {"checkpoint", "interval", &c.checkpoint.interval},
      {"checkpoint", "async", &c.checkpoint.async},
      {"checkpoint", "dir", &c.checkpoint.dir},
      {"checkpoint", "resume_from", &c.checkpoint.resume_from},
      {"metrics", "path", &c.metrics.path},
  };
}

Field* find_field(std::vector<Field>& fs, const std::string& name) {
  for (auto& f : fs) {
    if (f.name() == name) return &f;
  }
  return nullptr;
}

// Stores a parsed TOML value, checking its type against the field's.
void assign(const Field& f, const toml::node& v) {
  const std::string name = f.name();
  std::visit(
      [&](auto* dst) {
        using T = std::remove_pointer_t<decltype(dst)>;
        if constexpr (std::is_same_v<T, int64_t>) {
          if (!v.is_integer()) throw ConfigError(name, "expected an integer");
          *dst = v.as_integer()->get();
        } else if constexpr (std::is_same_v<T, double>) {
          if (v.is_integer()) *dst = static_cast<double>(v.as_integer()->get());
          else if (v.is_floating_point()) *dst = v.as_floating_point()->get();
          else throw ConfigError(name, "expected a number");
        } else if constexpr (std::is_same_v<T, bool>) {
          if (!v.is_boolean()) throw ConfigError(name, "expected true or false");
          *dst = v.as_boolean()->get();
        } else if constexpr (std::is_same_v<T, std::string>) {
          if (!v.is_string()) throw ConfigError(name, "expected a string");
          *dst = v.as_string()->get();
        } else {
          const toml::array* a = v.as_array();
          if (!a) throw ConfigError(name, "expected an array of strings");
          std::vector<std::string> out;
          for (const auto& e : *a) {
            if (!e.is_string()) throw ConfigError(name, "expected an array of strings");
            out.push_back(e.as_string()->get());
          }
          *dst = std::move(out);
        }
      },
      f.slot);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

// Command-line values are TOML literals, except that strings may be bare and
// string lists may be comma separated.
void assign_text(const Field& f, const std::string& text) {
  const std::string t = trim(text);
  if (std::holds_alternative<std::string*>(f.slot)) {
    const bool quoted = t.size() >= 2 && (t.front() == '"' || t.front() == '\'') && t.back() == t.front();
    *std::get<std::string*>(f.slot) = quoted ? t.substr(1, t.size() - 2) : t;
    return;
  }
  if (auto* list = std::get_if<std::vector<std::string>*>(&f.slot); list && (t.empty() || t.front() != '[')) {
    std::vector<std::string> out;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!trim(item).empty()) out.push_back(trim(item));
    }
    **list = std::move(out);
    return;
  }
  toml::table doc;
  try {
    doc = toml::parse("v = " + t);
  } catch (const toml::parse_error&) {
    throw ConfigError(f.name(), "cannot parse value '" + t + "'");
  }
  assign(f, *doc.get("v"));
}

void apply_table(JobConfig& cfg, const toml::table& doc) {
  auto fs = fields(cfg);
  for (const auto& [section, node] : doc) {
    const std::string s(section.str());
    const toml::table* t = node.as_table();
    if (!t) throw ConfigError(s, "unknown key (settings live in [section] tables)");
    for (const auto& [key, v] : *t) {
      const std::string name = s + "." + std::string(key.str());
      Field* f = find_field(fs, name);
      if (!f) throw ConfigError(name, "unknown key");
      assign(*f, v);
    }
  }
}

void apply_override(JobConfig& cfg, const std::string& arg) {
  std::string a = arg;
  if (a.rfind("--", 0) == 0) a = a.substr(2);
  const auto eq = a.find('=');
  if (eq == std::string::npos) throw ConfigError(a, "override needs the form --section.key=value");
  const std::string name = a.substr(0, eq);
  auto fs = fields(cfg);
  Field* f = find_field(fs, name);
  if (!f) throw ConfigError(name, "unknown key");
  assign_text(*f, a.substr(eq + 1));
}

template <typename F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, e.what());
  }
}

}  // namespace

JobConfig parse_config(const std::string& toml_text, const std::vector<std::string>& overrides) {
  JobConfig cfg;
  toml::table doc;
  try {
    doc = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << e.description() << " at line " << e.source().begin.line;
    throw ConfigError("toml", os.str());
  }
  apply_table(cfg, doc);
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

JobConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  if (file.empty()) return parse_config("", overrides);
  std::ifstream in(file);
  if (!in) throw ConfigError("config", "cannot read " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string serialize(const JobConfig& cfg) {
  JobConfig copy = cfg;
  toml::table doc;
  for (const auto& f : fields(copy)) {
    if (!doc.contains(f.section)) doc.insert(f.section, toml::table{});
    toml::table& t = *doc[f.section].as_table();
    std::visit(
        [&](auto* v) {
          using T = std::remove_pointer_t<decltype(v)>;
          if constexpr (std::is_same_v<T, std::vector<std::string>>) {
            toml::array a;
            for (const auto& s : *v) a.push_back(s);
            t.insert(f.key, std::move(a));
          } else {
            t.insert(f.key, *v);
          }
        },
        f.slot);
  }
  std::ostringstream os;
  os << doc << "\n";
  return os.str();
}

train::TrainConfig to_train_config(const JobConfig& c) {
  train::TrainConfig t;
  const auto& p = c.parallelism;
  t.model = c.model;
  wrap("model", [&] { t.model.validate(); });
  if (c.job.world_size < 1) throw ConfigError("job.world_size", "must be >= 1");
  t.part.dims = wrap("parallelism", [&] {
    return par::resolve_dims(c.job.world_size, p.data_parallel_shard_degree, p.data_parallel_replicate_degree,
                             p.tensor_parallel_degree, p.pipeline_parallel_degree, p.context_parallel_degree);
  });
  t.part.dp.shard_degree = t.part.dims.dp_shard;
  t.part.dp.replicate_degree = t.part.dims.dp_replicate;
  t.part.dp.param_dtype =
      wrap("training.mixed_precision_param", [&] { return dtype_from_name(c.training.mixed_precision_param); });
  t.part.dp.reduce_dtype =
      wrap("training.mixed_precision_reduce", [&] { return dtype_from_name(c.training.mixed_precision_reduce); });
  t.part.loss_parallel = p.enable_loss_parallel;
  // micro-pipelined TP splits each collective into tp-degree chunks
  t.part.tp_chunks = p.enable_async_tensor_parallel ? p.tensor_parallel_degree : 1;
  t.part.ac.mode = wrap("activation_checkpoint.mode", [&] { return par::ac_mode_from_name(c.activation_checkpoint.mode); });
  t.part.ac.selective_ac_type = c.activation_checkpoint.selective_ac_type;
  wrap("activation_checkpoint.selective_ac_type", [&] { t.part.ac.validate(); });
  t.part.float8.enabled = c.float8.enabled;
  t.part.float8.strategy =
      wrap("float8.strategy", [&] { return par::float8_strategy_from_name(c.float8.strategy); });
  t.part.cp_method = wrap("parallelism.context_parallel_rotate_method",
                          [&] { return cp::rotate_method_from_name(p.context_parallel_rotate_method); });
  t.pipeline.degree = t.part.dims.pp;
  t.pipeline.split_points = p.pipeline_parallel_split_points;
  t.pipeline.schedule =
      wrap("parallelism.pipeline_parallel_schedule", [&] { return pp::schedule_from_name(p.pipeline_parallel_schedule); });
  t.pipeline.microbatches = p.pipeline_parallel_microbatches;
  if (p.pipeline_parallel_microbatches < 1) {
    throw ConfigError("parallelism.pipeline_parallel_microbatches", "must be >= 1");
  }
  t.source.kind = wrap("data.task", [&] { return data::task_from_name(c.data.task); });
  t.source.vocab_size = c.model.vocab_size;
  t.source.branching = c.data.branching;
  if (t.source.kind == data::TaskKind::kFile) {
    if (c.data.tokens_file.empty()) throw ConfigError("data.tokens_file", "task 'file' needs a token file");
    t.source = wrap("data.tokens_file", [&] { return data::load_token_file(c.data.tokens_file, c.model.vocab_size); });
  }
  if (c.training.local_batch < 1) throw ConfigError("training.local_batch", "must be >= 1");
  if (c.training.steps < 0) throw ConfigError("training.steps", "must be >= 0");
  if (c.training.seed < 0) throw ConfigError("training.seed", "must be >= 0");
  t.local_batch = c.training.local_batch;
  t.steps = c.training.steps;
  t.sgd = {c.training.lr, c.training.momentum};
  t.seed = static_cast<uint64_t>(c.training.seed);
  t.log_every = 10;
  if (c.checkpoint.interval < 0) throw ConfigError("checkpoint.interval", "must be >= 0");
  t.checkpoint.interval = c.checkpoint.interval;
  t.checkpoint.async = c.checkpoint.async;
  t.checkpoint.dir = c.checkpoint.dir;
  t.checkpoint.resume_from = c.checkpoint.resume_from;
  wrap("parallelism", [&] { t.validate(); });
  return t;
}

}  // namespace titanlab::cli
