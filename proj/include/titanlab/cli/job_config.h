// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "titanlab/model/model.h"
#include "titanlab/train/trainer.h"

namespace titanlab::cli {

// A bad or inconsistent configuration; `key` names the offending setting.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct JobConfig {
  struct Job {
    int64_t world_size = 1;
    std::string dump_folder = "./outputs";
  } job;
  model::ModelConfig model;
  struct Training {
    int64_t steps = 10;
    double lr = 0.05;
    double momentum = 0.9;
    int64_t seed = 0;
    int64_t local_batch = 1;
    std::string mixed_precision_param = "float64";
    std::string mixed_precision_reduce = "float64";
  } training;
  struct Data {
    std::string task = "bigram";
    int64_t branching = 4;
    std::string tokens_file;  // task "file": one token id per line
  } data;
  struct Parallelism {
    int64_t data_parallel_shard_degree = -1;
    int64_t data_parallel_replicate_degree = 1;
    int64_t tensor_parallel_degree = 1;
    bool enable_loss_parallel = false;
    bool enable_async_tensor_parallel = false;
    int64_t context_parallel_degree = 1;
    std::string context_parallel_rotate_method = "allgather";
    int64_t pipeline_parallel_degree = 1;
    std::vector<std::string> pipeline_parallel_split_points;
    std::string pipeline_parallel_schedule = "1f1b";
    int64_t pipeline_parallel_microbatches = 1;
  } parallelism;
  struct ActivationCheckpoint {
    std::string mode = "none";
    std::string selective_ac_type = "2";
  } activation_checkpoint;
  struct Float8 {
    bool enabled = false;
    std::string strategy = "dynamic";
  } float8;
  struct Checkpoint {
    int64_t interval = 0;
    bool async = false;
    std::string dir = "./outputs/checkpoint";
    std::string resume_from;
  } checkpoint;
  struct Metrics {
    std::string path;  // JSON lines; empty: standard output
  } metrics;
};

// Applies `toml_text`, then the overrides ("--section.key=value"), over the defaults.
JobConfig parse_config(const std::string& toml_text, const std::vector<std::string>& overrides = {});
// An empty path means defaults plus overrides.
JobConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});
// Every key, as TOML that parse_config reads back to the same config.
std::string serialize(const JobConfig& cfg);

// Resolves and validates the job into the trainer's configuration.
train::TrainConfig to_train_config(const JobConfig& cfg);

}  // namespace titanlab::cli
