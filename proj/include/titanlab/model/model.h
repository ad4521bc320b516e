// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "titanlab/dtensor/dtensor.h"
#include "titanlab/ndtensor/ops.h"
#include "titanlab/ndtensor/tensor.h"
#include "titanlab/simruntime/runtime.h"

namespace titanlab::model {

struct ModelConfig {
  int64_t dim = 64;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t vocab_size = 256;
  int64_t seq_len = 128;
  int64_t ffn_hidden = 0;  // 0: derived from dim
  double norm_eps = 1e-5;
  double rope_theta = 10000.0;

  int64_t head_dim() const { return dim / n_heads; }
  // SwiGLU convention: 2/3 of 4*dim, rounded up to a multiple of 16.
  int64_t ffn_dim() const;
  void validate() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ParamSpec {
  std::string fqn;
  Shape shape;
  DType dtype = DType::kF64;
  // -1 for the embedding, n_layers for the final norm and output head.
  int64_t layer = 0;
};

// Shape-only model description; building it allocates no parameter storage.
class MetaModel {
 public:
  MetaModel() = default;
  MetaModel(ModelConfig cfg, std::vector<ParamSpec> params);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamSpec>& params() const { return params_; }
  // Accepts the module FQN ("layers.0.attention.wq") or the parameter FQN.
  const ParamSpec& find(const std::string& fqn) const;
  bool contains(const std::string& fqn) const;
  std::vector<std::string> fqns() const;
  int64_t numel() const;
  // Rotary buffer, sequence on dim 0.
  Shape freqs_cis_shape() const;

 private:
  ModelConfig cfg_;
  std::vector<ParamSpec> params_;
};

MetaModel build_meta_model(const ModelConfig& cfg, DType dtype = DType::kF64);

std::vector<std::string> block_param_fqns(int64_t layer);

using ParamMap = std::map<std::string, Tensor>;

// Dense materialization of every parameter.
ParamMap init_dense(const MetaModel& meta, uint64_t seed);

// Each rank builds only its local shard, from the counter-based generator.
std::map<std::string, dt::DTensor> init_weights(sim::RankContext& ctx, const MetaModel& meta,
                                                const sim::DeviceMesh& mesh,
                                                const std::map<std::string, dt::Placements>& placements,
                                                uint64_t seed);

struct Batch {
  int64_t batch = 0;
  int64_t seq = 0;
  std::vector<int64_t> input_ids;  // [batch, seq] row-major
  std::vector<int64_t> labels;

  Batch slice_rows(int64_t start, int64_t rows) const;
};

// The loss shared by the dense path and every parallel layout: mean token
// cross-entropy over flattened [tokens, vocab] logits.
ops::CrossEntropyOut loss_fn(const Tensor& logits, std::span<const int64_t> labels);

struct StepResult {
  double loss = 0.0;               // mean over microbatch losses
  std::vector<double> mb_losses;
  ParamMap grads;
};

Tensor forward_logits(const MetaModel& meta, const ParamMap& params, const Batch& batch);

// Single-rank reference step. With microbatches > 1 the batch is split along
// rows and gradients accumulate with a 1/m scale.
StepResult forward_backward_step(const MetaModel& meta, const ParamMap& params, const Batch& batch,
                                 int64_t microbatches = 1);

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.0;
};

// Plain SGD with optional momentum (buf = momentum*buf + g; p -= lr*buf).
// Works on any tensor keyed by name, so it serves dense and sharded params.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}
  void step(const std::string& name, Tensor& param, const Tensor& grad);
  void step(ParamMap& params, const ParamMap& grads);
  const SgdConfig& config() const { return cfg_; }
  std::map<std::string, Tensor>& state() { return momentum_; }
  const std::map<std::string, Tensor>& state() const { return momentum_; }

 private:
  SgdConfig cfg_;
  std::map<std::string, Tensor> momentum_;
};

// ---- layout helpers shared with the parallel executor ----------------------

// [B, S, H*hd] -> [H, S, hd] for batch row b.
Tensor to_heads(const Tensor& x, int64_t b, int64_t heads);
// Writes [H, S, hd] into batch row b of dst [B, S, H*hd].
void from_heads(Tensor& dst, int64_t b, const Tensor& h);
// Rotary table rows for the given absolute positions.
Tensor freqs_at(const Tensor& freqs, std::span<const int64_t> positions);

}  // namespace titanlab::model
