// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>

#include "titanlab/simruntime/recorder.h"

namespace titanlab::sim {

// Per-rank byte and memory accounting. Collective bytes follow a ring model:
// all_gather and reduce_scatter move (W-1)/W of the full payload per rank,
// all_reduce twice that.
struct CostLedger {
  int64_t bytes_sent = 0;
  int64_t bytes_received = 0;
  std::map<CollectiveKind, int64_t> collective_counts;
  std::map<CollectiveKind, int64_t> bytes_by_kind;
  // Bytes of collectives issued while overlappable (chunked TP interiors).
  int64_t overlappable_bytes = 0;
  int64_t chunked_collective_bytes = 0;

  int64_t activation_bytes = 0;
  int64_t activation_bytes_peak = 0;
  int64_t parameter_bytes_resident = 0;
  int64_t parameter_bytes_peak = 0;
  // Unsharded copies gathered for compute, on top of the resident shards.
  int64_t transient_parameter_bytes = 0;
  int64_t transient_parameter_bytes_peak = 0;
  // Largest set of interior activations rebuilt at once by checkpoint recompute.
  int64_t recompute_bytes_peak = 0;
  int64_t gradient_bytes_resident = 0;
  int64_t optimizer_bytes_resident = 0;
  int64_t max_logit_bytes = 0;

  void add_activation(int64_t bytes) {
    activation_bytes += bytes;
    activation_bytes_peak = std::max(activation_bytes_peak, activation_bytes);
  }
  void release_activation(int64_t bytes) { activation_bytes -= bytes; }
  void add_parameters(int64_t bytes) {
    parameter_bytes_resident += bytes;
    parameter_bytes_peak = std::max(parameter_bytes_peak, parameter_bytes_resident);
  }
  void release_parameters(int64_t bytes) { parameter_bytes_resident -= bytes; }
  void add_transient_parameters(int64_t bytes) {
    transient_parameter_bytes += bytes;
    transient_parameter_bytes_peak = std::max(transient_parameter_bytes_peak, transient_parameter_bytes);
  }
  void release_transient_parameters(int64_t bytes) { transient_parameter_bytes -= bytes; }
  void note_recompute(int64_t bytes) { recompute_bytes_peak = std::max(recompute_bytes_peak, bytes); }
  void reset_activation_peak() { activation_bytes_peak = activation_bytes; }
};

}  // namespace titanlab::sim
