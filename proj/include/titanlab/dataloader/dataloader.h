// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "titanlab/model/model.h"

namespace titanlab::data {

enum class TaskKind { kBigram, kUniform, kFile };

TaskKind task_from_name(const std::string& name);
const char* task_name(TaskKind kind);

// Everything needed to regenerate the stream from any point.
struct LoaderState {
  uint64_t seed = 0;
  int64_t cursor = 0;  // batches consumed so far
  int64_t dp_rank = 0;
  int64_t dp_degree = 1;
  int64_t local_batch = 1;
  int64_t seq_len = 1;

  bool operator==(const LoaderState&) const = default;
};

struct TokenSource {
  TaskKind kind = TaskKind::kBigram;
  int64_t vocab_size = 2;
  int64_t branching = 4;       // bigram successors per token
  std::vector<int64_t> corpus;  // kFile only
};

// Reads one token id per line; blank lines are skipped.
TokenSource load_token_file(const std::filesystem::path& path, int64_t vocab_size);

// Row `row` of the global batch at `cursor`; seq_len+1 tokens. Rows are keyed
// by their global index, so the global batch is the same for every DP layout.
std::vector<int64_t> sample_row(const TokenSource& src, uint64_t seed, int64_t cursor, int64_t row,
                                int64_t seq_len, int64_t global_batch);

// Returns this rank's [local_batch, seq_len] inputs and shifted labels and
// advances the cursor by one.
model::Batch next_batch(LoaderState& state, const TokenSource& src);

// The full global batch at a cursor (what all DP ranks see together).
model::Batch global_batch(const TokenSource& src, uint64_t seed, int64_t cursor, int64_t global_rows,
                          int64_t seq_len);

}  // namespace titanlab::data
