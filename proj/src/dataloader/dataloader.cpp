// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/dataloader/dataloader.h"

#include <fstream>

#include "titanlab/ndtensor/rng.h"

namespace titanlab::data {

namespace {

constexpr uint64_t kStartStream = 0x5354415254ULL;
constexpr uint64_t kStepStream = 0x53544550ULL;
constexpr uint64_t kTableStream = 0x5441424cULL;

uint64_t draw(uint64_t seed, uint64_t stream, uint64_t counter, uint64_t lane, uint64_t n) {
  return counter_bits(seed, stream, counter, lane) % n;
}

}  // namespace

TaskKind task_from_name(const std::string& name) {
  if (name == "bigram") return TaskKind::kBigram;
  if (name == "uniform") return TaskKind::kUniform;
  if (name == "file") return TaskKind::kFile;
  throw std::invalid_argument("unknown data task '" + name + "' (expected bigram, uniform or file)");
}

const char* task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kBigram: return "bigram";
    case TaskKind::kUniform: return "uniform";
    case TaskKind::kFile: return "file";
  }
  return "?";
}

TokenSource load_token_file(const std::filesystem::path& path, int64_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open token file " + path.string());
  TokenSource src;
  src.kind = TaskKind::kFile;
  src.vocab_size = vocab_size;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    size_t used = 0;
    int64_t id = -1;
    try {
      id = std::stoll(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || line.find_first_not_of(" \t\r", used) != std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": not a token id");
    }
    if (id < 0 || id >= vocab_size) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": token id " + std::to_string(id) +
                               " outside vocab of " + std::to_string(vocab_size));
    }
    src.corpus.push_back(id);
  }
  if (src.corpus.size() < 2) throw std::runtime_error(path.string() + ": need at least two tokens");
  return src;
}

std::vector<int64_t> sample_row(const TokenSource& src, uint64_t seed, int64_t cursor, int64_t row,
                                int64_t seq_len, int64_t global_batch) {
  const auto v = static_cast<uint64_t>(src.vocab_size);
  std::vector<int64_t> toks(static_cast<size_t>(seq_len + 1));
  if (src.kind == TaskKind::kFile) {
    const auto n = static_cast<int64_t>(src.corpus.size());
    const int64_t span = std::max<int64_t>(1, n - seq_len);
    const int64_t start = ((cursor * global_batch + row) * seq_len) % span;
    for (int64_t i = 0; i <= seq_len; ++i) toks[i] = src.corpus[static_cast<size_t>((start + i) % n)];
    return toks;
  }
  const auto stream = mix64(static_cast<uint64_t>(cursor) ^ kStepStream);
  const auto base = static_cast<uint64_t>(row) * static_cast<uint64_t>(seq_len + 1);
  toks[0] = static_cast<int64_t>(draw(seed, stream ^ kStartStream, base, 0, v));
  for (int64_t i = 1; i <= seq_len; ++i) {
    if (src.kind == TaskKind::kUniform) {
      toks[i] = static_cast<int64_t>(draw(seed, stream, base + i, 0, v));
    } else {
      // successor j of token t is a fixed function of (seed, t, j)
      const auto j = draw(seed, stream, base + i, 0, static_cast<uint64_t>(src.branching));
      toks[i] = static_cast<int64_t>(draw(seed, kTableStream, static_cast<uint64_t>(toks[i - 1]), j, v));
    }
  }
  return toks;
}

model::Batch global_batch(const TokenSource& src, uint64_t seed, int64_t cursor, int64_t global_rows,
                          int64_t seq_len) {
  model::Batch b;
  b.batch = global_rows;
  b.seq = seq_len;
  for (int64_t r = 0; r < global_rows; ++r) {
    auto toks = sample_row(src, seed, cursor, r, seq_len, global_rows);
    b.input_ids.insert(b.input_ids.end(), toks.begin(), toks.end() - 1);
    b.labels.insert(b.labels.end(), toks.begin() + 1, toks.end());
  }
  return b;
}

model::Batch next_batch(LoaderState& state, const TokenSource& src) {
  const int64_t global_rows = state.local_batch * state.dp_degree;
  model::Batch b;
  b.batch = state.local_batch;
  b.seq = state.seq_len;
  for (int64_t r = 0; r < state.local_batch; ++r) {
    auto toks = sample_row(src, state.seed, state.cursor, state.dp_rank * state.local_batch + r, state.seq_len,
                           global_rows);
    b.input_ids.insert(b.input_ids.end(), toks.begin(), toks.end() - 1);
    b.labels.insert(b.labels.end(), toks.begin() + 1, toks.end());
  }
  ++state.cursor;
  return b;
}

}  // namespace titanlab::data
