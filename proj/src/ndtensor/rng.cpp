// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/ndtensor/rng.h"

#include <cmath>
#include <numbers>

namespace titanlab {

uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t hash_name(std::string_view name) {
  // FNV-1a; stable across platforms unlike std::hash.
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

uint64_t counter_bits(uint64_t seed, uint64_t stream, uint64_t counter, uint64_t lane) {
  uint64_t h = mix64(seed);
  h = mix64(h ^ stream);
  h = mix64(h ^ counter);
  return mix64(h ^ (lane * 0xD6E8FEB86659FD93ULL));
}

double counter_uniform(uint64_t seed, uint64_t stream, uint64_t counter, uint64_t lane) {
  const uint64_t bits = counter_bits(seed, stream, counter, lane) >> 11;  // 53 bits
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

InitKind init_kind_for(std::string_view name, const Shape& global_shape) {
  if (global_shape.size() == 1 && name.ends_with("norm.weight")) return InitKind::kOnes;
  if (name.ends_with(".bias")) return InitKind::kZeros;
  return InitKind::kTruncNormal;
}

double init_element(std::string_view name, InitKind kind, uint64_t seed, uint64_t flat_index) {
  switch (kind) {
    case InitKind::kOnes: return 1.0;
    case InitKind::kZeros: return 0.0;
    case InitKind::kTruncNormal: break;
  }
  const uint64_t stream = hash_name(name);
  // Box-Muller with rejection outside two standard deviations; each attempt
  // uses its own lane so the draw stays a pure function of (seed, name, index).
  for (uint64_t attempt = 0;; ++attempt) {
    const double u1 = counter_uniform(seed, stream, flat_index, 2 * attempt);
    const double u2 = counter_uniform(seed, stream, flat_index, 2 * attempt + 1);
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    if (std::abs(z) <= 2.0) return kInitStd * z;
  }
}

Tensor init_param(std::string_view name, const Shape& global_shape, uint64_t master_seed) {
  return init_param_slice(name, global_shape, Shape(global_shape.size(), 0), global_shape,
                          master_seed);
}

Tensor init_param_slice(std::string_view name, const Shape& global_shape, const Shape& offsets,
                        const Shape& lengths, uint64_t master_seed) {
  if (name.empty()) throw std::invalid_argument("init_param: empty parameter name");
  const size_t r = global_shape.size();
  if (offsets.size() != r || lengths.size() != r) throw ShapeError("init_param_slice: rank mismatch");
  for (size_t d = 0; d < r; ++d) {
    if (offsets[d] < 0 || lengths[d] < 0 || offsets[d] + lengths[d] > global_shape[d]) {
      throw ShapeError("init_param_slice: slice outside " + shape_str(global_shape));
    }
  }
  const InitKind kind = init_kind_for(name, global_shape);
  Tensor out(lengths);
  const int64_t n = out.numel();
  std::vector<int64_t> idx(r, 0);
  for (int64_t i = 0; i < n; ++i) {
    uint64_t flat = 0;
    for (size_t d = 0; d < r; ++d) {
      flat = flat * static_cast<uint64_t>(global_shape[d]) + static_cast<uint64_t>(offsets[d] + idx[d]);
    }
    out[i] = init_element(name, kind, master_seed, flat);
    for (size_t d = r; d-- > 0;) {
      if (++idx[d] < lengths[d]) break;
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace titanlab
