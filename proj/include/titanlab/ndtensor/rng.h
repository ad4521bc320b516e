// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

#include "titanlab/ndtensor/tensor.h"

namespace titanlab {

// Stateless counter-based generator: every draw is a pure function of its key,
// so any shard of a tensor can be produced without generating the rest.
uint64_t mix64(uint64_t x);
uint64_t hash_name(std::string_view name);
uint64_t counter_bits(uint64_t seed, uint64_t stream, uint64_t counter, uint64_t lane = 0);
// Uniform in the open interval (0, 1).
double counter_uniform(uint64_t seed, uint64_t stream, uint64_t counter, uint64_t lane = 0);

enum class InitKind { kTruncNormal, kOnes, kZeros };

inline constexpr double kInitStd = 0.02;

// Convention: 1-D parameters whose name ends in "norm.weight" are ones,
// everything else truncated normal (std 0.02, cut at two standard deviations).
InitKind init_kind_for(std::string_view name, const Shape& global_shape);

double init_element(std::string_view name, InitKind kind, uint64_t seed, uint64_t flat_index);

Tensor init_param(std::string_view name, const Shape& global_shape, uint64_t master_seed);

// The hyperrectangle [offsets, offsets + lengths) of init_param(name, global_shape, seed).
Tensor init_param_slice(std::string_view name, const Shape& global_shape, const Shape& offsets,
                        const Shape& lengths, uint64_t master_seed);

}  // namespace titanlab
