// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace titanlab::fp8 {

// e4m3 "fn" variant: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits,
// no infinities, S.1111.111 is NaN.
inline constexpr int kExponentBias = 7;
inline constexpr int kMantissaBits = 3;

// Decodes a bit pattern. NaN patterns decode to a quiet NaN.
double decode_e4m3(uint8_t bits);
bool is_nan_e4m3(uint8_t bits);

// Round-to-nearest-even encoding with saturation to the largest finite value.
uint8_t encode_e4m3(double value);

// Largest finite e4m3 magnitude, found by enumerating all bit patterns.
double e4m3_max();

inline double quantize_e4m3(double value) { return decode_e4m3(encode_e4m3(value)); }

}  // namespace titanlab::fp8
