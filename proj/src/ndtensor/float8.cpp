// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#include "titanlab/ndtensor/float8.h"

#include <cmath>
#include <limits>

namespace titanlab::fp8 {

bool is_nan_e4m3(uint8_t bits) { return (bits & 0x7F) == 0x7F; }

double decode_e4m3(uint8_t bits) {
  if (is_nan_e4m3(bits)) return std::numeric_limits<double>::quiet_NaN();
  const double sign = (bits & 0x80) ? -1.0 : 1.0;
  const int exponent = (bits >> kMantissaBits) & 0x0F;
  const int mantissa = bits & 0x07;
  if (exponent == 0) {
    return sign * std::ldexp(static_cast<double>(mantissa), 1 - kExponentBias - kMantissaBits);
  }
  return sign * std::ldexp(static_cast<double>(8 + mantissa), exponent - kExponentBias - kMantissaBits);
}

double e4m3_max() {
  static const double kMax = [] {
    double best = 0.0;
    for (int b = 0; b < 256; ++b) {
      const double v = decode_e4m3(static_cast<uint8_t>(b));
      if (std::isfinite(v) && v > best) best = v;
    }
    return best;
  }();
  return kMax;
}

uint8_t encode_e4m3(double value) {
  if (std::isnan(value)) return 0x7F;
  const uint8_t sign = std::signbit(value) ? 0x80 : 0x00;
  double mag = std::abs(value);
  const double max = e4m3_max();
  if (mag >= max) return static_cast<uint8_t>(sign | 0x7E);

  // Spacing of representable values in the binade containing `mag`.
  constexpr int kMinNormalExp = 1 - kExponentBias;
  int exp = kMinNormalExp;
  if (mag >= std::ldexp(1.0, kMinNormalExp)) {
    exp = std::ilogb(mag);
  }
  const double ulp = std::ldexp(1.0, exp - kMantissaBits);
  // nearbyint under the default rounding mode rounds half to even.
  const double steps = std::nearbyint(mag / ulp);
  double rounded = steps * ulp;
  if (rounded > max) rounded = max;

  if (rounded == 0.0) return sign;
  int e = std::ilogb(rounded);
  if (e < kMinNormalExp) {
    const int mantissa = static_cast<int>(rounded / std::ldexp(1.0, kMinNormalExp - kMantissaBits));
    return static_cast<uint8_t>(sign | mantissa);
  }
  const int biased = e + kExponentBias;
  const int mantissa = static_cast<int>(rounded / std::ldexp(1.0, e - kMantissaBits)) - 8;
  return static_cast<uint8_t>(sign | (biased << kMantissaBits) | mantissa);
}

}  // namespace titanlab::fp8
