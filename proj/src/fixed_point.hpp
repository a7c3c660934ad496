// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "tensor.hpp"

// 8-bit dynamic fixed point: value = mantissa * 2^exponent, one exponent per
// tensor. Rounding is fixed per operation:
//   quantize_*     round half to even, saturate to [-128, 127]
//   requantize_*   round half away from zero on right shifts, saturate
namespace qntz::fxp {

constexpr int kDefaultExponent = -7;
constexpr int kMantissaMax = 127;
constexpr int kMantissaMin = -128;

struct FixedPointFormat {
  int exponent = kDefaultExponent;

  double step() const;
  double max_value() const { return kMantissaMax * step(); }
  double min_value() const { return kMantissaMin * step(); }
  bool operator==(const FixedPointFormat&) const = default;
};

/// Smallest e such that max_abs <= limit * 2^e; kDefaultExponent when max_abs is 0.
int exponent_for_max_abs(double max_abs, int limit = kMantissaMax);

/// Running max-abs over calibration batches. Merge is max, so any batch order
/// or split yields the same result.
struct CalibrationStats {
  double max_abs = 0.0;
  std::size_t sample_count = 0;

  void observe(std::span<const float> values, std::size_t samples = 1);
  void merge(const CalibrationStats& other);
  FixedPointFormat format() const { return {exponent_for_max_abs(max_abs)}; }
};

double round_half_even(double v);

std::int8_t quantize_value(double x, int exponent);
QTensor quantize_tensor(const Tensor& x, FixedPointFormat fmt);
Tensor dequantize(const QTensor& q);
double dequantize_value(std::int64_t mantissa, int exponent);

/// saturate(round_shift(product, shift)); shift > 0 multiplies by 2^shift.
std::int8_t requantize_product(std::int64_t product, int shift);

/// acc * scale_mantissa requantized with combined shift e_in + e_scale - e_out.
std::int8_t requantize(std::int32_t acc, std::int32_t scale_mantissa, int shift);

/// Unsigned 8-bit mantissa in [0, 127] for a non-negative scale on a shared
/// exponent (round half to even, clamp).
std::uint8_t quantize_scale(double alpha, int exponent);

/// Layer exponent for scales: max alpha lands in [64, 127] without saturating.
inline int scale_exponent_for(double max_alpha) { return exponent_for_max_abs(max_alpha); }

}  // namespace qntz::fxp
