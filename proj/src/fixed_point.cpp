// SPDX-License-Identifier: Apache-2.0
#include "fixed_point.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include "error.hpp"

namespace qntz::fxp {

double FixedPointFormat::step() const { return std::ldexp(1.0, exponent); }

int exponent_for_max_abs(double max_abs, int limit) {
  if (!std::isfinite(max_abs) || max_abs < 0) {
    fail(ErrorCode::non_finite, "cannot choose a format for max_abs " + std::to_string(max_abs));
  }
  if (max_abs == 0.0) return kDefaultExponent;
  int e = static_cast<int>(std::ceil(std::log2(max_abs / limit)));
  // log2 may be off by one ulp near exact powers of two.
  while (max_abs > std::ldexp(static_cast<double>(limit), e)) ++e;
  while (max_abs <= std::ldexp(static_cast<double>(limit), e - 1)) --e;
  return e;
}

void CalibrationStats::observe(std::span<const float> values, std::size_t samples) {
  for (float v : values) {
    if (!std::isfinite(v)) fail(ErrorCode::non_finite, "non-finite activation during calibration");
    max_abs = std::max(max_abs, static_cast<double>(std::fabs(v)));
  }
  sample_count += samples;
}

void CalibrationStats::merge(const CalibrationStats& other) {
  max_abs = std::max(max_abs, other.max_abs);
  sample_count += other.sample_count;
}

double round_half_even(double v) {
  double fl = std::floor(v);
  double diff = v - fl;
  if (diff > 0.5) return fl + 1.0;
  if (diff < 0.5) return fl;
  return std::fmod(fl, 2.0) == 0.0 ? fl : fl + 1.0;
}

std::int8_t quantize_value(double x, int exponent) {
  if (!std::isfinite(x)) fail(ErrorCode::non_finite, "cannot quantize a non-finite value");
  double m = round_half_even(std::ldexp(x, -exponent));
  return static_cast<std::int8_t>(std::clamp(m, double{kMantissaMin}, double{kMantissaMax}));
}

QTensor quantize_tensor(const Tensor& x, FixedPointFormat fmt) {
  QTensor q{x.shape, std::vector<std::int8_t>(x.size()), fmt.exponent};
  for (std::size_t i = 0; i < x.size(); ++i) q.data[i] = quantize_value(x.data[i], fmt.exponent);
  return q;
}

double dequantize_value(std::int64_t mantissa, int exponent) {
  return std::ldexp(static_cast<double>(mantissa), exponent);
}

Tensor dequantize(const QTensor& q) {
  Tensor t(q.shape);
  for (std::size_t i = 0; i < q.size(); ++i) {
    t.data[i] = static_cast<float>(dequantize_value(q.data[i], q.exponent));
  }
  return t;
}

std::int8_t requantize_product(std::int64_t product, int shift) {
  if (product == 0) return 0;
  const bool negative = product < 0;
  std::uint64_t mag = negative ? std::uint64_t(0) - static_cast<std::uint64_t>(product)
                               : static_cast<std::uint64_t>(product);
  std::uint64_t result;
  if (shift >= 0) {
    // Anything above the i8 range stays saturated after a left shift.
    result = (mag > 128 || shift >= 8) ? 256 : (mag << shift);
  } else {
    int s = -shift;
    if (s >= 64) {
      result = 0;
    } else {
      std::uint64_t half = std::uint64_t{1} << (s - 1);
      result = mag >= std::numeric_limits<std::uint64_t>::max() - half ? (mag >> s) + 1
                                                                      : (mag + half) >> s;
    }
  }
  if (negative) return result >= 128 ? std::int8_t{-128} : static_cast<std::int8_t>(-static_cast<int>(result));
  return result >= 127 ? std::int8_t{127} : static_cast<std::int8_t>(result);
}

std::int8_t requantize(std::int32_t acc, std::int32_t scale_mantissa, int shift) {
  return requantize_product(static_cast<std::int64_t>(acc) * scale_mantissa, shift);
}

std::uint8_t quantize_scale(double alpha, int exponent) {
  if (!std::isfinite(alpha)) fail(ErrorCode::non_finite, "scale is not finite");
  if (alpha < 0) fail(ErrorCode::invalid_argument, "scale must be non-negative");
  double m = round_half_even(std::ldexp(alpha, -exponent));
  return static_cast<std::uint8_t>(std::min(m, double{kMantissaMax}));
}

}  // namespace qntz::fxp
