// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace qntz::engine {

/// Per-layer work tally. Every conv/fc MAC of the float baseline shows up as
/// exactly one accumulation (ternary or 8-bit); `overhead` counts the
/// requantization and batch-norm affine steps that sit outside that ratio.
struct OpCounters {
  std::uint64_t mults_8bit = 0;
  std::uint64_t accs_ternary = 0;
  std::uint64_t accs_8bit = 0;
  std::uint64_t overhead = 0;

  OpCounters& operator+=(const OpCounters& o) {
    mults_8bit += o.mults_8bit;
    accs_ternary += o.accs_ternary;
    accs_8bit += o.accs_8bit;
    overhead += o.overhead;
    return *this;
  }
  bool operator==(const OpCounters&) const = default;
};

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 0, in_h = 0, in_w = 0;
  std::size_t out_channels = 0, kernel = 1, stride = 1, padding = 0;
  std::size_t out_h = 0, out_w = 0;

  std::size_t taps() const { return in_channels * kernel * kernel; }
};

/// Validates NCHW input against [d, c, K, K] weights and derives the output size.
ConvGeometry conv_geometry(const Shape& input, const Shape& weights, std::size_t stride,
                           std::size_t padding);

/// Reference cross-correlation. Accumulates in double in (c, ky, kx) order.
/// With `requant_exponent`, each double result is snapped to that 8-bit
/// format (round half away from zero, saturate) before it is stored.
Tensor conv_float(const Tensor& input, const Tensor& weights, std::span<const double> bias,
                  std::size_t stride, std::size_t padding, std::size_t threads = 1,
                  std::optional<int> requant_exponent = std::nullopt);

/// Ternary weights with a per-filter 8-bit scale on a shared exponent.
/// `group_size` input channels (N) share one scale multiply; `bias` is in the
/// accumulator domain 2^(e_in + scale_exponent).
struct TernaryConvWeights {
  Shape shape;  // d, c, K, K
  std::vector<std::int8_t> codes;
  std::vector<std::int32_t> scale_mantissa;  // per filter
  int scale_exponent = 0;
  std::size_t group_size = 1;
  std::vector<std::int64_t> bias;
};

QTensor conv_ternary_int(const QTensor& input, const TernaryConvWeights& weights,
                         std::size_t stride, std::size_t padding, int out_exponent,
                         OpCounters* counters = nullptr, std::size_t threads = 1);

/// i8 weights (also used for 4-bit codes) with a per-filter scale mantissa
/// (1 for plain 8-bit weights) and the same bias convention.
struct Int8ConvWeights {
  Shape shape;
  std::vector<std::int8_t> weights;
  std::vector<std::int32_t> scale_mantissa;
  int exponent = 0;
  std::vector<std::int64_t> bias;
};

QTensor conv_int8w(const QTensor& input, const Int8ConvWeights& weights, std::size_t stride,
                   std::size_t padding, int out_exponent, OpCounters* counters = nullptr,
                   std::size_t threads = 1);

/// y = a[c] * x + b[c] per channel on [B, C, ...].
Tensor affine_float(const Tensor& input, std::span<const double> a, std::span<const double> b,
                    std::optional<int> requant_exponent = std::nullopt);

/// Integer per-channel affine: requantize(x * a_m[c] + b_q[c], shift[c]) with
/// shift[c] = e_in + a_exponent[c] - e_out. b_q[c] lives on 2^(e_in + a_exponent[c]).
QTensor affine_int(const QTensor& input, std::span<const std::int32_t> a_mantissa,
                   std::span<const std::int64_t> b_product, std::span<const int> a_exponent,
                   int out_exponent,
                   OpCounters* counters = nullptr);

Tensor relu_float(const Tensor& input);
QTensor relu_int(const QTensor& input);

struct PoolSpec {
  std::size_t kernel = 2, stride = 2, padding = 0;
  bool global = false;
};

/// Max pooling ignores padding; average pooling divides by the full window
/// (padding counts as zero). Integer averages round half away from zero.
Tensor maxpool_float(const Tensor& input, const PoolSpec& spec);
QTensor maxpool_int(const QTensor& input, const PoolSpec& spec);
Tensor avgpool_float(const Tensor& input, const PoolSpec& spec,
                     std::optional<int> requant_exponent = std::nullopt);
QTensor avgpool_int(const QTensor& input, const PoolSpec& spec);

/// Snap a double to an 8-bit grid the way requantize does.
double snap_to_format(double value, int exponent);

}  // namespace qntz::engine
