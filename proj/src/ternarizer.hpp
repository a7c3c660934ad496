// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "tensor.hpp"

namespace qntz::ternary {

/// Per-filter threshold search result.
///
/// The search visits every support size t = 1..n (tau = t/n), keeping the t
/// largest magnitudes and scaling by their RMS. Support size 0 stands for the
/// degenerate candidate alpha = 0, which is what an all-zero filter returns.
struct ThresholdResult {
  double tau = 0.0;
  std::size_t support = 0;
  double alpha = 0.0;
  double error = 0.0;  // sum_i (w_i - alpha * code_i)^2
  std::vector<std::int8_t> codes;
};

ThresholdResult select_threshold(std::span<const float> weights);

/// Contiguous, equally sized filters stored row-major.
struct FilterBlock {
  std::span<const float> data;
  std::size_t filter_size = 0;

  std::size_t count() const { return filter_size ? data.size() / filter_size : 0; }
  std::span<const float> filter(std::size_t i) const {
    return data.subspan(i * filter_size, filter_size);
  }
};

struct TernaryCluster {
  std::size_t first_filter = 0;
  std::size_t count = 0;
  std::size_t filter_size = 0;
  std::vector<std::int8_t> codes;  // count x filter_size, each in {-1, 0, +1}
  double alpha_exact = 0.0;        // scale chosen by the cluster search
  std::uint8_t alpha_mantissa = 0; // 8-bit re-quantized scale
  int alpha_exponent = 0;          // shared across the layer
  std::size_t t_star = 0;          // winning number of top per-filter scales
  double error = 0.0;              // residual with alpha_exact

  double alpha_quantized() const;
  std::vector<std::size_t> filter_indices() const;
};

/// Sum over the block of (w - alpha * code)^2 where code = sign(w) for
/// |w| >= alpha and 0 otherwise. Fills `codes` when given.
double threshold_error(const FilterBlock& filters, double alpha,
                       std::vector<std::int8_t>* codes = nullptr);

/// Hierarchical ternarization of one cluster: per-filter threshold search,
/// then a search over the RMS of the top-t per-filter scales. The result's
/// scale is re-quantized on `scale_exponent`, or on the exponent implied by
/// alpha_exact itself when none is given.
TernaryCluster ternarize_cluster(const FilterBlock& filters,
                                 std::optional<int> scale_exponent = std::nullopt);
TernaryCluster ternarize_cluster(std::span<const std::vector<float>> filters,
                                 std::optional<int> scale_exponent = std::nullopt);

struct QuantConfig {
  static constexpr int kFirstLayerBits = 8;
  static constexpr int kScaleBits = 8;

  std::size_t cluster_size = 4;
  int weight_bits = 2;    // 2 (ternary) or 4
  bool fc_int8 = false;   // keep fc weights at 8 bits instead of weight_bits
  std::size_t threads = 1;

  void validate() const;
};

/// Symmetric 4-bit cluster: codes in [-7, 7], scale = max|w| / 7.
struct Int4Cluster {
  std::size_t first_filter = 0;
  std::size_t count = 0;
  std::size_t filter_size = 0;
  std::vector<std::int8_t> codes;
  double scale_exact = 0.0;
  std::uint8_t scale_mantissa = 0;
  int scale_exponent = 0;
  double error = 0.0;  // residual with scale_exact

  double scale_quantized() const;
  std::vector<std::size_t> filter_indices() const;
};

Int4Cluster quantize_cluster_int4(const FilterBlock& filters, std::size_t first_filter = 0);

struct LayerQuantization {
  int weight_bits = 2;
  std::size_t cluster_size = 0;
  Shape shape;
  int scale_exponent = 0;
  std::vector<TernaryCluster> ternary;
  std::vector<Int4Cluster> int4;
  double error_exact = 0.0;      // with unrounded scales
  double error_quantized = 0.0;  // with the 8-bit scales that ship
  double weight_energy = 0.0;    // sum w^2

  std::size_t cluster_count() const;
  /// Row-major codes for the whole layer, shape == `shape`.
  std::vector<std::int8_t> codes() const;
  std::vector<std::int8_t> scale_mantissas() const;
  /// Scale mantissa for every filter (expanded from its cluster).
  std::vector<std::int32_t> filter_scale_mantissas() const;
  /// scale_q * code, elementwise.
  Tensor dequantized() const;
};

/// Static output-channel clustering: cluster j holds filters [jN, (j+1)N),
/// the last one possibly smaller. One scale exponent per layer.
LayerQuantization quantize_layer(const Tensor& weights, const QuantConfig& config);
LayerQuantization quantize_layer_int4(const Tensor& weights, const QuantConfig& config);

struct Int8Weights {
  Shape shape;
  std::vector<std::int8_t> mantissas;
  int exponent = 0;

  Tensor dequantized() const;
};

/// Per-tensor power-of-two 8-bit weights (first conv, optionally fc).
Int8Weights quantize_weights_int8(const Tensor& weights);

/// RMS of values already in descending order; exact when all values are equal.
double rms_desc(std::span<const double> values);

}  // namespace qntz::ternary
