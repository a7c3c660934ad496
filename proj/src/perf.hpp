// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "model_io.hpp"
#include "ternarizer.hpp"

namespace qntz::perf {

struct LayerCount {
  std::string name;
  std::string kind;
  int weight_bits = 32;
  std::size_t cluster_size = 0;
  std::uint64_t macs = 0;          // float baseline multiply-accumulates
  std::uint64_t mults_8bit = 0;
  std::uint64_t accs_ternary = 0;
  std::uint64_t accs_8bit = 0;
  std::uint64_t overhead = 0;      // requantization and batch-norm steps

  /// 1 - mults/macs for conv/fc, 0 otherwise.
  double replaced() const;
};

struct OpCountReport {
  std::vector<LayerCount> layers;
  std::size_t batch = 1;

  LayerCount total() const;
  /// Share of baseline multiplies that became plain accumulations, weighted
  /// by MAC count over conv and fc layers.
  double replaced_ratio() const;
};

/// Counts one layer for `batch` samples. Layers that are already quantized
/// are counted with their stored bits and cluster size; float layers with
/// the configuration (first conv and, with fc_int8, fc at 8 bits).
/// Non-compute layers report zeros apart from batch-norm overhead.
LayerCount count_layer(const io::LayerSpec& layer, const Shape& input_shape,
                       const Shape& output_shape, const ternary::QuantConfig& config,
                       std::size_t batch = 1);

OpCountReport count_graph(const io::ModelGraph& graph, const ternary::QuantConfig& config,
                          std::size_t batch = 1);

std::string format_table(const OpCountReport& report);
std::string format_csv(const OpCountReport& report);

}  // namespace qntz::perf
