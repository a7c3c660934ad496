// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "model_io.hpp"
#include "ternarizer.hpp"

namespace qntz::ternary {

struct LayerQuantReport {
  std::string name;
  std::string kind;
  int weight_bits = 0;
  std::size_t cluster_size = 0;  // 0 for per-tensor 8-bit layers
  std::size_t clusters = 0;
  int scale_exponent = 0;
  double error_exact = 0.0;
  double error_quantized = 0.0;
  double weight_energy = 0.0;
};

struct QuantizeReport {
  QuantConfig config;
  std::vector<LayerQuantReport> layers;

  double total_error_exact() const;
  double total_error_quantized() const;
  double total_energy() const;
};

/// Replaces every float conv/fc weight with its quantized form:
///   first conv       8-bit per-tensor   (<layer>.codes i8, wexp)
///   fc with fc_int8  8-bit per-tensor
///   everything else  config.weight_bits with clusters of config.cluster_size
///                    (<layer>.codes, <layer>.scales, wexp, cluster)
/// Biases, batch-norm parameters and activation formats are untouched.
io::Model quantize_model(const io::Model& model, const QuantConfig& config,
                         QuantizeReport* report = nullptr);

}  // namespace qntz::ternary
