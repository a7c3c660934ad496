// SPDX-License-Identifier: Apache-2.0
#include "quantize.hpp"

#include "error.hpp"

namespace qntz::ternary {

double QuantizeReport::total_error_exact() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.error_exact;
  return s;
}

double QuantizeReport::total_error_quantized() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.error_quantized;
  return s;
}

double QuantizeReport::total_energy() const {
  double s = 0.0;
  for (const auto& l : layers) s += l.weight_energy;
  return s;
}

namespace {

double residual(const Tensor& a, const Tensor& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double r = static_cast<double>(a.data[i]) - b.data[i];
    e += r * r;
  }
  return e;
}

bool referenced_elsewhere(const io::ModelGraph& graph, const std::string& tensor, std::size_t skip) {
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    if (i == skip) continue;
    if ((l.weight && *l.weight == tensor) || (l.bias && *l.bias == tensor) || l.mean == tensor ||
        l.var == tensor || l.gamma == tensor || l.beta == tensor) {
      return true;
    }
  }
  return false;
}

}  // namespace

io::Model quantize_model(const io::Model& model, const QuantConfig& config, QuantizeReport* report) {
  config.validate();
  io::validate_graph(model.graph, model.tensors);
  io::Model out = model;
  QuantizeReport rep{config, {}};

  for (std::size_t i = 0; i < out.graph.layers.size(); ++i) {
    auto& l = out.graph.layers[i];
    if (!is_compute(l.kind)) continue;
    if (l.weight_bits != 32) {
      fail(ErrorCode::unsupported, "layer '" + l.name + "' is already quantized");
    }
    const std::string source = *l.weight;
    auto w = io::to_tensor(out.get(source));
    const std::string codes_name = l.name + ".codes";
    const std::string scales_name = l.name + ".scales";

    LayerQuantReport lr;
    lr.name = l.name;
    lr.kind = io::layer_kind_name(l.kind);
    const bool int8 = l.first_conv || (l.kind == io::LayerKind::fc && config.fc_int8);
    if (int8) {
      auto q = quantize_weights_int8(w);
      auto deq = q.dequantized();
      out.put(io::make_i8(codes_name, w.shape, q.mantissas));
      l.weight_bits = 8;
      l.weight_exponent = q.exponent;
      l.scales.reset();
      l.cluster_size = 0;
      lr.weight_bits = 8;
      lr.clusters = 1;
      lr.scale_exponent = q.exponent;
      lr.error_exact = lr.error_quantized = residual(w, deq);
      for (float v : w.data) lr.weight_energy += static_cast<double>(v) * v;
    } else {
      auto q = quantize_layer(w, config);
      auto codes = q.codes();
      out.put(config.weight_bits == 2 ? io::make_ternary(codes_name, w.shape, codes)
                                      : io::make_i8(codes_name, w.shape, codes));
      out.put(io::make_i8(scales_name, {q.cluster_count()}, q.scale_mantissas()));
      l.weight_bits = config.weight_bits;
      l.weight_exponent = q.scale_exponent;
      l.scales = scales_name;
      l.cluster_size = config.cluster_size;
      lr.weight_bits = config.weight_bits;
      lr.cluster_size = config.cluster_size;
      lr.clusters = q.cluster_count();
      lr.scale_exponent = q.scale_exponent;
      lr.error_exact = q.error_exact;
      lr.error_quantized = q.error_quantized;
      lr.weight_energy = q.weight_energy;
    }
    l.weight = codes_name;
    if (source != codes_name && !referenced_elsewhere(out.graph, source, i)) out.erase(source);
    rep.layers.push_back(std::move(lr));
  }
  io::validate_graph(out.graph, out.tensors);
  if (report) *report = std::move(rep);
  return out;
}

}  // namespace qntz::ternary
