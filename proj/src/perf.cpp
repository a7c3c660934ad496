// SPDX-License-Identifier: Apache-2.0
#include "perf.hpp"

#include <algorithm>
#include <charconv>
#include <iomanip>
#include <sstream>

namespace qntz::perf {

using io::LayerKind;

double LayerCount::replaced() const {
  if (macs == 0) return 0.0;
  return 1.0 - static_cast<double>(mults_8bit) / static_cast<double>(macs);
}

LayerCount OpCountReport::total() const {
  LayerCount t;
  t.name = "total";
  t.kind = "-";
  for (const auto& l : layers) {
    t.macs += l.macs;
    t.mults_8bit += l.mults_8bit;
    t.accs_ternary += l.accs_ternary;
    t.accs_8bit += l.accs_8bit;
    t.overhead += l.overhead;
  }
  return t;
}

double OpCountReport::replaced_ratio() const { return total().replaced(); }

LayerCount count_layer(const io::LayerSpec& layer, const Shape& input_shape,
                       const Shape& output_shape, const ternary::QuantConfig& config,
                       std::size_t batch) {
  LayerCount c;
  c.name = layer.name;
  c.kind = io::layer_kind_name(layer.kind);
  if (layer.kind == LayerKind::batchnorm) {
    c.overhead = batch * shape_product(output_shape);
    return c;
  }
  if (!is_compute(layer.kind)) return c;

  std::size_t c_in, kk, positions;
  if (layer.kind == LayerKind::conv) {
    c_in = input_shape.at(0);
    kk = layer.kernel * layer.kernel;
    positions = output_shape.at(1) * output_shape.at(2);
  } else {
    c_in = shape_product(input_shape);
    kk = 1;
    positions = 1;
  }
  const std::uint64_t outputs = std::uint64_t{batch} * layer.out_channels * positions;

  if (layer.weight_bits != 32) {
    c.weight_bits = layer.weight_bits;
    c.cluster_size = layer.cluster_size;
  } else if (layer.first_conv || (layer.kind == LayerKind::fc && config.fc_int8)) {
    c.weight_bits = 8;
  } else {
    c.weight_bits = config.weight_bits;
    c.cluster_size = config.cluster_size;
  }

  c.macs = outputs * c_in * kk;
  c.overhead = outputs;
  if (c.weight_bits == 2) {
    // One scale multiply per group of N input channels (N*K^2 accumulations);
    // a ragged last group still costs one multiply.
    std::uint64_t groups = (c_in + c.cluster_size - 1) / c.cluster_size;
    c.mults_8bit = outputs * groups;
    c.accs_ternary = c.macs;
  } else {
    c.mults_8bit = c.macs;
    c.accs_8bit = c.macs;
  }
  return c;
}

OpCountReport count_graph(const io::ModelGraph& graph, const ternary::QuantConfig& config,
                          std::size_t batch) {
  config.validate();
  auto shapes = io::infer_shapes(graph);
  OpCountReport r;
  r.batch = batch;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    r.layers.push_back(count_layer(graph.layers[i], io::layer_input_shape(graph, shapes, i),
                                   shapes[i], config, batch));
  }
  return r;
}

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, digits);
  return std::string(buf, res.ptr);
}

std::vector<std::vector<std::string>> rows(const OpCountReport& report) {
  std::vector<std::vector<std::string>> out;
  auto row = [&](const LayerCount& l, bool total) {
    out.push_back({l.name, l.kind, total ? "-" : std::to_string(l.weight_bits),
                   l.cluster_size ? std::to_string(l.cluster_size) : "-", std::to_string(l.macs),
                   std::to_string(l.mults_8bit), std::to_string(l.accs_ternary),
                   std::to_string(l.accs_8bit), std::to_string(l.overhead),
                   l.macs ? fixed(100.0 * l.replaced(), 2) : "-"});
  };
  for (const auto& l : report.layers) row(l, false);
  row(report.total(), true);
  return out;
}

const std::vector<std::string> kColumns = {"layer", "kind", "bits", "cluster", "macs",
                                           "mults_8bit", "accs_ternary", "accs_8bit", "overhead",
                                           "replaced_pct"};

}  // namespace

std::string format_table(const OpCountReport& report) {
  auto body = rows(report);
  std::vector<std::size_t> width(kColumns.size());
  for (std::size_t c = 0; c < kColumns.size(); ++c) width[c] = kColumns[c].size();
  for (const auto& r : body) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream out;
  out << "# ratio = 1 - mults_8bit / macs, MAC-weighted over conv and fc; batch " << report.batch
      << "\n";
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) out << "  ";
      if (c < 2) {
        out << std::left << std::setw(static_cast<int>(width[c])) << r[c];
      } else {
        out << std::right << std::setw(static_cast<int>(width[c])) << r[c];
      }
    }
    out << "\n";
  };
  line(kColumns);
  for (const auto& r : body) line(r);
  out << "replaced multiplications: " << fixed(100.0 * report.replaced_ratio(), 2) << "%\n";
  return out.str();
}

std::string format_csv(const OpCountReport& report) {
  std::ostringstream out;
  for (std::size_t c = 0; c < kColumns.size(); ++c) out << (c ? "," : "") << kColumns[c];
  out << "\n";
  for (const auto& r : rows(report)) {
    for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "," : "") << r[c];
    out << "\n";
  }
  return out.str();
}

}  // namespace qntz::perf
