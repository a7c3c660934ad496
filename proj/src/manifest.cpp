// SPDX-License-Identifier: Apache-2.0
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "error.hpp"
#include "model_io.hpp"

namespace qntz::io {

namespace {

std::string_view trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    auto start = i;
    while (i < s.size() && s[i] != ' ' && s[i] != '\t') ++i;
    if (i > start) out.push_back(s.substr(start, i - start));
  }
  return out;
}

class LineError {
 public:
  explicit LineError(std::size_t line) : line_(line) {}
  [[noreturn]] void operator()(const std::string& msg) const {
    fail(ErrorCode::manifest_syntax, "manifest line " + std::to_string(line_) + ": " + msg);
  }

 private:
  std::size_t line_;
};

template <typename T>
T parse_int(std::string_view text, const LineError& err, std::string_view key) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    err("bad integer for '" + std::string(key) + "': " + std::string(text));
  }
  return value;
}

std::size_t parse_size(std::string_view text, const LineError& err, std::string_view key) {
  return parse_int<std::size_t>(text, err, key);
}

double parse_double(std::string_view text, const LineError& err, std::string_view key) {
  double value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    err("bad number for '" + std::string(key) + "': " + std::string(text));
  }
  return value;
}

bool parse_bool(std::string_view text, const LineError& err, std::string_view key) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  err("bad boolean for '" + std::string(key) + "': " + std::string(text));
}

int parse_afmt(std::string_view text, const LineError& err) {
  if (text.size() < 2 || text[0] != 'e') err("afmt must look like e<int>, got " + std::string(text));
  return parse_int<int>(text.substr(1), err, "afmt");
}

Shape parse_shape(std::string_view text, const LineError& err) {
  Shape shape;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto comma = text.find(',', start);
    auto part = text.substr(start, comma == std::string_view::npos ? text.size() - start
                                                                  : comma - start);
    auto dim = parse_size(part, err, "shape");
    if (dim == 0) err("shape dimensions must be positive");
    shape.push_back(dim);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return shape;
}

const std::map<LayerKind, std::set<std::string_view>>& allowed_keys() {
  static const std::map<LayerKind, std::set<std::string_view>> keys = {
      {LayerKind::conv,
       {"weight", "bias", "k", "stride", "pad", "out", "first", "in", "bits", "scales", "wexp",
        "cluster", "afmt"}},
      {LayerKind::fc, {"weight", "bias", "out", "in", "bits", "scales", "wexp", "cluster", "afmt"}},
      {LayerKind::batchnorm, {"mean", "var", "gamma", "beta", "eps", "in", "afmt"}},
      {LayerKind::relu, {"in", "afmt"}},
      {LayerKind::maxpool, {"k", "stride", "pad", "in", "afmt"}},
      {LayerKind::avgpool, {"k", "stride", "pad", "global", "in", "afmt"}},
  };
  return keys;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                     const std::string& layer) {
  if (stride == 0) fail(ErrorCode::shape_mismatch, "layer '" + layer + "' has stride 0");
  if (in + 2 * pad < k) {
    fail(ErrorCode::shape_mismatch, "layer '" + layer + "': kernel " + std::to_string(k) +
                                        " larger than padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::fc: return "fc";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
  }
  return "?";
}

std::optional<LayerKind> parse_layer_kind(std::string_view text) {
  for (auto kind : {LayerKind::conv, LayerKind::fc, LayerKind::batchnorm, LayerKind::relu,
                    LayerKind::maxpool, LayerKind::avgpool}) {
    if (text == layer_kind_name(kind)) return kind;
  }
  if (text == "bn") return LayerKind::batchnorm;
  return std::nullopt;
}

const LayerSpec* ModelGraph::find(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

ModelGraph parse_manifest(std::string_view text) {
  ModelGraph graph;
  bool have_input = false;
  std::set<std::string> names;
  std::size_t line_no = 0;
  std::size_t pos = 0;

  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    auto raw = text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    LineError err(line_no);

    if (auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    auto line = trim(raw);
    if (line.empty()) continue;
    auto tokens = split_ws(line);
    if (tokens.size() < 2) err("expected '<kind> <name> key=value ...'");

    std::map<std::string, std::string_view> kv;
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      auto eq = tokens[i].find('=');
      if (eq == std::string_view::npos || eq == 0) err("expected key=value, got " + std::string(tokens[i]));
      auto key = std::string(tokens[i].substr(0, eq));
      if (!kv.emplace(key, tokens[i].substr(eq + 1)).second) err("repeated key '" + key + "'");
    }
    auto name = std::string(tokens[1]);

    if (tokens[0] == "input") {
      if (have_input) err("second input line");
      if (!graph.layers.empty()) err("input must precede all layers");
      for (const auto& [key, value] : kv) {
        if (key == "shape") {
          graph.input_shape = parse_shape(value, err);
        } else if (key == "afmt") {
          graph.input_exponent = parse_afmt(value, err);
        } else {
          err("unknown key '" + key + "' for input");
        }
      }
      if (graph.input_shape.empty()) err("input needs shape=");
      graph.input_name = name;
      names.insert(name);
      have_input = true;
      continue;
    }

    auto kind = parse_layer_kind(tokens[0]);
    if (!kind) err("unknown layer kind '" + std::string(tokens[0]) + "'");
    if (!have_input) err("input line must come first");
    const auto& allowed = allowed_keys().at(*kind);
    for (const auto& [key, value] : kv) {
      if (!allowed.contains(key)) {
        err("unknown key '" + key + "' for " + layer_kind_name(*kind));
      }
    }
    if (!names.insert(name).second) err("duplicate layer name '" + name + "'");

    LayerSpec spec;
    spec.kind = *kind;
    spec.name = name;
    auto get = [&](const char* key) -> std::optional<std::string_view> {
      auto it = kv.find(key);
      if (it == kv.end()) return std::nullopt;
      return it->second;
    };
    if (auto v = get("in")) {
      spec.input = std::string(*v);
      if (!names.contains(spec.input) || spec.input == name) {
        err("input '" + spec.input + "' is not produced by a preceding layer");
      }
    }
    if (auto v = get("afmt")) spec.act_exponent = parse_afmt(*v, err);

    switch (*kind) {
      case LayerKind::conv:
      case LayerKind::fc: {
        auto w = get("weight");
        if (!w) err("missing weight=");
        spec.weight = std::string(*w);
        if (auto v = get("bias")) spec.bias = std::string(*v);
        auto out = get("out");
        if (!out) err("missing out=");
        spec.out_channels = parse_size(*out, err, "out");
        if (spec.out_channels == 0) err("out must be positive");
        if (*kind == LayerKind::conv) {
          auto k = get("k");
          if (!k) err("missing k=");
          spec.kernel = parse_size(*k, err, "k");
          if (spec.kernel == 0) err("k must be positive");
          if (auto v = get("stride")) spec.stride = parse_size(*v, err, "stride");
          if (spec.stride == 0) err("stride must be positive");
          if (auto v = get("pad")) spec.padding = parse_size(*v, err, "pad");
          if (auto v = get("first")) spec.first_conv = parse_bool(*v, err, "first");
        }
        if (auto v = get("bits")) {
          spec.weight_bits = parse_int<int>(*v, err, "bits");
          if (spec.weight_bits != 2 && spec.weight_bits != 4 && spec.weight_bits != 8 &&
              spec.weight_bits != 32) {
            err("bits must be 2, 4, 8 or 32");
          }
        }
        if (auto v = get("wexp")) spec.weight_exponent = parse_int<int>(*v, err, "wexp");
        if (auto v = get("scales")) spec.scales = std::string(*v);
        if (auto v = get("cluster")) spec.cluster_size = parse_size(*v, err, "cluster");
        if (spec.weight_bits == 2 || spec.weight_bits == 4) {
          if (!spec.scales || !spec.weight_exponent || spec.cluster_size == 0) {
            err("bits=" + std::to_string(spec.weight_bits) + " needs scales=, wexp= and cluster=");
          }
        } else if (spec.weight_bits == 8) {
          if (!spec.weight_exponent) err("bits=8 needs wexp=");
        }
        if (spec.first_conv && spec.weight_bits != 32 && spec.weight_bits != 8) {
          err("first conv layer must keep 8-bit (or float) weights");
        }
        break;
      }
      case LayerKind::batchnorm:
        spec.mean = std::string(get("mean").value_or(name + ".mean"));
        spec.var = std::string(get("var").value_or(name + ".var"));
        spec.gamma = std::string(get("gamma").value_or(name + ".gamma"));
        spec.beta = std::string(get("beta").value_or(name + ".beta"));
        if (auto v = get("eps")) spec.epsilon = parse_double(*v, err, "eps");
        if (!(spec.epsilon > 0)) err("eps must be positive");
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        if (auto v = get("global")) spec.global_pool = parse_bool(*v, err, "global");
        auto k = get("k");
        if (!k && !spec.global_pool) err("missing k=");
        if (k) spec.kernel = parse_size(*k, err, "k");
        if (spec.kernel == 0) err("k must be positive");
        spec.stride = spec.kernel;
        if (auto v = get("stride")) spec.stride = parse_size(*v, err, "stride");
        if (spec.stride == 0) err("stride must be positive");
        if (auto v = get("pad")) spec.padding = parse_size(*v, err, "pad");
        break;
      }
    }
    graph.layers.push_back(std::move(spec));
  }

  if (!have_input) fail(ErrorCode::manifest_syntax, "manifest has no input line");

  std::size_t first_count = 0, conv_count = 0;
  for (const auto& l : graph.layers) {
    if (l.kind == LayerKind::conv) ++conv_count;
    if (l.first_conv) ++first_count;
  }
  if (conv_count > 0 && first_count != 1) {
    fail(ErrorCode::manifest_syntax, "exactly one conv layer must be marked first=true, found " +
                                         std::to_string(first_count));
  }
  infer_shapes(graph);
  return graph;
}

std::string format_manifest(const ModelGraph& graph) {
  std::ostringstream out;
  out << "input " << graph.input_name << " shape=";
  for (std::size_t i = 0; i < graph.input_shape.size(); ++i) {
    out << (i ? "," : "") << graph.input_shape[i];
  }
  if (graph.input_exponent) out << " afmt=e" << *graph.input_exponent;
  out << "\n";

  for (const auto& l : graph.layers) {
    out << layer_kind_name(l.kind) << " " << l.name;
    if (!l.input.empty()) out << " in=" << l.input;
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::fc:
        out << " weight=" << *l.weight;
        if (l.bias) out << " bias=" << *l.bias;
        if (l.kind == LayerKind::conv) {
          out << " k=" << l.kernel << " stride=" << l.stride << " pad=" << l.padding;
        }
        out << " out=" << l.out_channels;
        if (l.first_conv) out << " first=true";
        if (l.weight_bits != 32) out << " bits=" << l.weight_bits;
        if (l.scales) out << " scales=" << *l.scales;
        if (l.weight_exponent) out << " wexp=" << *l.weight_exponent;
        if (l.cluster_size) out << " cluster=" << l.cluster_size;
        break;
      case LayerKind::batchnorm:
        out << " mean=" << l.mean << " var=" << l.var << " gamma=" << l.gamma
            << " beta=" << l.beta << " eps=" << format_double(l.epsilon);
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        if (l.global_pool) {
          out << " global=true";
        } else {
          out << " k=" << l.kernel << " stride=" << l.stride << " pad=" << l.padding;
        }
        break;
    }
    if (l.act_exponent) out << " afmt=e" << *l.act_exponent;
    out << "\n";
  }
  return out.str();
}

ModelGraph load_graph(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  try {
    return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

void save_graph(const ModelGraph& graph, const std::filesystem::path& path) {
  auto text = format_manifest(graph);
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::optional<std::size_t> producer_index(const ModelGraph& graph, std::size_t index) {
  const auto& l = graph.layers.at(index);
  if (l.input.empty()) {
    if (index == 0) return std::nullopt;
    return index - 1;
  }
  if (l.input == graph.input_name) return std::nullopt;
  for (std::size_t i = 0; i < index; ++i) {
    if (graph.layers[i].name == l.input) return i;
  }
  fail(ErrorCode::dangling_reference,
       "layer '" + l.name + "' reads '" + l.input + "' which no preceding layer produces");
}

Shape layer_input_shape(const ModelGraph& graph, const std::vector<Shape>& shapes,
                        std::size_t index) {
  auto p = producer_index(graph, index);
  return p ? shapes[*p] : graph.input_shape;
}

std::vector<Shape> infer_shapes(const ModelGraph& graph) {
  std::vector<Shape> shapes;
  shapes.reserve(graph.layers.size());
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    auto in = layer_input_shape(graph, shapes, i);
    auto need_chw = [&] {
      if (in.size() != 3) {
        fail(ErrorCode::shape_mismatch, "layer '" + l.name + "' needs a CHW input, got " +
                                            shape_to_string(in));
      }
    };
    switch (l.kind) {
      case LayerKind::conv:
        need_chw();
        shapes.push_back({l.out_channels, conv_out(in[1], l.kernel, l.stride, l.padding, l.name),
                          conv_out(in[2], l.kernel, l.stride, l.padding, l.name)});
        break;
      case LayerKind::fc:
        shapes.push_back({l.out_channels});
        break;
      case LayerKind::batchnorm:
      case LayerKind::relu:
        shapes.push_back(in);
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        need_chw();
        if (l.global_pool) {
          shapes.push_back({in[0], 1, 1});
        } else {
          shapes.push_back({in[0], conv_out(in[1], l.kernel, l.stride, l.padding, l.name),
                            conv_out(in[2], l.kernel, l.stride, l.padding, l.name)});
        }
        break;
    }
  }
  return shapes;
}

void validate_graph(const ModelGraph& graph, std::span<const TensorRecord> records) {
  auto find = [&](const std::string& tensor, const LayerSpec& layer) -> const TensorRecord& {
    for (const auto& r : records) {
      if (r.name == tensor) return r;
    }
    fail(ErrorCode::dangling_reference,
         "layer '" + layer.name + "' references missing tensor '" + tensor + "'");
  };
  auto expect = [&](const TensorRecord& r, DType dtype, const Shape& shape, const LayerSpec& layer) {
    if (r.dtype != dtype || r.shape != shape) {
      fail(ErrorCode::shape_mismatch,
           "layer '" + layer.name + "': tensor '" + r.name + "' is " + dtype_name(r.dtype) +
               shape_to_string(r.shape) + ", expected " + dtype_name(dtype) +
               shape_to_string(shape));
    }
  };

  auto shapes = infer_shapes(graph);
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    auto in = layer_input_shape(graph, shapes, i);
    if (is_compute(l.kind)) {
      Shape wshape = l.kind == LayerKind::conv
                         ? Shape{l.out_channels, in[0], l.kernel, l.kernel}
                         : Shape{l.out_channels, shape_product(in)};
      const auto& w = find(*l.weight, l);
      switch (l.weight_bits) {
        case 32: expect(w, DType::f32, wshape, l); break;
        case 2: expect(w, DType::ternary2, wshape, l); break;
        case 4:
        case 8: expect(w, DType::i8, wshape, l); break;
      }
      if (l.weight_bits == 2 || l.weight_bits == 4) {
        auto clusters = (l.out_channels + l.cluster_size - 1) / l.cluster_size;
        expect(find(*l.scales, l), DType::i8, {clusters}, l);
      }
      if (l.bias) expect(find(*l.bias, l), DType::f32, {l.out_channels}, l);
    } else if (l.kind == LayerKind::batchnorm) {
      for (const auto* name : {&l.mean, &l.var, &l.gamma, &l.beta}) {
        expect(find(*name, l), DType::f32, {in.at(0)}, l);
      }
    }
  }
}

}  // namespace qntz::io
