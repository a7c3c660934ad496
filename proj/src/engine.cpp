// SPDX-License-Identifier: Apache-2.0
#include "engine.hpp"

#include <cmath>
#include <limits>

#include "error.hpp"

namespace qntz::engine {

using io::LayerKind;
using io::LayerSpec;

const char* mode_name(Mode mode) {
  switch (mode) {
    case Mode::float_ref: return "float";
    case Mode::quant_ref: return "quant";
    case Mode::integer: return "int";
  }
  return "?";
}

std::optional<Mode> parse_mode(std::string_view text) {
  if (text == "float") return Mode::float_ref;
  if (text == "quant") return Mode::quant_ref;
  if (text == "int") return Mode::integer;
  return std::nullopt;
}

Tensor as_batch(const Tensor& input, const Shape& sample_shape) {
  if (input.shape == sample_shape) {
    Shape s{1};
    s.insert(s.end(), sample_shape.begin(), sample_shape.end());
    return Tensor(s, input.data);
  }
  if (input.rank() != sample_shape.size() + 1 ||
      !std::equal(sample_shape.begin(), sample_shape.end(), input.shape.begin() + 1)) {
    fail(ErrorCode::shape_mismatch, "input " + shape_to_string(input.shape) +
                                        " does not match graph input " + shape_to_string(sample_shape));
  }
  return input;
}

Affine batchnorm_affine(const io::Model& model, const LayerSpec& layer) {
  auto mean = io::to_tensor(model.get(layer.mean));
  auto var = io::to_tensor(model.get(layer.var));
  auto gamma = io::to_tensor(model.get(layer.gamma));
  auto beta = io::to_tensor(model.get(layer.beta));
  Affine f;
  f.a.resize(mean.size());
  f.b.resize(mean.size());
  for (std::size_t c = 0; c < mean.size(); ++c) {
    if (var.data[c] < 0) {
      fail(ErrorCode::invariant_violation, "layer '" + layer.name + "' has negative variance");
    }
    f.a[c] = gamma.data[c] / std::sqrt(static_cast<double>(var.data[c]) + layer.epsilon);
    f.b[c] = beta.data[c] - f.a[c] * mean.data[c];
  }
  return f;
}

namespace {

struct Compiled {
  LayerSpec spec;
  std::optional<std::size_t> producer;
  Shape in_shape, out_shape;  // per sample
  int in_exp = 0, out_exp = 0;

  // conv / fc
  Tensor weights;             // float or dequantized, [d, c, K, K]
  std::vector<double> bias;   // float-domain bias used by float kernels
  bool ternary = false;
  TernaryConvWeights tw;
  Int8ConvWeights iw;

  // batchnorm
  std::vector<double> a, b;
  std::vector<std::int32_t> a_m;
  std::vector<std::int64_t> b_q;
  std::vector<int> a_exp;

  PoolSpec pool;
};

std::int64_t quantize_bias(double value, int exponent, const std::string& layer) {
  double m = fxp::round_half_even(std::ldexp(value, -exponent));
  if (!std::isfinite(m) || std::fabs(m) > 0x1p53) {
    fail(ErrorCode::accumulator_overflow, "bias of layer '" + layer + "' does not fit the accumulator");
  }
  return static_cast<std::int64_t>(m);
}

Shape to_conv_shape(const LayerSpec& l, const Shape& in) {
  if (l.kind == LayerKind::conv) return {l.out_channels, in[0], l.kernel, l.kernel};
  return {l.out_channels, shape_product(in), 1, 1};
}

void compile_compute(Compiled& c, const io::Model& model, Mode mode) {
  const auto& l = c.spec;
  Shape wshape = to_conv_shape(l, c.in_shape);
  const auto& rec = model.get(*l.weight);
  const std::size_t d = l.out_channels;
  const std::size_t per_filter = shape_product(wshape) / d;

  std::vector<double> bias_f;
  if (l.bias) {
    auto b = io::to_tensor(model.get(*l.bias));
    bias_f.assign(b.data.begin(), b.data.end());
  }

  if (l.weight_bits == 32) {
    if (mode == Mode::integer) {
      fail(ErrorCode::unsupported, "layer '" + l.name +
                                       "' has float weights; quantize the model before integer inference");
    }
    c.weights = Tensor(wshape, io::to_tensor(rec).data);
    c.bias = bias_f;
    return;
  }

  std::vector<std::int8_t> codes =
      l.weight_bits == 2 ? io::to_ternary_codes(rec) : io::to_i8(rec);
  std::vector<std::int32_t> filter_scale(d, 1);
  int w_exp = *l.weight_exponent;
  if (l.weight_bits == 2 || l.weight_bits == 4) {
    auto scales = io::to_i8(model.get(*l.scales));
    for (std::size_t f = 0; f < d; ++f) {
      auto m = scales[f / l.cluster_size];
      if (m < 0) {
        fail(ErrorCode::invariant_violation, "layer '" + l.name + "' has a negative scale mantissa");
      }
      filter_scale[f] = m;
    }
  }
  if (l.weight_bits == 4) {
    for (auto code : codes) {
      if (code < -7 || code > 7) {
        fail(ErrorCode::invalid_code, "layer '" + l.name + "' has 4-bit code " + std::to_string(code));
      }
    }
  }

  c.weights = Tensor(wshape);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    c.weights.data[i] = static_cast<float>(
        fxp::dequantize_value(std::int64_t{codes[i]} * filter_scale[i / per_filter], w_exp));
  }

  if (mode == Mode::float_ref) {
    c.bias = bias_f;
    return;
  }
  // Both quantized modes carry the bias on the accumulator grid so they agree.
  const int acc_exp = c.in_exp + w_exp;
  std::vector<std::int64_t> bias_q;
  for (double b : bias_f) bias_q.push_back(quantize_bias(b, acc_exp, l.name));
  for (auto b : bias_q) c.bias.push_back(fxp::dequantize_value(b, acc_exp));

  if (mode != Mode::integer) return;
  if (l.weight_bits == 2) {
    c.ternary = true;
    c.tw = {wshape, std::move(codes), std::move(filter_scale), w_exp, l.cluster_size, bias_q};
  } else {
    c.iw = {wshape, std::move(codes), std::move(filter_scale), w_exp, bias_q};
  }
}

void compile_batchnorm(Compiled& c, const io::Model& model, Mode mode) {
  auto f = batchnorm_affine(model, c.spec);
  if (mode == Mode::float_ref) {
    c.a = std::move(f.a);
    c.b = std::move(f.b);
    return;
  }
  // Each channel's scale gets its own exponent: a channel with near-zero
  // variance has a huge scale that would flush the others on a shared grid.
  for (std::size_t i = 0; i < f.a.size(); ++i) {
    if (!std::isfinite(f.a[i]) || !std::isfinite(f.b[i])) {
      fail(ErrorCode::non_finite, "layer '" + c.spec.name + "' has a non-finite affine term");
    }
    int e = fxp::exponent_for_max_abs(std::fabs(f.a[i]));
    const int acc_exp = c.in_exp + e;
    c.a_exp.push_back(e);
    c.a_m.push_back(fxp::quantize_value(f.a[i], e));
    c.b_q.push_back(quantize_bias(f.b[i], acc_exp, c.spec.name));
    c.a.push_back(fxp::dequantize_value(c.a_m.back(), e));
    c.b.push_back(fxp::dequantize_value(c.b_q.back(), acc_exp));
  }
}

Shape with_batch(std::size_t batch, const Shape& s) {
  Shape out{batch};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::string act_name(const LayerSpec& l) { return "act." + l.name; }

void check_finite(const Tensor& x) {
  for (float v : x.data) {
    if (!std::isfinite(v)) fail(ErrorCode::non_finite, "input contains a non-finite value");
  }
}

}  // namespace

struct Plan::Impl {
  io::ModelGraph graph;
  Mode mode = Mode::float_ref;
  int input_exp = 0;
  std::vector<Compiled> layers;

  const Tensor& pick(const std::vector<Tensor>& outs, const Tensor& in, std::size_t i) const {
    return layers[i].producer ? outs[*layers[i].producer] : in;
  }

  Tensor step_float(const Compiled& c, const Tensor& x, std::size_t threads) const {
    const bool snap = mode == Mode::quant_ref;
    std::optional<int> fmt = snap ? std::optional<int>(c.out_exp) : std::nullopt;
    const std::size_t batch = x.shape[0];
    switch (c.spec.kind) {
      case LayerKind::conv:
        return conv_float(x, c.weights, c.bias, c.spec.stride, c.spec.padding, threads, fmt);
      case LayerKind::fc: {
        Tensor flat(with_batch(batch, {c.weights.shape[1], 1, 1}), x.data);
        auto y = conv_float(flat, c.weights, c.bias, 1, 0, threads, fmt);
        y.shape = {batch, c.spec.out_channels};
        return y;
      }
      case LayerKind::batchnorm: return affine_float(x, c.a, c.b, fmt);
      case LayerKind::relu: return relu_float(x);
      case LayerKind::maxpool: return maxpool_float(x, c.pool);
      case LayerKind::avgpool: return avgpool_float(x, c.pool, fmt);
    }
    return x;
  }

  QTensor step_int(const Compiled& c, const QTensor& x, OpCounters& counters,
                   std::size_t threads) const {
    const std::size_t batch = x.shape[0];
    switch (c.spec.kind) {
      case LayerKind::conv:
        return c.ternary ? conv_ternary_int(x, c.tw, c.spec.stride, c.spec.padding, c.out_exp,
                                            &counters, threads)
                         : conv_int8w(x, c.iw, c.spec.stride, c.spec.padding, c.out_exp, &counters,
                                      threads);
      case LayerKind::fc: {
        QTensor flat{with_batch(batch, {c.weights.shape[1], 1, 1}), x.data, x.exponent};
        auto y = c.ternary ? conv_ternary_int(flat, c.tw, 1, 0, c.out_exp, &counters, threads)
                           : conv_int8w(flat, c.iw, 1, 0, c.out_exp, &counters, threads);
        y.shape = {batch, c.spec.out_channels};
        return y;
      }
      case LayerKind::batchnorm: return affine_int(x, c.a_m, c.b_q, c.a_exp, c.out_exp, &counters);
      case LayerKind::relu: return relu_int(x);
      case LayerKind::maxpool: return maxpool_int(x, c.pool);
      case LayerKind::avgpool: return avgpool_int(x, c.pool);
    }
    return x;
  }
};

Plan::Plan(const io::Model& model, Mode mode) : impl_(std::make_unique<Impl>()) {
  const auto& graph = model.graph;
  io::validate_graph(graph, model.tensors);
  impl_->graph = graph;
  impl_->mode = mode;
  const bool quantized = mode != Mode::float_ref;
  if (quantized) {
    if (!graph.input_exponent) {
      fail(ErrorCode::missing_format, std::string("graph input has no activation format; run calibrate before ") +
                                          mode_name(mode) + " inference");
    }
    impl_->input_exp = *graph.input_exponent;
  }

  auto shapes = io::infer_shapes(graph);
  impl_->layers.resize(graph.layers.size());
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    auto& c = impl_->layers[i];
    c.spec = graph.layers[i];
    c.producer = io::producer_index(graph, i);
    c.in_shape = io::layer_input_shape(graph, shapes, i);
    c.out_shape = shapes[i];
    c.in_exp = c.producer ? impl_->layers[*c.producer].out_exp : impl_->input_exp;
    const bool own_format = is_compute(c.spec.kind) || c.spec.kind == LayerKind::batchnorm;
    c.out_exp = c.in_exp;
    if (quantized && own_format) {
      if (!c.spec.act_exponent) {
        fail(ErrorCode::missing_format, "layer '" + c.spec.name +
                                            "' has no activation format; run calibrate first");
      }
      c.out_exp = *c.spec.act_exponent;
    }
    switch (c.spec.kind) {
      case LayerKind::conv:
      case LayerKind::fc: compile_compute(c, model, mode); break;
      case LayerKind::batchnorm: compile_batchnorm(c, model, mode); break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        c.pool = {c.spec.kernel, c.spec.stride, c.spec.padding, c.spec.global_pool};
        break;
      case LayerKind::relu: break;
    }
  }
}

Plan::~Plan() = default;
Plan::Plan(Plan&&) noexcept = default;
Plan& Plan::operator=(Plan&&) noexcept = default;

Mode Plan::mode() const { return impl_->mode; }
const io::ModelGraph& Plan::graph() const { return impl_->graph; }

Tensor Plan::forward(const Tensor& input, std::size_t threads, const LayerObserver& observer,
                     std::size_t stop) const {
  if (impl_->mode == Mode::integer) {
    fail(ErrorCode::unsupported, "layer-wise float forward is not available in integer mode");
  }
  Tensor x = as_batch(input, impl_->graph.input_shape);
  check_finite(x);
  if (impl_->mode == Mode::quant_ref) x = fxp::dequantize(fxp::quantize_tensor(x, {impl_->input_exp}));
  stop = std::min(stop, impl_->layers.size());
  std::vector<Tensor> outs(stop);
  for (std::size_t i = 0; i < stop; ++i) {
    outs[i] = impl_->step_float(impl_->layers[i], impl_->pick(outs, x, i), threads);
    if (observer) observer(i, outs[i]);
  }
  return stop ? outs.back() : x;
}

RunResult Plan::run(const Tensor& input, const RunOptions& options) const {
  const auto& layers = impl_->layers;
  RunResult result;
  Tensor x = as_batch(input, impl_->graph.input_shape);
  check_finite(x);

  if (impl_->mode != Mode::integer) {
    result.output = forward(x, options.threads,
                            [&](std::size_t i, const Tensor& out) {
                              if (options.dump_activations) {
                                result.activations.push_back(
                                    io::make_f32(act_name(layers[i].spec), out.shape, out.data));
                              }
                            },
                            layers.size());
    return result;
  }

  QTensor qin = fxp::quantize_tensor(x, {impl_->input_exp});
  std::vector<QTensor> outs(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const QTensor& in = layers[i].producer ? outs[*layers[i].producer] : qin;
    OpCounters counters;
    outs[i] = impl_->step_int(layers[i], in, counters, options.threads);
    result.layers.push_back({layers[i].spec.name, counters});
    result.total += counters;
    if (options.dump_activations) {
      auto f = fxp::dequantize(outs[i]);
      result.activations.push_back(io::make_f32(act_name(layers[i].spec), f.shape, f.data));
    }
  }
  result.output = fxp::dequantize(layers.empty() ? qin : outs.back());
  return result;
}

RunResult run(const io::Model& model, const Tensor& input, Mode mode, const RunOptions& options) {
  return Plan(model, mode).run(input, options);
}

}  // namespace qntz::engine
