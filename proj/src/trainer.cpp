// SPDX-License-Identifier: Apache-2.0
#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "error.hpp"
#include "fixed_point.hpp"
#include "kernels.hpp"
#include "toy.hpp"

namespace qntz::train {

using io::LayerKind;

DTensor to_double(const Tensor& t) {
  return DTensor(t.shape, std::vector<double>(t.data.begin(), t.data.end()));
}

Tensor to_float(const DTensor& t) {
  Tensor out(t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) out.data[i] = static_cast<float>(t.data[i]);
  return out;
}

namespace {

std::vector<double> load(const io::Model& m, const std::string& name) {
  auto t = io::to_tensor(m.get(name));
  return {t.data.begin(), t.data.end()};
}

void store(io::Model& m, const std::string& name, const Shape& shape, const std::vector<double>& v) {
  std::vector<float> f(v.begin(), v.end());
  m.put(io::make_f32(name, shape, f));
}

}  // namespace

Network Network::from_model(const io::Model& model) {
  io::validate_graph(model.graph, model.tensors);
  Network net;
  net.graph = model.graph;
  net.params.resize(model.graph.layers.size());
  for (std::size_t i = 0; i < model.graph.layers.size(); ++i) {
    const auto& l = model.graph.layers[i];
    auto producer = io::producer_index(model.graph, i);
    if ((i == 0 && producer) || (i > 0 && producer != i - 1)) {
      fail(ErrorCode::unsupported, "training needs a sequential graph; layer '" + l.name +
                                       "' does not read the previous layer");
    }
    auto& p = net.params[i];
    if (is_compute(l.kind)) {
      if (l.weight_bits != 32) {
        fail(ErrorCode::unsupported, "layer '" + l.name + "' is quantized; training starts from a float model");
      }
      p.weight = load(model, *l.weight);
      if (l.bias) p.bias = load(model, *l.bias);
    } else if (l.kind == LayerKind::batchnorm) {
      p.mean = load(model, l.mean);
      p.var = load(model, l.var);
      p.gamma = load(model, l.gamma);
      p.beta = load(model, l.beta);
    }
  }
  return net;
}

io::Model Network::to_model() const {
  io::Model m;
  m.graph = graph;
  auto shapes = io::infer_shapes(graph);
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const auto& l = graph.layers[i];
    const auto& p = params[i];
    auto in = io::layer_input_shape(graph, shapes, i);
    if (is_compute(l.kind)) {
      Shape ws = l.kind == LayerKind::conv ? Shape{l.out_channels, in[0], l.kernel, l.kernel}
                                           : Shape{l.out_channels, shape_product(in)};
      store(m, *l.weight, ws, p.weight);
      if (l.bias) store(m, *l.bias, {l.out_channels}, p.bias);
    } else if (l.kind == LayerKind::batchnorm) {
      store(m, l.mean, {in[0]}, p.mean);
      store(m, l.var, {in[0]}, p.var);
      store(m, l.gamma, {in[0]}, p.gamma);
      store(m, l.beta, {in[0]}, p.beta);
    }
  }
  return m;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.weight.size() + p.bias.size() + p.gamma.size() + p.beta.size();
  return n;
}

LowPrecision LowPrecision::from_calibrated(const io::ModelGraph& graph,
                                           const ternary::QuantConfig& quant) {
  LowPrecision lp;
  lp.weights = true;
  lp.activations = true;
  lp.quant = quant;
  if (!graph.input_exponent) fail(ErrorCode::missing_format, "graph input has no activation format");
  lp.input_exponent = graph.input_exponent;
  for (const auto& l : graph.layers) lp.layer_exponents.push_back(l.act_exponent);
  return lp;
}

std::vector<double> effective_weight(const Network& net, const LowPrecision& lp, std::size_t index) {
  const auto& l = net.graph.layers[index];
  const auto& w = net.params[index].weight;
  if (!lp.weights || l.kind != LayerKind::conv) return w;
  Shape ws{l.out_channels, w.size() / l.out_channels};
  Tensor wf(ws, std::vector<float>(w.begin(), w.end()));
  Tensor deq = l.first_conv ? ternary::quantize_weights_int8(wf).dequantized()
                            : ternary::quantize_layer(wf, lp.quant).dequantized();
  return {deq.data.begin(), deq.data.end()};
}

namespace {

// --- double kernels -------------------------------------------------------

engine::ConvGeometry geometry(const io::LayerSpec& l, const Shape& x) {
  return engine::conv_geometry(x, {l.out_channels, x[1], l.kernel, l.kernel}, l.stride, l.padding);
}

inline bool tap(std::size_t o, std::size_t k, const engine::ConvGeometry& g, std::size_t extent,
                std::size_t& pos) {
  std::size_t p = o * g.stride + k;
  if (p < g.padding || p - g.padding >= extent) return false;
  pos = p - g.padding;
  return true;
}

DTensor conv_forward(const DTensor& x, const std::vector<double>& w, const std::vector<double>& bias,
                     const engine::ConvGeometry& g) {
  DTensor y({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h * g.out_w;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.out_channels; ++f) {
      double* out = y.data.data() + (b * g.out_channels + f) * out_plane;
      if (!bias.empty()) std::fill(out, out + out_plane, bias[f]);
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        const double* in = x.data.data() + (b * g.in_channels + c) * in_plane;
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            double wv = w[((f * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
              std::size_t iy;
              if (!tap(oy, ky, g, g.in_h, iy)) continue;
              for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                std::size_t ix;
                if (!tap(ox, kx, g, g.in_w, ix)) continue;
                out[oy * g.out_w + ox] += wv * in[iy * g.in_w + ix];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

void conv_backward(const DTensor& x, const std::vector<double>& w, const DTensor& dy,
                   const engine::ConvGeometry& g, DTensor* dx, std::vector<double>& dw,
                   std::vector<double>* db) {
  const std::size_t in_plane = g.in_h * g.in_w, out_plane = g.out_h * g.out_w;
  dw.assign(w.size(), 0.0);
  if (db) db->assign(g.out_channels, 0.0);
  if (dx) *dx = DTensor(x.shape);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.out_channels; ++f) {
      const double* go = dy.data.data() + (b * g.out_channels + f) * out_plane;
      if (db) {
        for (std::size_t i = 0; i < out_plane; ++i) (*db)[f] += go[i];
      }
      for (std::size_t c = 0; c < g.in_channels; ++c) {
        const double* in = x.data.data() + (b * g.in_channels + c) * in_plane;
        double* gi = dx ? dx->data.data() + (b * g.in_channels + c) * in_plane : nullptr;
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            std::size_t widx = ((f * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
            double wv = w[widx];
            double acc = 0.0;
            for (std::size_t oy = 0; oy < g.out_h; ++oy) {
              std::size_t iy;
              if (!tap(oy, ky, g, g.in_h, iy)) continue;
              for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                std::size_t ix;
                if (!tap(ox, kx, g, g.in_w, ix)) continue;
                double gv = go[oy * g.out_w + ox];
                acc += gv * in[iy * g.in_w + ix];
                if (gi) gi[iy * g.in_w + ix] += gv * wv;
              }
            }
            dw[widx] += acc;
          }
        }
      }
    }
  }
}

DTensor fc_forward(const DTensor& x, const std::vector<double>& w, const std::vector<double>& bias,
                   std::size_t out) {
  const std::size_t batch = x.shape[0], in = x.size() / batch;
  DTensor y({batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xv = x.data.data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wv = w.data() + o * in;
      double acc = bias.empty() ? 0.0 : bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += wv[i] * xv[i];
      y.data[b * out + o] = acc;
    }
  }
  return y;
}

std::size_t channels_of(const DTensor& x) { return x.shape[1]; }
std::size_t spatial_of(const DTensor& x) { return x.size() / (x.shape[0] * x.shape[1]); }

bool representable(double v, int exponent) {
  return v >= std::ldexp(double{fxp::kMantissaMin}, exponent) &&
         v <= std::ldexp(double{fxp::kMantissaMax}, exponent);
}

double fake_quant(double v, int exponent) {
  return fxp::dequantize_value(fxp::quantize_value(v, exponent), exponent);
}

void check_finite(const DTensor& t, const std::string& layer) {
  for (double v : t.data) {
    if (!std::isfinite(v)) fail(ErrorCode::non_finite, "non-finite activation at layer '" + layer + "'");
  }
}

}  // namespace

double forward(const Network& net, const LowPrecision& lp, const DTensor& input,
               std::span<const std::uint8_t> labels, bool training, ForwardCache* cache) {
  const auto& layers = net.graph.layers;
  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc.layers.assign(layers.size(), {});
  fc.labels.assign(labels.begin(), labels.end());

  DTensor x = input;
  if (lp.activations) {
    if (!lp.input_exponent) fail(ErrorCode::missing_format, "graph input has no activation format");
    for (auto& v : x.data) v = fake_quant(v, *lp.input_exponent);
  }

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const auto& p = net.params[i];
    auto& lc = fc.layers[i];
    lc.input = std::move(x);
    DTensor y;
    switch (l.kind) {
      case LayerKind::conv: {
        lc.weight = effective_weight(net, lp, i);
        y = conv_forward(lc.input, lc.weight, p.bias, geometry(l, lc.input.shape));
        break;
      }
      case LayerKind::fc: {
        lc.weight = effective_weight(net, lp, i);
        y = fc_forward(lc.input, lc.weight, p.bias, l.out_channels);
        break;
      }
      case LayerKind::batchnorm: {
        const std::size_t C = channels_of(lc.input), S = spatial_of(lc.input), B = lc.input.shape[0];
        y = DTensor(lc.input.shape);
        lc.xhat = DTensor(lc.input.shape);
        lc.batch_mean.assign(C, 0.0);
        lc.batch_var.assign(C, 0.0);
        lc.inv_std.assign(C, 0.0);
        for (std::size_t c = 0; c < C; ++c) {
          double mean = p.mean[c], var = p.var[c];
          if (training) {
            double sum = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
              for (std::size_t s = 0; s < S; ++s) sum += lc.input.data[(b * C + c) * S + s];
            }
            mean = sum / static_cast<double>(B * S);
            double sq = 0.0;
            for (std::size_t b = 0; b < B; ++b) {
              for (std::size_t s = 0; s < S; ++s) {
                double d = lc.input.data[(b * C + c) * S + s] - mean;
                sq += d * d;
              }
            }
            var = sq / static_cast<double>(B * S);
          }
          double inv = 1.0 / std::sqrt(var + l.epsilon);
          lc.batch_mean[c] = mean;
          lc.batch_var[c] = var;
          lc.inv_std[c] = inv;
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t s = 0; s < S; ++s) {
              std::size_t idx = (b * C + c) * S + s;
              lc.xhat.data[idx] = (lc.input.data[idx] - mean) * inv;
              y.data[idx] = p.gamma[c] * lc.xhat.data[idx] + p.beta[c];
            }
          }
        }
        break;
      }
      case LayerKind::relu: {
        y = lc.input;
        for (auto& v : y.data) v = std::max(v, 0.0);
        break;
      }
      case LayerKind::maxpool:
      case LayerKind::avgpool: {
        const auto& in = lc.input;
        const std::size_t B = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
        std::size_t k = l.global_pool ? std::max(H, W) : l.kernel;
        std::size_t stride = l.global_pool ? 1 : l.stride, pad = l.global_pool ? 0 : l.padding;
        std::size_t oh = l.global_pool ? 1 : (H + 2 * pad - k) / stride + 1;
        std::size_t ow = l.global_pool ? 1 : (W + 2 * pad - k) / stride + 1;
        std::size_t kh = l.global_pool ? H : k, kw = l.global_pool ? W : k;
        y = DTensor({B, C, oh, ow});
        if (l.kind == LayerKind::maxpool) lc.argmax.assign(y.size(), 0);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              double best = -INFINITY, sum = 0.0;
              std::size_t best_idx = 0;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                std::size_t py = oy * stride + ky;
                if (py < pad || py - pad >= H) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  std::size_t px = ox * stride + kx;
                  if (px < pad || px - pad >= W) continue;
                  std::size_t idx = (bc * H + py - pad) * W + px - pad;
                  sum += in.data[idx];
                  if (in.data[idx] > best) {
                    best = in.data[idx];
                    best_idx = idx;
                  }
                }
              }
              std::size_t o = (bc * oh + oy) * ow + ox;
              if (l.kind == LayerKind::maxpool) {
                y.data[o] = best;
                lc.argmax[o] = best_idx;
              } else {
                y.data[o] = sum / static_cast<double>(kh * kw);
              }
            }
          }
        }
        break;
      }
    }
    check_finite(y, l.name);
    lc.pre = y;
    const bool last = i + 1 == layers.size();
    const bool own_format = is_compute(l.kind) || l.kind == LayerKind::batchnorm;
    if (lp.activations && own_format && !last) {
      if (!lp.layer_exponents.at(i)) {
        fail(ErrorCode::missing_format, "layer '" + l.name + "' has no activation format");
      }
      lc.act_exponent = *lp.layer_exponents[i];
      for (auto& v : y.data) v = fake_quant(v, *lc.act_exponent);
    }
    lc.output = y;
    x = std::move(y);
  }

  // Softmax cross-entropy on the final output.
  const std::size_t batch = x.shape[0];
  const std::size_t classes = x.size() / batch;
  if (labels.size() != batch) fail(ErrorCode::shape_mismatch, "label count does not match the batch");
  fc.probabilities = DTensor({batch, classes});
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = x.data.data() + b * classes;
    double mx = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t k = 0; k < classes; ++k) denom += std::exp(z[k] - mx);
    for (std::size_t k = 0; k < classes; ++k) {
      fc.probabilities.data[b * classes + k] = std::exp(z[k] - mx) / denom;
    }
    if (labels[b] >= classes) fail(ErrorCode::invalid_argument, "label out of range");
    loss += -(z[labels[b]] - mx - std::log(denom));
  }
  loss /= static_cast<double>(batch);
  if (!std::isfinite(loss)) fail(ErrorCode::non_finite, "loss is not finite");
  return loss;
}

std::vector<Params> backward(const Network& net, const ForwardCache& cache) {
  const auto& layers = net.graph.layers;
  if (cache.layers.size() != layers.size()) {
    fail(ErrorCode::shape_mismatch, "forward cache does not belong to this network");
  }
  std::vector<Params> grads(layers.size());
  const std::size_t batch = cache.probabilities.shape.at(0);
  const std::size_t classes = cache.probabilities.shape.at(1);

  DTensor g = cache.probabilities;
  for (std::size_t b = 0; b < batch; ++b) g.data[b * classes + cache.labels[b]] -= 1.0;
  for (auto& v : g.data) v /= static_cast<double>(batch);

  for (std::size_t i = layers.size(); i-- > 0;) {
    const auto& l = layers[i];
    const auto& lc = cache.layers[i];
    const auto& p = net.params[i];
    auto& gr = grads[i];
    if (g.size() != lc.output.size()) fail(ErrorCode::shape_mismatch, "gradient shape mismatch at '" + l.name + "'");
    if (lc.act_exponent) {
      for (std::size_t k = 0; k < g.size(); ++k) {
        if (!representable(lc.pre.data[k], *lc.act_exponent)) g.data[k] = 0.0;
      }
    }
    DTensor gin;
    switch (l.kind) {
      case LayerKind::conv: {
        auto geo = geometry(l, lc.input.shape);
        conv_backward(lc.input, lc.weight, g, geo, i > 0 ? &gin : nullptr, gr.weight,
                      p.bias.empty() ? nullptr : &gr.bias);
        break;
      }
      case LayerKind::fc: {
        const std::size_t in = lc.input.size() / batch, out = l.out_channels;
        gr.weight.assign(lc.weight.size(), 0.0);
        if (!p.bias.empty()) gr.bias.assign(out, 0.0);
        gin = DTensor(lc.input.shape);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* xv = lc.input.data.data() + b * in;
          double* gi = gin.data.data() + b * in;
          for (std::size_t o = 0; o < out; ++o) {
            double go = g.data[b * out + o];
            if (!p.bias.empty()) gr.bias[o] += go;
            const double* wv = lc.weight.data() + o * in;
            double* gw = gr.weight.data() + o * in;
            for (std::size_t k = 0; k < in; ++k) {
              gw[k] += go * xv[k];
              gi[k] += go * wv[k];
            }
          }
        }
        break;
      }
      case LayerKind::batchnorm: {
        const std::size_t C = channels_of(lc.input), S = spatial_of(lc.input), B = lc.input.shape[0];
        const double M = static_cast<double>(B * S);
        gr.gamma.assign(C, 0.0);
        gr.beta.assign(C, 0.0);
        gin = DTensor(lc.input.shape);
        for (std::size_t c = 0; c < C; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t s = 0; s < S; ++s) {
              std::size_t idx = (b * C + c) * S + s;
              sum_g += g.data[idx];
              sum_gx += g.data[idx] * lc.xhat.data[idx];
            }
          }
          gr.gamma[c] = sum_gx;
          gr.beta[c] = sum_g;
          // Batch statistics depend on the input; xhat = (x - mean) * inv_std.
          double k = p.gamma[c] * lc.inv_std[c] / M;
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t s = 0; s < S; ++s) {
              std::size_t idx = (b * C + c) * S + s;
              gin.data[idx] = k * (M * g.data[idx] - sum_g - lc.xhat.data[idx] * sum_gx);
            }
          }
        }
        break;
      }
      case LayerKind::relu: {
        gin = g;
        for (std::size_t k = 0; k < g.size(); ++k) {
          if (lc.input.data[k] <= 0) gin.data[k] = 0.0;
        }
        break;
      }
      case LayerKind::maxpool: {
        gin = DTensor(lc.input.shape);
        for (std::size_t k = 0; k < g.size(); ++k) gin.data[lc.argmax[k]] += g.data[k];
        break;
      }
      case LayerKind::avgpool: {
        const auto& in = lc.input;
        const std::size_t C = in.shape[1], H = in.shape[2], W = in.shape[3];
        std::size_t k = l.global_pool ? std::max(H, W) : l.kernel;
        std::size_t stride = l.global_pool ? 1 : l.stride, pad = l.global_pool ? 0 : l.padding;
        std::size_t oh = lc.output.shape[2], ow = lc.output.shape[3];
        std::size_t kh = l.global_pool ? H : k, kw = l.global_pool ? W : k;
        gin = DTensor(in.shape);
        for (std::size_t bc = 0; bc < in.shape[0] * C; ++bc) {
          for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
              double go = g.data[(bc * oh + oy) * ow + ox] / static_cast<double>(kh * kw);
              for (std::size_t ky = 0; ky < kh; ++ky) {
                std::size_t py = oy * stride + ky;
                if (py < pad || py - pad >= H) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  std::size_t px = ox * stride + kx;
                  if (px < pad || px - pad >= W) continue;
                  gin.data[(bc * H + py - pad) * W + px - pad] += go;
                }
              }
            }
          }
        }
        break;
      }
    }
    g = std::move(gin);
  }
  return grads;
}

DTensor logits(const Network& net, const LowPrecision& lp, const DTensor& x) {
  ForwardCache cache;
  std::vector<std::uint8_t> labels(x.shape.at(0), 0);
  forward(net, lp, x, labels, false, &cache);
  return cache.layers.empty() ? x : cache.layers.back().output;
}

void Optimizer::step(Network& net, const std::vector<Params>& grads) {
  if (velocity.size() != net.params.size()) velocity.assign(net.params.size(), {});
  auto update = [&](std::vector<double>& w, const std::vector<double>& g, std::vector<double>& v) {
    if (g.empty()) return;
    if (v.size() != w.size()) v.assign(w.size(), 0.0);
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = config.momentum * v[k] + g[k];
      w[k] -= config.lr * v[k];
    }
  };
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    auto& p = net.params[i];
    auto& v = velocity[i];
    update(p.weight, grads[i].weight, v.weight);
    update(p.bias, grads[i].bias, v.bias);
    update(p.gamma, grads[i].gamma, v.gamma);
    update(p.beta, grads[i].beta, v.beta);
  }
}

std::vector<EpochPoint> train(Network& net, const LowPrecision& lp, const toy::Dataset& data,
                              const TrainConfig& config, const Evaluator& evaluate) {
  if (data.size() == 0) fail(ErrorCode::empty_input, "training set is empty");
  if (config.batch_size == 0) fail(ErrorCode::invalid_argument, "batch size must be positive");
  std::vector<EpochPoint> curve;
  if (evaluate) curve.push_back({0, 0.0, evaluate(net)});

  Optimizer opt{config.sgd, {}};
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per = data.images.size() / data.size();

  auto gather = [&](std::size_t first, std::size_t count, DTensor& x, std::vector<std::uint8_t>& labels) {
    Shape s = data.images.shape;
    s[0] = count;
    x = DTensor(s);
    labels.resize(count);
    for (std::size_t k = 0; k < count; ++k) {
      std::size_t src = order[first + k];
      std::copy_n(data.images.data.begin() + static_cast<std::ptrdiff_t>(src * per), per,
                  x.data.begin() + static_cast<std::ptrdiff_t>(k * per));
      labels[k] = data.labels[src];
    }
  };

  // Reference for the divergence check: mean loss of the starting weights.
  double initial_loss = 0.0;
  std::size_t initial_batches = 0;
  for (std::size_t first = 0; config.epochs > 0 && first < order.size(); first += config.batch_size) {
    DTensor x;
    std::vector<std::uint8_t> labels;
    gather(first, std::min(config.batch_size, order.size() - first), x, labels);
    initial_loss += forward(net, lp, x, labels, true, nullptr);
    ++initial_batches;
  }
  if (initial_batches) initial_loss /= static_cast<double>(initial_batches);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
      DTensor x;
      std::vector<std::uint8_t> labels;
      gather(first, std::min(config.batch_size, order.size() - first), x, labels);
      ForwardCache cache;
      double loss = forward(net, lp, x, labels, true, &cache);
      auto grads = backward(net, cache);
      opt.step(net, grads);

      for (std::size_t i = 0; i < net.graph.layers.size(); ++i) {
        if (net.graph.layers[i].kind != LayerKind::batchnorm) continue;
        auto& p = net.params[i];
        const auto& lc = cache.layers[i];
        for (std::size_t c = 0; c < p.mean.size(); ++c) {
          p.mean[c] += config.bn_momentum * (lc.batch_mean[c] - p.mean[c]);
          p.var[c] += config.bn_momentum * (lc.batch_var[c] - p.var[c]);
        }
      }
      loss_sum += loss;
      ++steps;
    }
    double mean_loss = loss_sum / static_cast<double>(steps);
    if (mean_loss > 10.0 * initial_loss) {
      fail(ErrorCode::diverged, "training diverged in epoch " + std::to_string(epoch) + ": mean loss " +
                                    std::to_string(mean_loss) + " vs initial " +
                                    std::to_string(initial_loss));
    }
    curve.push_back({epoch, mean_loss, evaluate ? evaluate(net) : 0.0});
  }
  return curve;
}

GradCheckResult gradient_check(const Network& net, const DTensor& x,
                               std::span<const std::uint8_t> labels, double step, double floor) {
  LowPrecision identity;
  ForwardCache cache;
  forward(net, identity, x, labels, true, &cache);
  auto grads = backward(net, cache);

  GradCheckResult r;
  Network probe = net;
  auto check = [&](std::size_t layer, const char* field, std::vector<double>& values,
                   const std::vector<double>& analytic) {
    for (std::size_t k = 0; k < values.size(); ++k) {
      double saved = values[k];
      values[k] = saved + step;
      double up = forward(probe, identity, x, labels, true, nullptr);
      values[k] = saved - step;
      double down = forward(probe, identity, x, labels, true, nullptr);
      values[k] = saved;
      double numeric = (up - down) / (2 * step);
      double a = analytic.at(k);
      double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
      ++r.parameters;
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = net.graph.layers[layer].name + "." + field + "[" + std::to_string(k) + "]";
      }
    }
  };
  for (std::size_t i = 0; i < probe.params.size(); ++i) {
    auto& p = probe.params[i];
    check(i, "weight", p.weight, grads[i].weight);
    check(i, "bias", p.bias, grads[i].bias);
    check(i, "gamma", p.gamma, grads[i].gamma);
    check(i, "beta", p.beta, grads[i].beta);
  }
  return r;
}

}  // namespace qntz::train
