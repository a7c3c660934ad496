// SPDX-License-Identifier: Apache-2.0
#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "error.hpp"
#include "fixed_point.hpp"
#include "parallel.hpp"

namespace qntz::engine {

namespace {

std::size_t spatial_size(const Shape& shape) {
  std::size_t s = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) s *= shape[i];
  return s;
}

void check_bias(std::size_t size, std::size_t out_channels) {
  if (size != 0 && size != out_channels) {
    fail(ErrorCode::shape_mismatch, "bias has " + std::to_string(size) + " entries for " +
                                        std::to_string(out_channels) + " filters");
  }
}

// Signed offset of a kernel tap into the unpadded input; out of range means padding.
inline bool tap(std::size_t o, std::size_t k, const ConvGeometry& g, std::size_t extent,
                std::size_t& pos) {
  std::size_t p = o * g.stride + k;
  if (p < g.padding || p - g.padding >= extent) return false;
  pos = p - g.padding;
  return true;
}

ConvGeometry pool_geometry(const Shape& in, const PoolSpec& spec) {
  if (in.size() != 4) fail(ErrorCode::shape_mismatch, "pooling needs NCHW input, got " + shape_to_string(in));
  ConvGeometry g;
  g.batch = in[0];
  g.in_channels = g.out_channels = in[1];
  g.in_h = in[2];
  g.in_w = in[3];
  if (spec.global) {
    g.kernel = std::max(g.in_h, g.in_w);
    g.stride = 1;
    g.out_h = g.out_w = 1;
    return g;
  }
  g.kernel = spec.kernel;
  g.stride = spec.stride;
  g.padding = spec.padding;
  if (g.stride == 0 || g.in_h + 2 * g.padding < g.kernel || g.in_w + 2 * g.padding < g.kernel) {
    fail(ErrorCode::shape_mismatch, "pool window does not fit input " + shape_to_string(in));
  }
  g.out_h = (g.in_h + 2 * g.padding - g.kernel) / g.stride + 1;
  g.out_w = (g.in_w + 2 * g.padding - g.kernel) / g.stride + 1;
  return g;
}

// Window bounds for global pooling cover the plane exactly; otherwise the
// nominal window with padding.
template <typename Visit>
void for_window(const ConvGeometry& g, const PoolSpec& spec, std::size_t oy, std::size_t ox,
                Visit&& visit) {
  std::size_t kh = spec.global ? g.in_h : g.kernel;
  std::size_t kw = spec.global ? g.in_w : g.kernel;
  for (std::size_t ky = 0; ky < kh; ++ky) {
    std::size_t iy;
    if (!tap(oy, ky, g, g.in_h, iy)) continue;
    for (std::size_t kx = 0; kx < kw; ++kx) {
      std::size_t ix;
      if (!tap(ox, kx, g, g.in_w, ix)) continue;
      visit(iy * g.in_w + ix);
    }
  }
}

std::size_t window_count(const ConvGeometry& g, const PoolSpec& spec) {
  return spec.global ? g.in_h * g.in_w : g.kernel * g.kernel;
}

std::int64_t round_div_half_away(std::int64_t num, std::int64_t den) {
  std::int64_t mag = num < 0 ? -num : num;
  std::int64_t q = (2 * mag + den) / (2 * den);
  return num < 0 ? -q : q;
}

}  // namespace

double snap_to_format(double value, int exponent) {
  double m = std::ldexp(value, -exponent);
  double r = std::floor(std::fabs(m) + 0.5);
  r = m < 0 ? -r : r;
  r = std::clamp(r, double{fxp::kMantissaMin}, double{fxp::kMantissaMax});
  return std::ldexp(r, exponent);
}

ConvGeometry conv_geometry(const Shape& input, const Shape& weights, std::size_t stride,
                           std::size_t padding) {
  if (input.size() != 4) fail(ErrorCode::shape_mismatch, "conv input must be NCHW, got " + shape_to_string(input));
  if (weights.size() != 4 || weights[2] != weights[3]) {
    fail(ErrorCode::shape_mismatch, "conv weights must be [d,c,K,K], got " + shape_to_string(weights));
  }
  if (weights[1] != input[1]) {
    fail(ErrorCode::shape_mismatch, "conv weights expect " + std::to_string(weights[1]) +
                                        " input channels, input has " + std::to_string(input[1]));
  }
  ConvGeometry g;
  g.batch = input[0];
  g.in_channels = input[1];
  g.in_h = input[2];
  g.in_w = input[3];
  g.out_channels = weights[0];
  g.kernel = weights[2];
  g.stride = stride;
  g.padding = padding;
  if (stride == 0 || g.in_h + 2 * padding < g.kernel || g.in_w + 2 * padding < g.kernel) {
    fail(ErrorCode::shape_mismatch, "conv window does not fit input " + shape_to_string(input));
  }
  g.out_h = (g.in_h + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - g.kernel) / stride + 1;
  return g;
}

Tensor conv_float(const Tensor& input, const Tensor& weights, std::span<const double> bias,
                  std::size_t stride, std::size_t padding, std::size_t threads,
                  std::optional<int> requant_exponent) {
  auto g = conv_geometry(input.shape, weights.shape, stride, padding);
  check_bias(bias.size(), g.out_channels);
  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t plane = g.in_h * g.in_w;
  const std::size_t kk = g.kernel * g.kernel;

  parallel_for(g.batch * g.out_channels, threads, [&](std::size_t bf) {
    std::size_t b = bf / g.out_channels, f = bf % g.out_channels;
    const float* in_b = input.data.data() + b * g.in_channels * plane;
    const float* w_f = weights.data.data() + f * g.in_channels * kk;
    float* out_bf = out.data.data() + bf * g.out_h * g.out_w;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        double acc = 0.0;
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            std::size_t iy;
            if (!tap(oy, ky, g, g.in_h, iy)) continue;
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              std::size_t ix;
              if (!tap(ox, kx, g, g.in_w, ix)) continue;
              acc += static_cast<double>(w_f[(c * g.kernel + ky) * g.kernel + kx]) *
                     in_b[c * plane + iy * g.in_w + ix];
            }
          }
        }
        if (!bias.empty()) acc += bias[f];
        if (requant_exponent) acc = snap_to_format(acc, *requant_exponent);
        out_bf[oy * g.out_w + ox] = static_cast<float>(acc);
      }
    }
  });
  return out;
}

QTensor conv_ternary_int(const QTensor& input, const TernaryConvWeights& w, std::size_t stride,
                         std::size_t padding, int out_exponent, OpCounters* counters,
                         std::size_t threads) {
  auto g = conv_geometry(input.shape, w.shape, stride, padding);
  check_bias(w.bias.size(), g.out_channels);
  if (w.codes.size() != shape_product(w.shape) || w.scale_mantissa.size() != g.out_channels) {
    fail(ErrorCode::shape_mismatch, "ternary layer arrays do not match its shape");
  }
  if (w.group_size == 0) fail(ErrorCode::invalid_argument, "ternary group size must be positive");
  for (std::size_t i = 0; i < w.codes.size(); ++i) {
    if (w.codes[i] < -1 || w.codes[i] > 1) {
      fail(ErrorCode::invalid_code, "non-ternary weight code " + std::to_string(w.codes[i]) +
                                        " at index " + std::to_string(i));
    }
  }
  const std::size_t kk = g.kernel * g.kernel;
  const std::size_t group = std::min(w.group_size, g.in_channels);
  // Each group accumulates at most group*K^2 magnitudes of 128 in 32 bits.
  if (static_cast<std::uint64_t>(group) * kk * 128 >
      static_cast<std::uint64_t>(std::numeric_limits<std::int32_t>::max())) {
    fail(ErrorCode::accumulator_overflow,
         "ternary group of " + std::to_string(group * kk) + " taps can overflow a 32-bit accumulator");
  }

  QTensor out{{g.batch, g.out_channels, g.out_h, g.out_w},
              std::vector<std::int8_t>(g.batch * g.out_channels * g.out_h * g.out_w),
              out_exponent};
  const int shift = input.exponent + w.scale_exponent - out_exponent;
  const std::size_t plane = g.in_h * g.in_w;
  const std::size_t groups = (g.in_channels + group - 1) / group;
  std::vector<OpCounters> tallies(g.batch * g.out_channels);

  parallel_for(g.batch * g.out_channels, threads, [&](std::size_t bf) {
    std::size_t b = bf / g.out_channels, f = bf % g.out_channels;
    const std::int8_t* in_b = input.data.data() + b * g.in_channels * plane;
    const std::int8_t* w_f = w.codes.data() + f * g.in_channels * kk;
    const std::int64_t scale = w.scale_mantissa[f];
    OpCounters& tally = tallies[bf];
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        std::int64_t total = 0;
        for (std::size_t gi = 0; gi < groups; ++gi) {
          std::size_t c0 = gi * group, c1 = std::min(g.in_channels, c0 + group);
          std::int32_t acc = 0;
          for (std::size_t c = c0; c < c1; ++c) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              std::size_t iy;
              if (!tap(oy, ky, g, g.in_h, iy)) continue;
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                std::size_t ix;
                if (!tap(ox, kx, g, g.in_w, ix)) continue;
                std::int8_t code = w_f[(c * g.kernel + ky) * g.kernel + kx];
                std::int32_t x = in_b[c * plane + iy * g.in_w + ix];
                if (code > 0) {
                  acc += x;
                } else if (code < 0) {
                  acc -= x;
                }
              }
            }
          }
          tally.accs_ternary += (c1 - c0) * kk;
          total += acc * scale;
          tally.mults_8bit += 1;
        }
        if (!w.bias.empty()) total += w.bias[f];
        out.data[bf * g.out_h * g.out_w + oy * g.out_w + ox] = fxp::requantize_product(total, shift);
        tally.overhead += 1;
      }
    }
  });
  if (counters) {
    for (const auto& t : tallies) *counters += t;
  }
  return out;
}

QTensor conv_int8w(const QTensor& input, const Int8ConvWeights& w, std::size_t stride,
                   std::size_t padding, int out_exponent, OpCounters* counters,
                   std::size_t threads) {
  auto g = conv_geometry(input.shape, w.shape, stride, padding);
  check_bias(w.bias.size(), g.out_channels);
  if (w.weights.size() != shape_product(w.shape) || w.scale_mantissa.size() != g.out_channels) {
    fail(ErrorCode::shape_mismatch, "int8 layer arrays do not match its shape");
  }
  const std::size_t kk = g.kernel * g.kernel;
  if (static_cast<std::uint64_t>(g.taps()) * 128 * 128 >
      static_cast<std::uint64_t>(std::numeric_limits<std::int32_t>::max())) {
    fail(ErrorCode::accumulator_overflow,
         std::to_string(g.taps()) + " 8-bit products can overflow a 32-bit accumulator");
  }

  QTensor out{{g.batch, g.out_channels, g.out_h, g.out_w},
              std::vector<std::int8_t>(g.batch * g.out_channels * g.out_h * g.out_w),
              out_exponent};
  const int shift = input.exponent + w.exponent - out_exponent;
  const std::size_t plane = g.in_h * g.in_w;
  std::vector<OpCounters> tallies(g.batch * g.out_channels);

  parallel_for(g.batch * g.out_channels, threads, [&](std::size_t bf) {
    std::size_t b = bf / g.out_channels, f = bf % g.out_channels;
    const std::int8_t* in_b = input.data.data() + b * g.in_channels * plane;
    const std::int8_t* w_f = w.weights.data() + f * g.in_channels * kk;
    OpCounters& tally = tallies[bf];
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        std::int32_t acc = 0;
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            std::size_t iy;
            if (!tap(oy, ky, g, g.in_h, iy)) continue;
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              std::size_t ix;
              if (!tap(ox, kx, g, g.in_w, ix)) continue;
              acc += std::int32_t{w_f[(c * g.kernel + ky) * g.kernel + kx]} *
                     in_b[c * plane + iy * g.in_w + ix];
            }
          }
        }
        tally.mults_8bit += g.taps();
        tally.accs_8bit += g.taps();
        std::int64_t total = static_cast<std::int64_t>(acc) * w.scale_mantissa[f];
        if (!w.bias.empty()) total += w.bias[f];
        out.data[bf * g.out_h * g.out_w + oy * g.out_w + ox] = fxp::requantize_product(total, shift);
        tally.overhead += 1;
      }
    }
  });
  if (counters) {
    for (const auto& t : tallies) *counters += t;
  }
  return out;
}

Tensor affine_float(const Tensor& input, std::span<const double> a, std::span<const double> b,
                    std::optional<int> requant_exponent) {
  if (input.rank() < 2 || a.size() != input.shape[1] || b.size() != input.shape[1]) {
    fail(ErrorCode::shape_mismatch, "affine parameters do not match input " + shape_to_string(input.shape));
  }
  Tensor out(input.shape);
  const std::size_t channels = input.shape[1], spatial = spatial_size(input.shape);
  for (std::size_t i = 0; i < input.size(); ++i) {
    std::size_t c = (i / spatial) % channels;
    double y = a[c] * input.data[i] + b[c];
    if (requant_exponent) y = snap_to_format(y, *requant_exponent);
    out.data[i] = static_cast<float>(y);
  }
  return out;
}

QTensor affine_int(const QTensor& input, std::span<const std::int32_t> a_mantissa,
                   std::span<const std::int64_t> b_product, std::span<const int> a_exponent,
                   int out_exponent, OpCounters* counters) {
  if (input.shape.size() < 2 || a_mantissa.size() != input.shape[1] ||
      b_product.size() != input.shape[1] || a_exponent.size() != input.shape[1]) {
    fail(ErrorCode::shape_mismatch, "affine parameters do not match input " + shape_to_string(input.shape));
  }
  QTensor out{input.shape, std::vector<std::int8_t>(input.size()), out_exponent};
  const std::size_t channels = input.shape[1], spatial = spatial_size(input.shape);
  for (std::size_t i = 0; i < input.size(); ++i) {
    std::size_t c = (i / spatial) % channels;
    std::int64_t p = static_cast<std::int64_t>(input.data[i]) * a_mantissa[c] + b_product[c];
    out.data[i] = fxp::requantize_product(p, input.exponent + a_exponent[c] - out_exponent);
  }
  if (counters) counters->overhead += input.size();
  return out;
}

Tensor relu_float(const Tensor& input) {
  Tensor out(input.shape);
  for (std::size_t i = 0; i < input.size(); ++i) out.data[i] = std::max(input.data[i], 0.0f);
  return out;
}

QTensor relu_int(const QTensor& input) {
  QTensor out = input;
  for (auto& m : out.data) m = std::max<std::int8_t>(m, 0);
  return out;
}

Tensor maxpool_float(const Tensor& input, const PoolSpec& spec) {
  auto g = pool_geometry(input.shape, spec);
  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t plane = g.in_h * g.in_w;
  for (std::size_t bc = 0; bc < g.batch * g.in_channels; ++bc) {
    const float* in = input.data.data() + bc * plane;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        float best = -std::numeric_limits<float>::infinity();
        for_window(g, spec, oy, ox, [&](std::size_t idx) { best = std::max(best, in[idx]); });
        out.data[(bc * g.out_h + oy) * g.out_w + ox] = best;
      }
    }
  }
  return out;
}

QTensor maxpool_int(const QTensor& input, const PoolSpec& spec) {
  auto g = pool_geometry(input.shape, spec);
  QTensor out{{g.batch, g.out_channels, g.out_h, g.out_w},
              std::vector<std::int8_t>(g.batch * g.out_channels * g.out_h * g.out_w),
              input.exponent};
  const std::size_t plane = g.in_h * g.in_w;
  for (std::size_t bc = 0; bc < g.batch * g.in_channels; ++bc) {
    const std::int8_t* in = input.data.data() + bc * plane;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        std::int8_t best = std::numeric_limits<std::int8_t>::min();
        for_window(g, spec, oy, ox, [&](std::size_t idx) { best = std::max(best, in[idx]); });
        out.data[(bc * g.out_h + oy) * g.out_w + ox] = best;
      }
    }
  }
  return out;
}

Tensor avgpool_float(const Tensor& input, const PoolSpec& spec, std::optional<int> requant_exponent) {
  auto g = pool_geometry(input.shape, spec);
  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t plane = g.in_h * g.in_w;
  const double count = static_cast<double>(window_count(g, spec));
  for (std::size_t bc = 0; bc < g.batch * g.in_channels; ++bc) {
    const float* in = input.data.data() + bc * plane;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        double sum = 0.0;
        for_window(g, spec, oy, ox, [&](std::size_t idx) { sum += in[idx]; });
        double avg = sum / count;
        if (requant_exponent) avg = snap_to_format(avg, *requant_exponent);
        out.data[(bc * g.out_h + oy) * g.out_w + ox] = static_cast<float>(avg);
      }
    }
  }
  return out;
}

QTensor avgpool_int(const QTensor& input, const PoolSpec& spec) {
  auto g = pool_geometry(input.shape, spec);
  QTensor out{{g.batch, g.out_channels, g.out_h, g.out_w},
              std::vector<std::int8_t>(g.batch * g.out_channels * g.out_h * g.out_w),
              input.exponent};
  const std::size_t plane = g.in_h * g.in_w;
  const auto count = static_cast<std::int64_t>(window_count(g, spec));
  for (std::size_t bc = 0; bc < g.batch * g.in_channels; ++bc) {
    const std::int8_t* in = input.data.data() + bc * plane;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        std::int64_t sum = 0;
        for_window(g, spec, oy, ox, [&](std::size_t idx) { sum += in[idx]; });
        out.data[(bc * g.out_h + oy) * g.out_w + ox] =
            static_cast<std::int8_t>(round_div_half_away(sum, count));
      }
    }
  }
  return out;
}

}  // namespace qntz::engine
