// SPDX-License-Identifier: Apache-2.0
#include "ternarizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "error.hpp"
#include "fixed_point.hpp"
#include "parallel.hpp"

namespace qntz::ternary {

namespace {

inline std::int8_t sign_of(double w) { return w > 0 ? 1 : (w < 0 ? -1 : 0); }

void check_finite(std::span<const float> w) {
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) {
      fail(ErrorCode::non_finite, "non-finite weight at index " + std::to_string(i));
    }
  }
}

// Residual of the support-based reconstruction: members (rank < t) use
// sign(w), everything else is zeroed. Summed in index order.
double support_error(std::span<const float> w, std::span<const std::size_t> rank,
                     std::size_t t, double alpha) {
  double err = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double wi = w[i];
    double r = rank[i] < t ? wi - alpha * sign_of(wi) : wi;
    err += r * r;
  }
  return err;
}

// Relative slack used to shortlist candidates from the closed-form error
// before re-evaluating them exactly. Far above the cancellation error of
// S_n + S_t - 2 alpha A_t.
constexpr double kShortlistSlack = 1e-7;

}  // namespace

double rms_desc(std::span<const double> values) {
  if (values.empty()) return 0.0;
  if (values.front() == values.back()) return values.front();
  double sum = 0.0;
  for (double v : values) sum += v * v;
  return std::sqrt(sum / static_cast<double>(values.size()));
}

ThresholdResult select_threshold(std::span<const float> w) {
  const std::size_t n = w.size();
  if (n == 0) fail(ErrorCode::empty_input, "select_threshold on an empty filter");
  check_finite(w);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::fabs(w[a]) > std::fabs(w[b]);
  });
  std::vector<std::size_t> rank(n);
  std::vector<double> mags(n);
  for (std::size_t k = 0; k < n; ++k) {
    rank[order[k]] = k;
    mags[k] = std::fabs(static_cast<double>(w[order[k]]));
  }

  ThresholdResult result;
  result.codes.assign(n, 0);
  if (mags[0] == 0.0) return result;  // all-zero filter: degenerate candidate

  // Closed-form screen: err(t) = S_n - 2 alpha_t A_t + z_t alpha_t^2, where
  // z_t counts the nonzero weights among the top t (zeros keep code 0).
  std::vector<double> alpha(n + 1, 0.0), approx(n + 1, 0.0);
  double s_n = 0.0;
  for (double m : mags) s_n += m * m;
  double s_t = 0.0, a_t = 0.0, z_t = 0.0;
  double best_approx = s_n;
  approx[0] = s_n;
  for (std::size_t t = 1; t <= n; ++t) {
    s_t += mags[t - 1] * mags[t - 1];
    a_t += mags[t - 1];
    if (mags[t - 1] != 0.0) z_t += 1.0;
    alpha[t] = mags[0] == mags[t - 1] ? mags[0] : std::sqrt(s_t / static_cast<double>(t));
    approx[t] = s_n - 2.0 * alpha[t] * a_t + z_t * alpha[t] * alpha[t];
    best_approx = std::min(best_approx, approx[t]);
  }
  const double cutoff = best_approx + kShortlistSlack * s_n;

  // Exact residuals for the shortlist; ties go to the larger support.
  double best_error = support_error(w, rank, 0, 0.0);
  std::size_t best_t = 0;
  for (std::size_t t = 1; t <= n; ++t) {
    if (approx[t] > cutoff) continue;
    double err = support_error(w, rank, t, alpha[t]);
    if (err <= best_error) {
      best_error = err;
      best_t = t;
    }
  }

  result.support = best_t;
  result.tau = static_cast<double>(best_t) / static_cast<double>(n);
  result.alpha = alpha[best_t];
  result.error = best_error;
  for (std::size_t i = 0; i < n; ++i) {
    if (rank[i] < best_t) result.codes[i] = sign_of(w[i]);
  }
  return result;
}

double threshold_error(const FilterBlock& filters, double alpha,
                       std::vector<std::int8_t>* codes) {
  if (codes) codes->assign(filters.data.size(), 0);
  double err = 0.0;
  for (std::size_t i = 0; i < filters.data.size(); ++i) {
    double wi = filters.data[i];
    std::int8_t code = std::fabs(wi) >= alpha ? sign_of(wi) : 0;
    double r = wi - alpha * code;
    err += r * r;
    if (codes) (*codes)[i] = code;
  }
  return err;
}

double TernaryCluster::alpha_quantized() const {
  return fxp::dequantize_value(alpha_mantissa, alpha_exponent);
}

std::vector<std::size_t> TernaryCluster::filter_indices() const {
  std::vector<std::size_t> ids(count);
  std::iota(ids.begin(), ids.end(), first_filter);
  return ids;
}

TernaryCluster ternarize_cluster(const FilterBlock& filters, std::optional<int> scale_exponent) {
  const std::size_t n_filters = filters.count();
  if (n_filters == 0 || filters.filter_size == 0) {
    fail(ErrorCode::empty_input, "ternarize_cluster needs at least one non-empty filter");
  }
  if (filters.data.size() != n_filters * filters.filter_size) {
    fail(ErrorCode::shape_mismatch, "cluster data is not a whole number of filters");
  }

  std::vector<double> alphas(n_filters);
  for (std::size_t f = 0; f < n_filters; ++f) alphas[f] = select_threshold(filters.filter(f)).alpha;
  std::sort(alphas.begin(), alphas.end(), std::greater<>());

  TernaryCluster c;
  c.count = n_filters;
  c.filter_size = filters.filter_size;
  double best_error = 0.0;
  for (std::size_t t = 1; t <= n_filters; ++t) {
    double alpha_t = rms_desc(std::span<const double>(alphas).first(t));
    double err = threshold_error(filters, alpha_t);
    if (t == 1 || err <= best_error) {
      best_error = err;
      c.t_star = t;
      c.alpha_exact = alpha_t;
    }
  }
  c.error = threshold_error(filters, c.alpha_exact, &c.codes);

  c.alpha_exponent = scale_exponent.value_or(fxp::scale_exponent_for(c.alpha_exact));
  c.alpha_mantissa = fxp::quantize_scale(c.alpha_exact, c.alpha_exponent);
  return c;
}

TernaryCluster ternarize_cluster(std::span<const std::vector<float>> filters,
                                 std::optional<int> scale_exponent) {
  if (filters.empty()) fail(ErrorCode::empty_input, "ternarize_cluster needs N >= 1 filters");
  const std::size_t size = filters.front().size();
  std::vector<float> flat;
  flat.reserve(size * filters.size());
  for (std::size_t f = 0; f < filters.size(); ++f) {
    if (filters[f].size() != size) {
      fail(ErrorCode::shape_mismatch, "filter " + std::to_string(f) + " has " +
                                          std::to_string(filters[f].size()) + " weights, expected " +
                                          std::to_string(size));
    }
    flat.insert(flat.end(), filters[f].begin(), filters[f].end());
  }
  return ternarize_cluster(FilterBlock{flat, size}, scale_exponent);
}

void QuantConfig::validate() const {
  if (cluster_size == 0) fail(ErrorCode::invalid_argument, "cluster size must be positive");
  if (weight_bits != 2 && weight_bits != 4) {
    fail(ErrorCode::invalid_argument, "weight bits must be 2 or 4, got " + std::to_string(weight_bits));
  }
}

double Int4Cluster::scale_quantized() const {
  return fxp::dequantize_value(scale_mantissa, scale_exponent);
}

std::vector<std::size_t> Int4Cluster::filter_indices() const {
  std::vector<std::size_t> ids(count);
  std::iota(ids.begin(), ids.end(), first_filter);
  return ids;
}

Int4Cluster quantize_cluster_int4(const FilterBlock& filters, std::size_t first_filter) {
  check_finite(filters.data);
  Int4Cluster c;
  c.first_filter = first_filter;
  c.count = filters.count();
  c.filter_size = filters.filter_size;
  double max_abs = 0.0;
  for (float w : filters.data) max_abs = std::max(max_abs, std::fabs(static_cast<double>(w)));
  c.scale_exact = max_abs / 7.0;
  c.codes.assign(filters.data.size(), 0);
  for (std::size_t i = 0; i < filters.data.size(); ++i) {
    double w = filters.data[i];
    if (c.scale_exact > 0) {
      c.codes[i] = static_cast<std::int8_t>(std::clamp(fxp::round_half_even(w / c.scale_exact), -7.0, 7.0));
    }
    double r = w - c.scale_exact * c.codes[i];
    c.error += r * r;
  }
  c.scale_exponent = fxp::scale_exponent_for(c.scale_exact);
  c.scale_mantissa = fxp::quantize_scale(c.scale_exact, c.scale_exponent);
  return c;
}

namespace {

struct LayerView {
  std::size_t filters = 0;
  std::size_t filter_size = 0;
};

LayerView layer_view(const Tensor& weights, const QuantConfig& config) {
  config.validate();
  if (weights.rank() != 4 && weights.rank() != 2) {
    fail(ErrorCode::invalid_argument,
         "weights must be rank 4 (conv) or 2 (fc), got " + shape_to_string(weights.shape));
  }
  LayerView v{weights.shape[0], weights.size() / weights.shape[0]};
  if (v.filter_size == 0) fail(ErrorCode::empty_input, "empty filters");
  return v;
}

double energy(const Tensor& w) {
  double e = 0.0;
  for (float x : w.data) e += static_cast<double>(x) * x;
  return e;
}

double residual(const Tensor& w, const Tensor& approx) {
  double e = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    double r = static_cast<double>(w.data[i]) - approx.data[i];
    e += r * r;
  }
  return e;
}

}  // namespace

LayerQuantization quantize_layer(const Tensor& weights, const QuantConfig& config) {
  if (config.weight_bits == 4) return quantize_layer_int4(weights, config);
  auto view = layer_view(weights, config);
  const std::size_t n = config.cluster_size;
  const std::size_t k = (view.filters + n - 1) / n;

  LayerQuantization q;
  q.weight_bits = 2;
  q.cluster_size = n;
  q.shape = weights.shape;
  q.ternary.resize(k);
  parallel_for(k, config.threads, [&](std::size_t j) {
    std::size_t first = j * n;
    std::size_t count = std::min(n, view.filters - first);
    FilterBlock block{std::span<const float>(weights.data).subspan(first * view.filter_size,
                                                                   count * view.filter_size),
                      view.filter_size};
    q.ternary[j] = ternarize_cluster(block);
    q.ternary[j].first_filter = first;
  });

  double max_alpha = 0.0;
  for (const auto& c : q.ternary) {
    max_alpha = std::max(max_alpha, c.alpha_exact);
    q.error_exact += c.error;
  }
  q.scale_exponent = fxp::scale_exponent_for(max_alpha);
  for (auto& c : q.ternary) {
    c.alpha_exponent = q.scale_exponent;
    c.alpha_mantissa = fxp::quantize_scale(c.alpha_exact, q.scale_exponent);
  }
  q.weight_energy = energy(weights);
  q.error_quantized = residual(weights, q.dequantized());
  return q;
}

LayerQuantization quantize_layer_int4(const Tensor& weights, const QuantConfig& config) {
  auto view = layer_view(weights, config);
  const std::size_t n = config.cluster_size;
  const std::size_t k = (view.filters + n - 1) / n;

  LayerQuantization q;
  q.weight_bits = 4;
  q.cluster_size = n;
  q.shape = weights.shape;
  q.int4.resize(k);
  parallel_for(k, config.threads, [&](std::size_t j) {
    std::size_t first = j * n;
    std::size_t count = std::min(n, view.filters - first);
    FilterBlock block{std::span<const float>(weights.data).subspan(first * view.filter_size,
                                                                   count * view.filter_size),
                      view.filter_size};
    q.int4[j] = quantize_cluster_int4(block, first);
  });

  double max_scale = 0.0;
  for (const auto& c : q.int4) {
    max_scale = std::max(max_scale, c.scale_exact);
    q.error_exact += c.error;
  }
  q.scale_exponent = fxp::scale_exponent_for(max_scale);
  for (auto& c : q.int4) {
    c.scale_exponent = q.scale_exponent;
    c.scale_mantissa = fxp::quantize_scale(c.scale_exact, q.scale_exponent);
  }
  q.weight_energy = energy(weights);
  q.error_quantized = residual(weights, q.dequantized());
  return q;
}

std::size_t LayerQuantization::cluster_count() const {
  return weight_bits == 4 ? int4.size() : ternary.size();
}

std::vector<std::int8_t> LayerQuantization::codes() const {
  std::vector<std::int8_t> out;
  out.reserve(shape_product(shape));
  if (weight_bits == 4) {
    for (const auto& c : int4) out.insert(out.end(), c.codes.begin(), c.codes.end());
  } else {
    for (const auto& c : ternary) out.insert(out.end(), c.codes.begin(), c.codes.end());
  }
  return out;
}

std::vector<std::int8_t> LayerQuantization::scale_mantissas() const {
  std::vector<std::int8_t> out;
  if (weight_bits == 4) {
    for (const auto& c : int4) out.push_back(static_cast<std::int8_t>(c.scale_mantissa));
  } else {
    for (const auto& c : ternary) out.push_back(static_cast<std::int8_t>(c.alpha_mantissa));
  }
  return out;
}

std::vector<std::int32_t> LayerQuantization::filter_scale_mantissas() const {
  std::vector<std::int32_t> out(shape.at(0));
  auto fill = [&](std::size_t first, std::size_t count, std::int32_t m) {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(first), count, m);
  };
  if (weight_bits == 4) {
    for (const auto& c : int4) fill(c.first_filter, c.count, c.scale_mantissa);
  } else {
    for (const auto& c : ternary) fill(c.first_filter, c.count, c.alpha_mantissa);
  }
  return out;
}

Tensor LayerQuantization::dequantized() const {
  Tensor out(shape);
  const std::size_t filter_size = shape_product(shape) / shape.at(0);
  auto codes_all = codes();
  auto scales = filter_scale_mantissas();
  for (std::size_t f = 0; f < shape[0]; ++f) {
    double s = fxp::dequantize_value(scales[f], scale_exponent);
    for (std::size_t i = 0; i < filter_size; ++i) {
      out.data[f * filter_size + i] = static_cast<float>(s * codes_all[f * filter_size + i]);
    }
  }
  return out;
}

Tensor Int8Weights::dequantized() const {
  Tensor out(shape);
  for (std::size_t i = 0; i < mantissas.size(); ++i) {
    out.data[i] = static_cast<float>(fxp::dequantize_value(mantissas[i], exponent));
  }
  return out;
}

Int8Weights quantize_weights_int8(const Tensor& weights) {
  check_finite(weights.data);
  double max_abs = 0.0;
  for (float w : weights.data) max_abs = std::max(max_abs, std::fabs(static_cast<double>(w)));
  Int8Weights q{weights.shape, {}, fxp::exponent_for_max_abs(max_abs)};
  q.mantissas.resize(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    q.mantissas[i] = fxp::quantize_value(weights.data[i], q.exponent);
  }
  return q;
}

}  // namespace qntz::ternary
