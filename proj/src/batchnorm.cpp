// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "engine.hpp"
#include "error.hpp"

namespace qntz::engine {

void ChannelMoments::observe(const Tensor& x) {
  if (x.rank() < 2 || x.shape[1] != mean.size()) {
    fail(ErrorCode::shape_mismatch, "statistics over " + std::to_string(mean.size()) +
                                        " channels cannot observe " + shape_to_string(x.shape));
  }
  const std::size_t channels = x.shape[1];
  const std::size_t spatial = x.size() / (x.shape[0] * channels);
  for (std::size_t b = 0; b < x.shape[0]; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const float* p = x.data.data() + (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        count[c] += 1.0;
        double delta = p[s] - mean[c];
        mean[c] += delta / count[c];
        m2[c] += delta * (p[s] - mean[c]);
      }
    }
  }
}

void ChannelMoments::merge(const ChannelMoments& other) {
  if (other.mean.size() != mean.size()) {
    fail(ErrorCode::shape_mismatch, "cannot merge statistics over different channel counts");
  }
  for (std::size_t c = 0; c < mean.size(); ++c) {
    double n = count[c] + other.count[c];
    if (other.count[c] == 0.0) continue;
    double delta = other.mean[c] - mean[c];
    mean[c] += delta * other.count[c] / n;
    m2[c] += other.m2[c] + delta * delta * count[c] * other.count[c] / n;
    count[c] = n;
  }
}

std::vector<double> ChannelMoments::variance() const {
  std::vector<double> v(mean.size(), 0.0);
  for (std::size_t c = 0; c < v.size(); ++c) {
    if (count[c] > 0) v[c] = std::max(0.0, m2[c] / count[c]);
  }
  return v;
}

std::vector<LayerCalibration> calibrate(io::Model& model, std::span<const Tensor> batches,
                                        std::size_t threads) {
  if (batches.empty()) fail(ErrorCode::empty_input, "calibration needs at least one batch");
  Plan plan(model, Mode::float_ref);
  const auto& layers = model.graph.layers;
  fxp::CalibrationStats input_stats;
  std::vector<fxp::CalibrationStats> stats(layers.size());
  for (const auto& batch : batches) {
    auto x = as_batch(batch, model.graph.input_shape);
    input_stats.observe(x.data, x.shape[0]);
    plan.forward(x, threads,
                 [&](std::size_t i, const Tensor& out) { stats[i].observe(out.data, out.shape[0]); },
                 layers.size());
  }

  std::vector<LayerCalibration> report;
  model.graph.input_exponent = input_stats.format().exponent;
  report.push_back({model.graph.input_name, input_stats, *model.graph.input_exponent});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = model.graph.layers[i];
    if (is_compute(l.kind) || l.kind == io::LayerKind::batchnorm) {
      l.act_exponent = stats[i].format().exponent;
      report.push_back({l.name, stats[i], *l.act_exponent});
    } else {
      l.act_exponent.reset();
    }
  }
  return report;
}

std::vector<BatchNormUpdate> recompute_batchnorm(io::Model& model, std::span<const Tensor> batches,
                                                 std::size_t threads) {
  if (batches.empty()) fail(ErrorCode::empty_input, "batch-norm recomputation needs at least one batch");
  std::vector<BatchNormUpdate> updates;
  for (std::size_t i = 0; i < model.graph.layers.size(); ++i) {
    const auto& l = model.graph.layers[i];
    if (l.kind != io::LayerKind::batchnorm) continue;
    // Rebuilt per layer so each one sees the statistics already fixed upstream.
    Plan plan(model, Mode::float_ref);
    auto producer = io::producer_index(model.graph, i);
    std::size_t stop = producer ? *producer + 1 : 0;

    auto old_mean = io::to_tensor(model.get(l.mean));
    auto old_var = io::to_tensor(model.get(l.var));
    ChannelMoments total(old_mean.size());
    for (const auto& batch : batches) {
      ChannelMoments part(old_mean.size());
      part.observe(plan.forward(batch, threads, nullptr, stop));
      total.merge(part);
    }

    BatchNormUpdate u{l.name,
                      {old_mean.data.begin(), old_mean.data.end()},
                      {old_var.data.begin(), old_var.data.end()},
                      total.mean,
                      total.variance()};
    std::vector<float> mean(u.new_mean.begin(), u.new_mean.end());
    std::vector<float> var(u.new_var.begin(), u.new_var.end());
    model.put(io::make_f32(l.mean, old_mean.shape, mean));
    model.put(io::make_f32(l.var, old_var.shape, var));
    updates.push_back(std::move(u));
  }
  return updates;
}

}  // namespace qntz::engine
