// SPDX-License-Identifier: Apache-2.0
#include "toy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>

#include "error.hpp"

namespace qntz::toy {

Tensor Dataset::slice(std::size_t first, std::size_t count) const {
  if (first + count > size()) fail(ErrorCode::invalid_argument, "dataset slice out of range");
  Shape s = images.shape;
  s[0] = count;
  const std::size_t per = shape_product(images.shape) / std::max<std::size_t>(size(), 1);
  auto begin = images.data.begin() + static_cast<std::ptrdiff_t>(first * per);
  return Tensor(s, std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(count * per)));
}

namespace {

std::vector<std::vector<double>> make_templates(const DatasetSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> center(2.0, spec.side - 3.0);
  std::uniform_real_distribution<double> width(1.2, 2.8);
  std::bernoulli_distribution positive(0.5);
  std::vector<std::vector<double>> templates(spec.classes);
  for (auto& t : templates) {
    t.assign(spec.side * spec.side, 0.0);
    for (int blob = 0; blob < 3; ++blob) {
      double cy = center(rng), cx = center(rng), s = width(rng);
      double sign = positive(rng) ? 1.0 : -1.0;
      for (std::size_t y = 0; y < spec.side; ++y) {
        for (std::size_t x = 0; x < spec.side; ++x) {
          double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          t[y * spec.side + x] += sign * std::exp(-d2 / (2 * s * s));
        }
      }
    }
    double peak = 0.0;
    for (double v : t) peak = std::max(peak, std::fabs(v));
    for (double& v : t) v /= peak;
  }
  return templates;
}

}  // namespace

Dataset make_dataset(const DatasetSpec& spec) {
  if (spec.classes == 0 || spec.classes > 256 || spec.side == 0) {
    fail(ErrorCode::invalid_argument, "dataset needs 1..256 classes and a positive side");
  }
  auto templates = make_templates(spec);
  std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + spec.split + 1);
  std::uniform_int_distribution<std::size_t> label(0, spec.classes - 1);
  std::uniform_int_distribution<int> shift(-spec.max_shift, spec.max_shift);
  std::uniform_real_distribution<double> gain(0.7, 1.3);
  std::uniform_real_distribution<double> offset(-0.3, 0.3);
  std::normal_distribution<double> noise(0.0, spec.noise);

  const std::size_t plane = spec.side * spec.side;
  Dataset d{Tensor({spec.samples, 1, spec.side, spec.side}), std::vector<std::uint8_t>(spec.samples)};
  for (std::size_t n = 0; n < spec.samples; ++n) {
    auto k = label(rng);
    int dy = shift(rng), dx = shift(rng);
    double g = gain(rng), o = offset(rng);
    d.labels[n] = static_cast<std::uint8_t>(k);
    float* img = d.images.data.data() + n * plane;
    const int side = static_cast<int>(spec.side);
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        int sy = y - dy, sx = x - dx;
        double v = (sy >= 0 && sy < side && sx >= 0 && sx < side)
                       ? templates[k][static_cast<std::size_t>(sy * side + sx)]
                       : 0.0;
        img[y * side + x] = static_cast<float>(g * v + o + noise(rng));
      }
    }
  }
  return d;
}

std::vector<io::TensorRecord> to_records(const Dataset& data, std::size_t batch) {
  if (batch == 0) fail(ErrorCode::invalid_argument, "batch size must be positive");
  std::vector<io::TensorRecord> out;
  for (std::size_t first = 0, k = 0; first < data.size(); first += batch, ++k) {
    std::size_t count = std::min(batch, data.size() - first);
    auto x = data.slice(first, count);
    out.push_back(io::make_f32("input." + std::to_string(k), x.shape, x.data));
    out.push_back(io::make_u8("label." + std::to_string(k), {count},
                              std::span(data.labels).subspan(first, count)));
  }
  return out;
}

namespace {

std::map<std::size_t, const io::TensorRecord*> indexed(std::span<const io::TensorRecord> records,
                                                        const std::string& prefix) {
  std::map<std::size_t, const io::TensorRecord*> out;
  for (const auto& r : records) {
    if (r.name.rfind(prefix, 0) != 0) continue;
    auto suffix = r.name.substr(prefix.size());
    if (suffix.empty() || !std::all_of(suffix.begin(), suffix.end(), ::isdigit)) continue;
    out[std::stoul(suffix)] = &r;
  }
  return out;
}

}  // namespace

std::vector<Tensor> input_batches(std::span<const io::TensorRecord> records) {
  std::vector<Tensor> out;
  for (const auto& [k, r] : indexed(records, "input.")) out.push_back(io::to_tensor(*r));
  if (out.empty()) fail(ErrorCode::empty_input, "container has no input.<n> tensors");
  return out;
}

Dataset from_records(std::span<const io::TensorRecord> records) {
  auto inputs = indexed(records, "input.");
  auto labels = indexed(records, "label.");
  if (inputs.empty()) fail(ErrorCode::empty_input, "container has no input.<n> tensors");
  Dataset d;
  for (const auto& [k, r] : inputs) {
    auto x = io::to_tensor(*r);
    if (x.rank() < 2) fail(ErrorCode::shape_mismatch, "'" + r->name + "' needs a batch axis");
    if (d.images.shape.empty()) {
      d.images.shape = x.shape;
      d.images.shape[0] = 0;
    } else if (!std::equal(x.shape.begin() + 1, x.shape.end(), d.images.shape.begin() + 1) ||
               x.rank() != d.images.rank()) {
      fail(ErrorCode::shape_mismatch, "'" + r->name + "' does not match the other batches");
    }
    d.images.shape[0] += x.shape[0];
    d.images.data.insert(d.images.data.end(), x.data.begin(), x.data.end());
    if (auto it = labels.find(k); it != labels.end()) {
      auto l = io::to_u8(*it->second);
      if (l.size() != x.shape[0]) {
        fail(ErrorCode::shape_mismatch, "'" + it->second->name + "' does not match its batch");
      }
      d.labels.insert(d.labels.end(), l.begin(), l.end());
    } else {
      d.labels.insert(d.labels.end(), x.shape[0], 0);
    }
  }
  return d;
}

std::vector<Tensor> batches(const Dataset& data, std::size_t batch) {
  std::vector<Tensor> out;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    out.push_back(data.slice(first, std::min(batch, data.size() - first)));
  }
  return out;
}

io::Model build_model(const Architecture& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  io::Model m;
  m.graph.input_name = "data";
  m.graph.input_shape = {1, arch.side, arch.side};

  auto add_bn = [&](const std::string& name, std::size_t channels) {
    io::LayerSpec l;
    l.kind = io::LayerKind::batchnorm;
    l.name = name;
    l.mean = name + ".mean";
    l.var = name + ".var";
    l.gamma = name + ".gamma";
    l.beta = name + ".beta";
    m.graph.layers.push_back(l);
    std::vector<float> zeros(channels, 0.0f), ones(channels, 1.0f);
    m.put(io::make_f32(l.mean, {channels}, zeros));
    m.put(io::make_f32(l.var, {channels}, ones));
    m.put(io::make_f32(l.gamma, {channels}, ones));
    m.put(io::make_f32(l.beta, {channels}, zeros));
  };
  auto add_relu = [&](const std::string& name) {
    io::LayerSpec l;
    l.kind = io::LayerKind::relu;
    l.name = name;
    m.graph.layers.push_back(l);
  };
  auto random_weights = [&](std::size_t count, std::size_t fan_in, double spread_range) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::uniform_real_distribution<double> spread(-spread_range, spread_range);
    std::vector<float> w(count);
    double gain = 1.0;
    for (std::size_t i = 0; i < count; ++i) {
      if (i % fan_in == 0) gain = spread_range > 0 ? std::exp2(spread(rng)) : 1.0;
      w[i] = static_cast<float>(gain * dist(rng));
    }
    return w;
  };
  auto add_conv = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t stride,
                      bool first) {
    io::LayerSpec l;
    l.kind = io::LayerKind::conv;
    l.name = name;
    l.weight = name + ".weight";
    l.kernel = 3;
    l.stride = stride;
    l.padding = 1;
    l.out_channels = out;
    l.first_conv = first;
    m.graph.layers.push_back(l);
    m.put(io::make_f32(*l.weight, {out, in, 3, 3}, random_weights(out * in * 9, in * 9, first ? 0.0 : arch.gain_spread)));
  };

  add_bn("bn0", 1);
  add_conv("c1", 1, arch.conv1, 1, true);
  add_bn("bn1", arch.conv1);
  add_relu("r1");
  add_conv("c2", arch.conv1, arch.conv2, 2, false);
  add_bn("bn2", arch.conv2);
  add_relu("r2");

  const std::size_t half = (arch.side + 1) / 2;
  const std::size_t features = arch.conv2 * half * half;
  io::LayerSpec fc;
  fc.kind = io::LayerKind::fc;
  fc.name = "f1";
  fc.weight = "f1.weight";
  fc.bias = "f1.bias";
  fc.out_channels = arch.classes;
  m.graph.layers.push_back(fc);
  m.put(io::make_f32(*fc.weight, {arch.classes, features}, random_weights(arch.classes * features, features, 0.0)));
  std::vector<float> bias(arch.classes, 0.0f);
  m.put(io::make_f32(*fc.bias, {arch.classes}, bias));

  io::validate_graph(m.graph, m.tensors);
  return m;
}

std::size_t argmax(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double accuracy(const engine::Plan& plan, const Dataset& data, std::size_t threads,
                std::size_t batch) {
  if (data.size() == 0) fail(ErrorCode::empty_input, "cannot score an empty dataset");
  std::size_t correct = 0;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    std::size_t count = std::min(batch, data.size() - first);
    auto out = plan.run(data.slice(first, count), {threads, false}).output;
    const std::size_t classes = out.size() / count;
    for (std::size_t i = 0; i < count; ++i) {
      auto row = std::span<const float>(out.data).subspan(i * classes, classes);
      if (argmax(row) == data.labels[first + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double accuracy(const io::Model& model, engine::Mode mode, const Dataset& data, std::size_t threads,
                std::size_t batch) {
  return accuracy(engine::Plan(model, mode), data, threads, batch);
}

}  // namespace qntz::toy
