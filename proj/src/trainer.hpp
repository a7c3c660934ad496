// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "model_io.hpp"
#include "ternarizer.hpp"

namespace qntz::toy {
struct Dataset;
}

namespace qntz::train {

using DTensor = BasicTensor<double>;

/// Full-precision parameters of one layer; unused vectors stay empty.
struct Params {
  std::vector<double> weight, bias, gamma, beta, mean, var;

  bool operator==(const Params&) const = default;
};

/// Sequential network with double-precision shadow parameters. Only float
/// models convert; every layer must consume the previous layer's output.
struct Network {
  io::ModelGraph graph;
  std::vector<Params> params;

  static Network from_model(const io::Model& model);
  /// Float model; batch-norm mean/var are the running statistics.
  io::Model to_model() const;
  std::size_t parameter_count() const;
};

/// What the forward pass quantizes. With everything off the pass is the
/// plain float network.
struct LowPrecision {
  bool weights = false;      // ternarize/4-bit non-first convs, 8-bit first conv; fc stays float
  bool activations = false;  // fake-quantize input, conv and batch-norm outputs
  ternary::QuantConfig quant;
  std::optional<int> input_exponent;
  std::vector<std::optional<int>> layer_exponents;  // index-aligned with the graph

  /// Formats copied from a calibrated graph with the same layer order.
  static LowPrecision from_calibrated(const io::ModelGraph& graph, const ternary::QuantConfig& quant);
};

struct LayerCache {
  DTensor input;
  DTensor pre;                   // output before activation quantization
  DTensor output;
  std::vector<double> weight;    // weights actually used
  std::optional<int> act_exponent;
  std::vector<double> batch_mean, batch_var, inv_std;
  DTensor xhat;
  std::vector<std::size_t> argmax;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  DTensor probabilities;  // softmax of the logits
  std::vector<std::uint8_t> labels;
};

/// Mean cross-entropy over the batch. `training` selects batch statistics in
/// batch norm (running statistics otherwise). x is [B, C, H, W].
double forward(const Network& net, const LowPrecision& lp, const DTensor& x,
               std::span<const std::uint8_t> labels, bool training, ForwardCache* cache);

/// Gradients with respect to the shadow parameters. Quantizers pass the
/// gradient straight through, except that activations outside the
/// representable range of their format receive none.
std::vector<Params> backward(const Network& net, const ForwardCache& cache);

/// Weights the forward pass uses for layer `index` under `lp`.
std::vector<double> effective_weight(const Network& net, const LowPrecision& lp, std::size_t index);

/// Plain logits for inference with running statistics.
DTensor logits(const Network& net, const LowPrecision& lp, const DTensor& x);

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
};

struct Optimizer {
  SgdConfig config;
  std::vector<Params> velocity;

  void step(Network& net, const std::vector<Params>& grads);
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  SgdConfig sgd;
  std::uint64_t seed = 1;
  double bn_momentum = 0.1;
};

struct EpochPoint {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double accuracy = 0.0;
};

/// Callback scoring the network after each epoch (and before the first, as
/// epoch 0). Returns an accuracy in [0, 1].
using Evaluator = std::function<double(const Network&)>;

/// Mini-batch SGD with momentum; batch norm in training mode. Data order is
/// drawn from `seed`. Throws diverged when an epoch's mean loss exceeds ten
/// times the mean loss of the starting weights, non_finite on a NaN loss.
std::vector<EpochPoint> train(Network& net, const LowPrecision& lp, const toy::Dataset& data,
                              const TrainConfig& config, const Evaluator& evaluate = nullptr);

DTensor to_double(const Tensor& t);
Tensor to_float(const DTensor& t);

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  std::size_t parameters = 0;
  double max_rel_error = 0.0;
  std::string worst;  // "<layer>.<field>[i]"
};

/// Central finite differences of the training-mode float loss against
/// backward() for every parameter. rel = |a - n| / max(|a|, |n|, floor).
GradCheckResult gradient_check(const Network& net, const DTensor& x,
                               std::span<const std::uint8_t> labels, double step = 1e-5,
                               double floor = 1e-7);

}  // namespace qntz::train
