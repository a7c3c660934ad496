// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fixed_point.hpp"
#include "kernels.hpp"
#include "model_io.hpp"

namespace qntz::engine {

/// float_ref:  float kernels on the stored weights (dequantized when quantized).
/// quant_ref:  float kernels on dequantized 8-bit operands; every layer output
///             is snapped to its activation format.
/// integer:    i8 activations, ternary/8-bit integer kernels, i32 accumulators.
enum class Mode { float_ref, quant_ref, integer };

const char* mode_name(Mode mode);
/// Accepts "float", "quant" and "int".
std::optional<Mode> parse_mode(std::string_view text);

struct LayerCounters {
  std::string name;
  OpCounters counters;
};

struct RunOptions {
  std::size_t threads = 1;
  bool dump_activations = false;
};

struct RunResult {
  Tensor output;                             // dequantized in integer mode
  std::vector<io::TensorRecord> activations; // act.<layer>, f32, when requested
  std::vector<LayerCounters> layers;         // one entry per layer (integer mode)
  OpCounters total;
};

/// Called with the layer index and that layer's float output.
using LayerObserver = std::function<void(std::size_t, const Tensor&)>;

/// Immutable compiled form of a model for one mode. Thread-safe to run
/// concurrently; scratch lives in each call.
class Plan {
 public:
  Plan(const io::Model& model, Mode mode);
  ~Plan();
  Plan(Plan&&) noexcept;
  Plan& operator=(Plan&&) noexcept;

  Mode mode() const;
  const io::ModelGraph& graph() const;

  /// `input` is [B, C, H, W] (or one CHW sample) matching the graph input.
  RunResult run(const Tensor& input, const RunOptions& options = {}) const;

  /// Float/quant_ref forward over layers [0, stop), reporting each output.
  /// Returns the output of layer stop-1 (the input when stop is 0).
  Tensor forward(const Tensor& input, std::size_t threads, const LayerObserver& observer,
                 std::size_t stop) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

RunResult run(const io::Model& model, const Tensor& input, Mode mode,
              const RunOptions& options = {});

/// Prepends a batch axis of 1 when `input` matches the per-sample shape.
Tensor as_batch(const Tensor& input, const Shape& sample_shape);

// ---------------------------------------------------------------------------
// Calibration and batch-norm recomputation
// ---------------------------------------------------------------------------

struct LayerCalibration {
  std::string name;  // graph input name for the input entry
  fxp::CalibrationStats stats;
  int exponent = 0;
};

/// Float forward passes over `batches` (dequantized weights); sets the input
/// format and the format of every conv, fc and batchnorm output from the
/// running max-abs. relu and pools keep their input's format.
std::vector<LayerCalibration> calibrate(io::Model& model, std::span<const Tensor> batches,
                                        std::size_t threads = 1);

/// Per-channel streaming mean/variance (Welford), merged across batches with
/// the parallel-axis update. Variance is the population variance.
struct ChannelMoments {
  std::vector<double> count, mean, m2;

  explicit ChannelMoments(std::size_t channels = 0)
      : count(channels, 0.0), mean(channels, 0.0), m2(channels, 0.0) {}
  /// x is [B, C, ...].
  void observe(const Tensor& x);
  void merge(const ChannelMoments& other);
  std::vector<double> variance() const;
};

struct BatchNormUpdate {
  std::string name;
  std::vector<double> old_mean, old_var, new_mean, new_var;
};

/// Replaces each batchnorm's mean/var, in graph order, with statistics of
/// its input under the current (quantized) weights. gamma/beta are kept.
std::vector<BatchNormUpdate> recompute_batchnorm(io::Model& model, std::span<const Tensor> batches,
                                                 std::size_t threads = 1);

/// Folded per-channel affine of a batchnorm layer: y = a * x + b.
struct Affine {
  std::vector<double> a, b;
};
Affine batchnorm_affine(const io::Model& model, const io::LayerSpec& layer);

}  // namespace qntz::engine
