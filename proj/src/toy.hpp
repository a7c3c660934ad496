// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "engine.hpp"
#include "model_io.hpp"

// Synthetic 10-class image task and the small conv net used to exercise the
// whole pipeline at desk scale.
namespace qntz::toy {

struct DatasetSpec {
  std::uint64_t seed = 7;   // class templates
  std::uint64_t split = 0;  // sample stream; train and test use different splits
  std::size_t classes = 10;
  std::size_t samples = 1000;
  std::size_t side = 16;
  double noise = 0.25;
  int max_shift = 2;
};

struct Dataset {
  Tensor images;  // [n, 1, side, side]
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  Tensor slice(std::size_t first, std::size_t count) const;
};

/// Bit-identical for identical specs.
Dataset make_dataset(const DatasetSpec& spec);

/// Records `input.<k>` (f32 [b, 1, side, side]) and `label.<k>` (u8 [b]).
std::vector<io::TensorRecord> to_records(const Dataset& data, std::size_t batch);
/// Inverse of to_records; labels are optional (all zero when absent).
Dataset from_records(std::span<const io::TensorRecord> records);
/// The `input.<k>` tensors in index order.
std::vector<Tensor> input_batches(std::span<const io::TensorRecord> records);
std::vector<Tensor> batches(const Dataset& data, std::size_t batch);

struct Architecture {
  std::size_t side = 16;
  std::size_t conv1 = 8;
  std::size_t conv2 = 32;
  std::size_t classes = 10;
  // Per-filter gain 2^u, u ~ U[-spread, spread], on convs after the first, so
  // filter magnitudes within a layer differ the way they do in trained
  // networks. Batch norm after each conv makes the gain itself harmless.
  double gain_spread = 1.0;
};

/// input -> bn0 -> conv c1 (3x3, first) -> bn1 -> relu -> conv c2 (3x3,
/// stride 2) -> bn2 -> relu -> fc f1. He-initialized from `seed`.
io::Model build_model(const Architecture& arch, std::uint64_t seed);

std::size_t argmax(std::span<const float> row);

/// Top-1 accuracy of `model` in `mode` over `data`.
double accuracy(const io::Model& model, engine::Mode mode, const Dataset& data,
                std::size_t threads = 1, std::size_t batch = 256);
/// Same for an already compiled plan.
double accuracy(const engine::Plan& plan, const Dataset& data, std::size_t threads = 1,
                std::size_t batch = 256);

}  // namespace qntz::toy
