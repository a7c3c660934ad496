// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "quantize.hpp"
#include "toy.hpp"
#include "trainer.hpp"

namespace qntz::train {

struct FinetuneConfig {
  std::size_t epochs = 4;
  double lr = 1e-4;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  ternary::QuantConfig quant{64, 2, true, 1};
  std::size_t threads = 1;
};

struct FinetuneResult {
  Network shadow;            // full-precision weights after training
  io::Model quantized;       // integer-ready export of `shadow`
  std::vector<EpochPoint> curve;  // epoch 0 is the starting point
};

/// The desk-scale experiment shared by the CLI and the acceptance run.
struct ToyRecipe {
  toy::DatasetSpec data;  // templates and noise; split and size are set per set
  std::size_t train_samples = 2000;
  std::size_t test_samples = 2000;
  std::size_t calibration_samples = 256;
  std::size_t calibration_batch = 64;
  toy::Architecture arch;
  std::uint64_t model_seed = 1;
  TrainConfig training{8, 32, {0.02, 0.9}, 1, 0.1};
};

struct ToySetup {
  toy::Dataset train, test, calibration;
  std::vector<Tensor> calibration_batches;
  io::Model float_model;
  std::vector<EpochPoint> curve;  // float accuracy on the test set per epoch
};

/// Builds the three datasets (splits 0, 1 and 2 of recipe.data) and trains
/// the float model.
ToySetup prepare_toy(const ToyRecipe& recipe);

/// Post-training quantization of a float network: quantize weights, then
/// recompute batch-norm statistics and activation formats on `calibration`.
io::Model export_quantized(const io::Model& float_model, const ternary::QuantConfig& quant,
                           std::span<const Tensor> calibration, std::size_t threads = 1,
                           ternary::QuantizeReport* report = nullptr);

/// Low-precision fine-tuning from a float model. Every step ternarizes the
/// shadow weights (8-bit first conv, float fc) and fake-quantizes activations
/// with the formats of the initial export. After each epoch the shadow
/// network is exported and scored in integer mode on `eval`.
FinetuneResult finetune(const io::Model& float_model, const toy::Dataset& train_set,
                        const toy::Dataset& eval, std::span<const Tensor> calibration,
                        const FinetuneConfig& config);

}  // namespace qntz::train
