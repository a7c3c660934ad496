// SPDX-License-Identifier: Apache-2.0
#include "finetune.hpp"

#include "engine.hpp"
#include "error.hpp"

namespace qntz::train {

ToySetup prepare_toy(const ToyRecipe& recipe) {
  ToySetup s;
  auto spec = recipe.data;
  spec.split = 0;
  spec.samples = recipe.train_samples;
  s.train = toy::make_dataset(spec);
  spec.split = 1;
  spec.samples = recipe.test_samples;
  s.test = toy::make_dataset(spec);
  spec.split = 2;
  spec.samples = recipe.calibration_samples;
  s.calibration = toy::make_dataset(spec);
  s.calibration_batches = toy::batches(s.calibration, recipe.calibration_batch);

  auto arch = recipe.arch;
  arch.side = spec.side;
  arch.classes = spec.classes;
  auto net = Network::from_model(toy::build_model(arch, recipe.model_seed));
  s.curve = train(net, {}, s.train, recipe.training, [&](const Network& n) {
    return toy::accuracy(n.to_model(), engine::Mode::float_ref, s.test);
  });
  s.float_model = net.to_model();
  return s;
}

io::Model export_quantized(const io::Model& float_model, const ternary::QuantConfig& quant,
                           std::span<const Tensor> calibration, std::size_t threads,
                           ternary::QuantizeReport* report) {
  auto model = ternary::quantize_model(float_model, quant, report);
  engine::recompute_batchnorm(model, calibration, threads);
  engine::calibrate(model, calibration, threads);
  return model;
}

FinetuneResult finetune(const io::Model& float_model, const toy::Dataset& train_set,
                        const toy::Dataset& eval, std::span<const Tensor> calibration,
                        const FinetuneConfig& config) {
  config.quant.validate();
  FinetuneResult result;
  result.shadow = Network::from_model(float_model);

  auto initial = export_quantized(float_model, config.quant, calibration, config.threads);
  auto lp = LowPrecision::from_calibrated(initial.graph, config.quant);

  auto evaluate = [&](const Network& net) {
    result.quantized = export_quantized(net.to_model(), config.quant, calibration, config.threads);
    return toy::accuracy(result.quantized, engine::Mode::integer, eval, config.threads);
  };
  TrainConfig tc;
  tc.epochs = config.epochs;
  tc.batch_size = config.batch_size;
  tc.sgd = {config.lr, config.momentum};
  tc.seed = config.seed;
  result.curve = train(result.shadow, lp, train_set, tc, evaluate);
  return result;
}

}  // namespace qntz::train
