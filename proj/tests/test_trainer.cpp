// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "error.hpp"
#include "finetune.hpp"
#include "test_util.hpp"
#include "toy.hpp"
#include "trainer.hpp"

using namespace qntz;
using namespace qntz::train;

namespace {

toy::Architecture small_arch() { return {8, 4, 6, 5, 0.0}; }

toy::Dataset small_data(std::size_t n, std::uint64_t split = 0) {
  toy::DatasetSpec spec;
  spec.side = 8;
  spec.classes = 5;
  spec.samples = n;
  spec.split = split;
  return toy::make_dataset(spec);
}

std::size_t index_of(const Network& net, const std::string& name) {
  for (std::size_t i = 0; i < net.graph.layers.size(); ++i) {
    if (net.graph.layers[i].name == name) return i;
  }
  FAIL("no layer " << name);
  return 0;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("analytic gradients match central differences") {
    auto net = Network::from_model(toy::build_model(small_arch(), 2));
    CHECK(net.parameter_count() == 759);
    auto data = small_data(6);
    auto r = gradient_check(net, to_double(data.images), data.labels);
    CHECK(r.parameters == net.parameter_count());
    CHECK(r.max_rel_error <= 1e-3);
  }

  TEST_CASE("saturated activations pass no gradient") {
    auto net = Network::from_model(toy::build_model(small_arch(), 2));
    auto data = small_data(4);
    LowPrecision lp;
    lp.activations = true;
    lp.input_exponent = -2;
    lp.layer_exponents.assign(net.graph.layers.size(), -3);
    // c1 outputs land far outside the range of 2^-20 steps.
    lp.layer_exponents[index_of(net, "c1")] = -20;
    ForwardCache cache;
    forward(net, lp, to_double(data.images), data.labels, true, &cache);
    auto grads = backward(net, cache);
    const auto& c1 = grads[index_of(net, "c1")].weight;
    double sat = 0.0;
    for (double v : cache.layers[index_of(net, "c1")].pre.data) {
      if (std::fabs(v) > 127.0 * std::ldexp(1.0, -20)) sat += 1;
    }
    REQUIRE(sat == static_cast<double>(cache.layers[index_of(net, "c1")].pre.size()));
    for (double g : c1) CHECK(g == 0.0);
    for (double g : grads[index_of(net, "bn0")].gamma) CHECK(g == 0.0);
    // The loss itself still reaches the classifier.
    double f1 = 0.0;
    for (double g : grads[index_of(net, "f1")].bias) f1 += std::fabs(g);
    CHECK(f1 > 0.0);
  }

  TEST_CASE("ternary-representable weights make the weight quantizer lossless") {
    auto net = Network::from_model(toy::build_model(small_arch(), 3));
    auto& c1 = net.params[index_of(net, "c1")].weight;
    for (std::size_t i = 0; i < c1.size(); ++i) c1[i] = static_cast<double>(static_cast<int>(i % 9) - 4) / 64.0;
    auto& c2 = net.params[index_of(net, "c2")].weight;
    for (std::size_t i = 0; i < c2.size(); ++i) c2[i] = 0.25 * (static_cast<int>(i % 3) - 1);
    LowPrecision lp;
    lp.weights = true;
    lp.quant.cluster_size = 2;
    CHECK(effective_weight(net, lp, index_of(net, "c1")) == c1);
    CHECK(effective_weight(net, lp, index_of(net, "c2")) == c2);
    auto data = small_data(8);
    auto x = to_double(data.images);
    CHECK(forward(net, lp, x, data.labels, false, nullptr) ==
          forward(net, {}, x, data.labels, false, nullptr));
  }

  TEST_CASE("zero input gives identical logits across the batch") {
    auto net = Network::from_model(toy::build_model(small_arch(), 4));
    DTensor x({3, 1, 8, 8});
    auto l = logits(net, {}, x);
    for (std::size_t n = 1; n < 3; ++n) {
      for (std::size_t k = 0; k < 5; ++k) CHECK(l.data[n * 5 + k] == l.data[k]);
    }
  }

  TEST_CASE("loss and training are bit-reproducible") {
    auto data = small_data(64);
    auto net = Network::from_model(toy::build_model(small_arch(), 5));
    auto x = to_double(data.slice(0, 8));
    auto labels = std::span(data.labels).first(8);
    CHECK(forward(net, {}, x, labels, true, nullptr) == forward(net, {}, x, labels, true, nullptr));
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 16;
    auto a = net, b = net;
    auto ca = train::train(a, {}, data, tc);
    auto cb = train::train(b, {}, data, tc);
    CHECK(a.params == b.params);
    CHECK(ca.size() == 2);  // no evaluator, so no epoch-0 point
    CHECK(ca.back().train_loss == cb.back().train_loss);
  }

  TEST_CASE("zero epochs and zero learning rate leave weights untouched") {
    auto data = small_data(32);
    auto net = Network::from_model(toy::build_model(small_arch(), 6));
    auto before = net.params;
    TrainConfig tc;
    tc.epochs = 0;
    auto curve = train::train(net, {}, data, tc, [](const Network&) { return 0.5; });
    CHECK(curve.size() == 1);
    CHECK(curve[0].accuracy == 0.5);
    CHECK(net.params == before);

    tc.epochs = 2;
    tc.sgd.lr = 0.0;
    train::train(net, {}, data, tc);
    for (std::size_t i = 0; i < net.params.size(); ++i) {
      CHECK(net.params[i].weight == before[i].weight);
      CHECK(net.params[i].gamma == before[i].gamma);
      CHECK(net.params[i].beta == before[i].beta);
    }
  }

  TEST_CASE("training reduces the loss on the toy task") {
    auto data = small_data(256);
    auto net = Network::from_model(toy::build_model(small_arch(), 7));
    TrainConfig tc;
    tc.epochs = 3;
    tc.sgd.lr = 0.02;
    auto curve = train::train(net, {}, data, tc);
    CHECK(curve.back().train_loss < curve[1].train_loss);
  }

  TEST_CASE("divergence is reported") {
    auto data = small_data(64);
    auto net = Network::from_model(toy::build_model(small_arch(), 8));
    TrainConfig tc;
    tc.epochs = 3;
    tc.sgd.lr = 1e4;
    try {
      train::train(net, {}, data, tc);
      FAIL("expected divergence");
    } catch (const Error& e) {
      CHECK((e.code() == ErrorCode::diverged || e.code() == ErrorCode::non_finite));
    }
  }

  TEST_CASE("model conversion round-trips") {
    auto m = toy::build_model(small_arch(), 9);
    auto back = Network::from_model(m).to_model();
    CHECK(back.graph == m.graph);
    for (const auto& r : m.tensors) CHECK(back.get(r.name) == r);
  }
}

TEST_SUITE("finetune") {
  TEST_CASE("fine-tuning is deterministic and exports what the shadow weights quantize to") {
    auto train_set = small_data(96, 0);
    auto eval = small_data(48, 1);
    auto cal = toy::batches(small_data(32, 2), 16);
    auto net = Network::from_model(toy::build_model(small_arch(), 10));
    TrainConfig tc;
    tc.epochs = 2;
    tc.sgd.lr = 0.02;
    train::train(net, {}, train_set, tc);
    auto fm = net.to_model();

    FinetuneConfig fc;
    fc.epochs = 1;
    fc.quant.cluster_size = 4;
    auto a = finetune(fm, train_set, eval, cal, fc);
    auto b = finetune(fm, train_set, eval, cal, fc);
    REQUIRE(a.curve.size() == 2);
    CHECK(a.curve[0].epoch == 0);
    CHECK(a.curve[1].accuracy == b.curve[1].accuracy);
    CHECK(a.quantized == b.quantized);
    auto again = export_quantized(a.shadow.to_model(), fc.quant, cal);
    CHECK(again == a.quantized);
    CHECK(a.curve[0].accuracy ==
          toy::accuracy(export_quantized(fm, fc.quant, cal), engine::Mode::integer, eval));
  }

  TEST_CASE("zero epochs returns the starting point only") {
    auto train_set = small_data(32, 0);
    auto eval = small_data(16, 1);
    auto cal = toy::batches(small_data(16, 2), 8);
    auto fm = toy::build_model(small_arch(), 11);
    FinetuneConfig fc;
    fc.epochs = 0;
    auto r = finetune(fm, train_set, eval, cal, fc);
    CHECK(r.curve.size() == 1);
    CHECK(r.shadow.params == Network::from_model(fm).params);
  }
}
