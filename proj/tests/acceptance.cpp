// SPDX-License-Identifier: Apache-2.0
// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Exit status is nonzero when any criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>

#include "engine.hpp"
#include "error.hpp"
#include "finetune.hpp"
#include "kernels.hpp"
#include "model_io.hpp"
#include "oracles.hpp"
#include "perf.hpp"
#include "quantize.hpp"
#include "random_records.hpp"
#include "ternarizer.hpp"
#include "toy.hpp"
#include "trainer.hpp"

using namespace qntz;

namespace {

constexpr double kSearchBudgetS = 10.0;
constexpr double kPipelineBudgetS = 300.0;
constexpr double kBnRelTol = 1e-4;
constexpr double kLosslessRelTol = 1e-5;
constexpr double kFloatAccuracyMin = 0.95;
constexpr double kPtqPointsMax = 0.05;
constexpr double kRecoveryMin = 0.90;
constexpr double kGradRelTol = 1e-3;

int failures = 0;

void report(int id, const char* title, bool pass, const std::string& detail) {
  std::printf("%s [%2d] %s: %s\n", pass ? "PASS" : "FAIL", id, title, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<float> gaussian(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> w(n);
  for (auto& v : w) v = d(rng);
  return w;
}

// Coarse grid so magnitudes repeat and the tie-break is exercised.
std::vector<float> gridded(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> q(-3, 3);
  std::vector<float> w(n);
  for (auto& v : w) v = 0.25f * static_cast<float>(q(rng));
  return w;
}

void criterion_threshold_search() {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> len(1, 64);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    auto w = i % 4 == 0 ? gridded(rng, len(rng)) : gaussian(rng, len(rng));
    auto got = ternary::select_threshold(w);
    auto want = oracle::brute_threshold(w);
    if (got.support != want.t || got.alpha != want.alpha || got.error != want.error) ++mismatches;
  }
  double s = seconds_since(t0);
  report(1, "threshold search equals brute force", mismatches == 0 && s < kSearchBudgetS,
         fmt("1000 filters, %d mismatches in (t*, alpha, error), %.2f s", mismatches, s));
}

void criterion_cluster_search() {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<std::size_t> nf(1, 8), len(1, 32);
  int beaten = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = len(rng);
    std::vector<std::vector<float>> f(nf(rng));
    for (auto& v : f) v = i % 4 == 0 ? gridded(rng, n) : gaussian(rng, n);
    auto c = ternary::ternarize_cluster(f);
    for (const auto& cand : oracle::cluster_candidates(f)) {
      if (cand.error < c.error) {
        ++beaten;
        break;
      }
    }
  }
  double s = seconds_since(t0);
  report(2, "cluster search is optimal over its candidates", beaten == 0 && s < kSearchBudgetS,
         fmt("200 clusters, %d beaten by another t, %.2f s", beaten, s));
}

void criterion_monotonicity() {
  std::mt19937_64 rng(1003);
  const std::size_t d = 64, c_in = 16;
  int violations = 0;
  double worst = 0.0;
  std::string where;
  for (int i = 0; i < 50; ++i) {
    const std::size_t k = i % 2 ? 3 : 1;
    Tensor w({d, c_in, k, k}, gaussian(rng, d * c_in * k * k));
    // Filter gains differ, as they do after training.
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const std::size_t per = c_in * k * k;
    for (std::size_t f = 0; f < d; ++f) {
      const float g = static_cast<float>(std::exp2(u(rng)));
      for (std::size_t j = 0; j < per; ++j) w.data[f * per + j] *= g;
    }
    double prev = -1.0;
    std::size_t prev_n = 0;
    for (std::size_t n : {std::size_t{1}, std::size_t{4}, std::size_t{64}, d}) {
      ternary::QuantConfig cfg;
      cfg.cluster_size = n;
      double e = ternary::quantize_layer(w, cfg).error_exact;
      if (e < prev) {
        ++violations;
        double rel = (prev - e) / prev;
        if (rel > worst) {
          worst = rel;
          where = fmt("tensor %d K=%zu N=%zu->%zu", i, k, prev_n, n);
        }
      }
      prev = e;
      prev_n = n;
    }
  }
  report(3, "reconstruction error non-decreasing in N (1, 4, 64, d)", violations == 0,
         violations == 0 ? "50 tensors, 0 violations"
                         : fmt("50 tensors, %d violations, worst drop %.3g%% at %s", violations,
                               100.0 * worst, where.c_str()));
}

io::LayerSpec conv_layer(std::size_t k, std::size_t out) {
  io::LayerSpec l;
  l.kind = io::LayerKind::conv;
  l.name = k == 3 ? "conv3x3" : "conv1x1";
  l.kernel = k;
  l.padding = k / 2;
  l.out_channels = out;
  return l;
}

// MAC-weighted replaced fraction over a stack of ternary layers on a
// 64-channel 8x8 input.
double mixed_ratio(const std::vector<io::LayerSpec>& layers, std::size_t n, std::vector<perf::LayerCount>* out) {
  ternary::QuantConfig c;
  c.cluster_size = n;
  std::uint64_t macs = 0, mults = 0;
  for (const auto& l : layers) {
    auto count = perf::count_layer(l, {64, 8, 8}, {l.out_channels, 8, 8}, c);
    macs += count.macs;
    mults += count.mults_8bit;
    if (out) out->push_back(count);
  }
  return 1.0 - static_cast<double>(mults) / static_cast<double>(macs);
}

void criterion_op_counts() {
  // 64*64*9 == 576*64: the two layers carry equal MACs.
  const std::vector<io::LayerSpec> mixed{conv_layer(3, 64), conv_layer(1, 576)};
  const std::vector<io::LayerSpec> all3{conv_layer(3, 64), conv_layer(3, 64)};
  std::vector<perf::LayerCount> counts;
  const double m4 = mixed_ratio(mixed, 4, &counts), m64 = mixed_ratio(mixed, 64, nullptr);
  const double a4 = mixed_ratio(all3, 4, nullptr);
  const bool balanced = counts[0].macs == counts[1].macs;
  // Closed forms: a 3x3 layer keeps 1/(9N) of its multiplies, a 1x1 layer 1/N.
  const double f4 = 1.0 - 0.5 * (1.0 / 36.0 + 1.0 / 4.0);
  const double f64 = 1.0 - 0.5 * (1.0 / 576.0 + 1.0 / 64.0);
  const double fa4 = 1.0 - 1.0 / 36.0;
  const double eps = 4 * std::numeric_limits<double>::epsilon();
  const bool exact = std::fabs(m4 - f4) <= eps && std::fabs(m64 - f64) <= eps && std::fabs(a4 - fa4) <= eps;
  const bool brackets = m4 >= 0.83 && m4 <= 0.88 && m64 >= 0.975 && m64 <= 0.995 && a4 > 0.95;
  report(4, "replaced-multiplication ratios", balanced && exact && brackets,
         fmt("50/50 mix N=4 %.4f%% (formula %.4f%%), N=64 %.4f%% (formula %.4f%%), all-3x3 N=4 %.4f%%",
             100 * m4, 100 * f4, 100 * m64, 100 * f64, 100 * a4));
}

void criterion_accounting(const train::ToySetup& toy, const io::Model& ptq4) {
  auto x = toy.test.slice(0, 64);
  auto r = engine::run(ptq4, x, engine::Mode::integer);
  auto counts = perf::count_graph(ptq4.graph, {}, 64);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < counts.layers.size(); ++i) {
    const auto& got = r.layers.at(i).counters;
    const auto& want = counts.layers[i];
    if (got.mults_8bit != want.mults_8bit || got.accs_ternary != want.accs_ternary ||
        got.accs_8bit != want.accs_8bit || got.overhead != want.overhead)
      ++bad;
  }
  const bool sizes = r.layers.size() == counts.layers.size();
  report(5, "engine counters equal static counts per layer", sizes && bad == 0,
         fmt("%zu layers, %zu mismatched, %llu 8-bit mults / %llu ternary accs for 64 samples",
             counts.layers.size(), bad, static_cast<unsigned long long>(r.total.mults_8bit),
             static_cast<unsigned long long>(r.total.accs_ternary)));
}

QTensor random_q(Shape shape, std::mt19937_64& rng, int exponent) {
  QTensor q;
  q.shape = std::move(shape);
  q.exponent = exponent;
  q.data.resize(shape_product(q.shape));
  std::uniform_int_distribution<int> d(-128, 127);
  for (auto& v : q.data) v = static_cast<std::int8_t>(d(rng));
  return q;
}

void criterion_bit_exact(const train::ToySetup& toy, const io::Model& ptq4) {
  std::mt19937_64 rng(1006);
  std::uniform_int_distribution<int> ch(1, 8), dn(1, 6), sc(1, 127), code(-1, 1), byte(-128, 127);
  std::uniform_int_distribution<std::int64_t> bias(-20000, 20000);
  int bad = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t C = ch(rng), D = dn(rng), K = i % 3 == 0 ? 1 : 3;
    const std::size_t stride = 1 + i % 2, pad = K == 3 ? (i / 2) % 2 : 0;
    auto x = random_q({2, C, 6, 5}, rng, -5);
    Shape shape{D, C, K, K};
    std::vector<std::int64_t> b;
    if (i % 4 < 2) for (std::size_t d = 0; d < D; ++d) b.push_back(bias(rng));
    std::vector<std::int8_t> w(D * C * K * K);
    std::vector<std::int32_t> scales;
    const int e_out = -3 - i % 3;
    std::vector<std::int8_t> got;
    int e_w = 0;
    if (i % 2 == 0) {
      for (auto& v : w) v = static_cast<std::int8_t>(code(rng));
      for (std::size_t d = 0; d < D; ++d) scales.push_back(sc(rng));
      e_w = -8;
      engine::TernaryConvWeights tw{shape, w, scales, e_w, 1 + static_cast<std::size_t>(i % 5), b};
      got = engine::conv_ternary_int(x, tw, stride, pad, e_out).data;
    } else {
      for (auto& v : w) v = static_cast<std::int8_t>(byte(rng));
      scales.assign(D, 1);
      e_w = -7;
      engine::Int8ConvWeights iw{shape, w, scales, e_w, b};
      got = engine::conv_int8w(x, iw, stride, pad, e_out).data;
    }
    auto want = oracle::conv_int(x, shape, w, scales, b, e_w, stride, pad, e_out);
    if (got != want) ++bad;
  }
  auto qi = engine::run(ptq4, toy.test.images, engine::Mode::integer).output;
  auto qr = engine::run(ptq4, toy.test.images, engine::Mode::quant_ref).output;
  std::size_t diff = 0;
  for (std::size_t i = 0; i < qi.size(); ++i) diff += qi.data[i] != qr.data[i];
  report(6, "integer kernels bit-exact; integer mode equals quant_ref", bad == 0 && diff == 0,
         fmt("100 random layers, %d mismatched; toy test set %zu of %zu logits differ", bad, diff, qi.size()));
}

double rel(double a, double b) { return std::fabs(a - b) / std::max(std::fabs(b), 1e-12); }

void criterion_batchnorm(const train::ToySetup& toy) {
  // Doubling the conv feeding bn2 must double its mean and quadruple its variance.
  auto base = toy.float_model;
  auto doubled = base;
  auto w = io::to_tensor(doubled.get("c2.weight"));
  for (auto& v : w.data) v *= 2.0f;
  doubled.put(io::make_f32("c2.weight", w.shape, w.data));
  auto u1 = engine::recompute_batchnorm(base, toy.calibration_batches);
  auto u2 = engine::recompute_batchnorm(doubled, toy.calibration_batches);
  double worst_scale = 0.0;
  for (std::size_t i = 0; i < u1.size(); ++i) {
    if (u1[i].name != "bn2") continue;
    for (std::size_t c = 0; c < u1[i].new_mean.size(); ++c) {
      worst_scale = std::max(worst_scale, rel(u2[i].new_mean[c], 2 * u1[i].new_mean[c]));
      worst_scale = std::max(worst_scale, rel(u2[i].new_var[c], 4 * u1[i].new_var[c]));
    }
  }

  // Weights the quantizer represents exactly: statistics must not move.
  auto exact = toy.float_model;
  auto c1 = io::to_tensor(exact.get("c1.weight"));
  for (std::size_t i = 0; i < c1.size(); ++i) c1.data[i] = static_cast<float>(static_cast<int>(i % 9) - 4) / 64.0f;
  exact.put(io::make_f32("c1.weight", c1.shape, c1.data));
  auto c2 = io::to_tensor(exact.get("c2.weight"));
  for (std::size_t i = 0; i < c2.size(); ++i) c2.data[i] = 0.25f * static_cast<float>(static_cast<int>(i % 3) - 1);
  exact.put(io::make_f32("c2.weight", c2.shape, c2.data));
  ternary::QuantizeReport qrep;
  auto quantized = ternary::quantize_model(exact, {4, 2, true, 1}, &qrep);
  auto before = engine::recompute_batchnorm(exact, toy.calibration_batches);
  auto after = engine::recompute_batchnorm(quantized, toy.calibration_batches);
  // Means near zero are compared absolutely, everything else relatively.
  double worst_lossless = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    for (std::size_t c = 0; c < before[i].new_mean.size(); ++c) {
      worst_lossless = std::max(worst_lossless, std::fabs(after[i].new_mean[c] - before[i].new_mean[c]) /
                                                    std::max(std::fabs(before[i].new_mean[c]), 1.0));
      worst_lossless = std::max(worst_lossless, rel(after[i].new_var[c], before[i].new_var[c]));
    }
  }
  // Only the conv layers matter for batch norm; fc follows the last one.
  double conv_err = 0.0;
  for (const auto& l : qrep.layers) {
    if (l.kind == "conv") conv_err += l.error_quantized;
  }
  const bool pass = worst_scale <= kBnRelTol && worst_lossless <= kLosslessRelTol && conv_err == 0.0;
  report(7, "batch-norm recomputation", pass,
         fmt("2x scale: worst rel %.2e (tol %.0e); lossless: conv error %.1e, worst change %.2e (tol %.0e)",
             worst_scale, kBnRelTol, conv_err, worst_lossless, kLosslessRelTol));
}

std::size_t widest_layer(const io::ModelGraph& g) {
  std::size_t d = 1;
  for (const auto& l : g.layers) d = std::max(d, l.out_channels);
  return d;
}

void criterion_pipeline(const train::ToySetup& toy, const io::Model& ptq4, double setup_s) {
  auto t0 = std::chrono::steady_clock::now();
  const double acc_float = toy::accuracy(toy.float_model, engine::Mode::float_ref, toy.test);
  const double acc4 = toy::accuracy(ptq4, engine::Mode::integer, toy.test);
  const std::size_t d = widest_layer(toy.float_model.graph);
  auto ptqd = train::export_quantized(toy.float_model, {d, 2, false, 1}, toy.calibration_batches);
  const double accd = toy::accuracy(ptqd, engine::Mode::integer, toy.test);
  const double s = setup_s + seconds_since(t0);
  const bool pass = acc_float >= kFloatAccuracyMin && acc_float - acc4 <= kPtqPointsMax && accd < acc4 &&
                    s < kPipelineBudgetS;
  report(8, "toy pipeline: float, N=4 and N=d post-training quantization", pass,
         fmt("float %.4f, N=4 int %.4f (drop %.2f points, max %.0f), N=d=%zu int %.4f, %.1f s", acc_float,
             acc4, 100 * (acc_float - acc4), 100 * kPtqPointsMax, d, accd, s));
}

void criterion_finetune(const train::ToySetup& toy) {
  const double acc_float = toy::accuracy(toy.float_model, engine::Mode::float_ref, toy.test);
  train::FinetuneConfig cfg;  // 4 epochs, lr 1e-4, N=64
  auto t0 = std::chrono::steady_clock::now();
  auto a = train::finetune(toy.float_model, toy.train, toy.test, toy.calibration_batches, cfg);
  const double s = seconds_since(t0);
  auto b = train::finetune(toy.float_model, toy.train, toy.test, toy.calibration_batches, cfg);
  bool same = a.quantized == b.quantized && a.curve.size() == b.curve.size();
  for (std::size_t i = 0; same && i < a.curve.size(); ++i) {
    same = a.curve[i].accuracy == b.curve[i].accuracy && a.curve[i].train_loss == b.curve[i].train_loss;
  }
  const double start = a.curve.front().accuracy, end = a.curve.back().accuracy;
  const double gap = acc_float - start;
  const double recovered = gap > 0 ? (end - start) / gap : 1.0;
  const bool pass = recovered >= kRecoveryMin && same && s < kPipelineBudgetS;
  report(9, "fine-tuning recovers the N=64 gap", pass,
         fmt("float %.4f, start %.4f, after %zu epochs %.4f, recovered %.1f%% (min %.0f%%), deterministic %s, %.1f s",
             acc_float, start, cfg.epochs, end, 100 * recovered, 100 * kRecoveryMin, same ? "yes" : "no", s));
}

void criterion_gradients(const train::ToySetup& toy) {
  auto net = train::Network::from_model(toy.float_model);
  auto x = train::to_double(toy.train.slice(0, 4));
  auto labels = std::span(toy.train.labels).first(4);
  auto r = train::gradient_check(net, x, labels);
  const bool pass = r.parameters == net.parameter_count() && r.max_rel_error <= kGradRelTol;
  report(10, "analytic gradients match central differences", pass,
         fmt("%zu parameters, max rel error %.2e at %s (tol %.0e)", r.parameters, r.max_rel_error,
             r.worst.c_str(), kGradRelTol));
}

void criterion_serialization(const train::ToySetup& toy) {
  std::mt19937_64 rng(1011);
  std::uniform_int_distribution<int> count(0, 8);
  int bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<io::TensorRecord> recs;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) recs.push_back(testing::random_record(rng, "r" + std::to_string(i)));
    auto bytes = io::encode_container(recs);
    if (io::decode_container(bytes) != recs || io::encode_container(io::decode_container(bytes)) != bytes) ++bad;
  }
  bool deterministic = true;
  std::vector<std::uint8_t> first_bytes;
  std::string first_graph;
  for (std::size_t threads : {1, 1, 3}) {
    auto m = ternary::quantize_model(toy.float_model, {4, 2, false, threads});
    auto bytes = io::encode_container(m.tensors);
    auto graph = io::format_manifest(m.graph);
    if (first_bytes.empty()) {
      first_bytes = bytes;
      first_graph = graph;
    } else {
      deterministic = deterministic && bytes == first_bytes && graph == first_graph;
    }
  }
  report(11, "container round-trip and quantize determinism", bad == 0 && deterministic,
         fmt("1000 record sets, %d not bit-exact; quantize bytes identical across runs: %s", bad,
             deterministic ? "yes" : "no"));
}

}  // namespace

int main() {
  try {
    criterion_threshold_search();
    criterion_cluster_search();
    criterion_monotonicity();
    criterion_op_counts();

    auto t0 = std::chrono::steady_clock::now();
    auto toy = train::prepare_toy(train::ToyRecipe{});
    auto ptq4 = train::export_quantized(toy.float_model, {4, 2, false, 1}, toy.calibration_batches);
    const double setup_s = seconds_since(t0);

    criterion_accounting(toy, ptq4);
    criterion_bit_exact(toy, ptq4);
    criterion_batchnorm(toy);
    criterion_pipeline(toy, ptq4, setup_s);
    criterion_finetune(toy);
    criterion_gradients(toy);
    criterion_serialization(toy);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance run aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
