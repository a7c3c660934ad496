// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "error.hpp"
#include "fixed_point.hpp"
#include "kernels.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace qntz;
using namespace qntz::engine;

namespace {

QTensor random_q(Shape shape, std::mt19937_64& rng, int exponent) {
  QTensor q;
  q.shape = std::move(shape);
  q.exponent = exponent;
  q.data.resize(shape_product(q.shape));
  std::uniform_int_distribution<int> d(-128, 127);
  for (auto& v : q.data) v = static_cast<std::int8_t>(d(rng));
  return q;
}

std::vector<std::int8_t> random_codes(std::size_t n, std::mt19937_64& rng, int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  std::vector<std::int8_t> v(n);
  for (auto& c : v) c = static_cast<std::int8_t>(d(rng));
  return v;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("float conv trivial cases") {
    Tensor x({1, 1, 1, 1}, std::vector<float>{2.0f});
    Tensor w({1, 1, 1, 1}, std::vector<float>{3.0f});
    CHECK(conv_float(x, w, {}, 1, 0).data == std::vector<float>{6.0f});

    std::mt19937_64 rng(31);
    auto img = testing::random_tensor({2, 1, 4, 5}, rng);
    Tensor id({1, 1, 1, 1}, std::vector<float>{1.0f});
    CHECK(conv_float(img, id, {}, 1, 0).data == img.data);
  }

  TEST_CASE("float conv matches the nested-loop oracle") {
    std::mt19937_64 rng(32);
    for (int trial = 0; trial < 20; ++trial) {
      auto x = testing::random_tensor({1, 3, 5, 5}, rng);
      auto w = testing::random_tensor({2, 3, 3, 3}, rng);
      std::vector<double> bias{0.5, -0.25};
      std::size_t stride = 1 + trial % 2, pad = trial % 3 == 0 ? 0 : 1;
      auto got = conv_float(x, w, bias, stride, pad, 1 + trial % 3);
      auto want = oracle::conv_nested(x, w, bias, stride, pad);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(got.data[i] == doctest::Approx(want[i]).epsilon(1e-5));
      }
    }
  }

  TEST_CASE("ternary conv worked example") {
    QTensor x{{1, 3, 1, 1}, {10, 20, 5}, 0};
    TernaryConvWeights w{{1, 3, 1, 1}, {1, 1, -1}, {64}, -6, 4, {}};
    OpCounters c;
    auto y = conv_ternary_int(x, w, 1, 0, 0, &c);
    CHECK(y.data == std::vector<std::int8_t>{25});
    CHECK(c.mults_8bit == 1);
    CHECK(c.accs_ternary == 3);
    CHECK(c.overhead == 1);
  }

  TEST_CASE("all-zero ternary codes give zero output") {
    std::mt19937_64 rng(33);
    auto x = random_q({1, 4, 3, 3}, rng, -4);
    TernaryConvWeights w{{2, 4, 3, 3}, std::vector<std::int8_t>(72, 0), {100, 90}, -7, 2, {}};
    auto y = conv_ternary_int(x, w, 1, 1, -3);
    CHECK(std::all_of(y.data.begin(), y.data.end(), [](auto v) { return v == 0; }));
  }

  TEST_CASE("ternary conv matches the scalar integer oracle with exact counters") {
    std::mt19937_64 rng(34);
    std::uniform_int_distribution<int> ch(1, 6), dn(1, 5), kk(0, 1), gs(1, 5), sc(0, 127);
    for (int trial = 0; trial < 60; ++trial) {
      std::size_t C = ch(rng), D = dn(rng), K = kk(rng) ? 3 : 1;
      std::size_t stride = 1 + trial % 2, pad = K == 3 ? trial % 2 : 0;
      auto x = random_q({2, C, 5, 4}, rng, -5);
      TernaryConvWeights w;
      w.shape = {D, C, K, K};
      w.codes = random_codes(D * C * K * K, rng, -1, 1);
      for (std::size_t d = 0; d < D; ++d) w.scale_mantissa.push_back(sc(rng));
      w.scale_exponent = -8;
      w.group_size = gs(rng);
      std::uniform_int_distribution<std::int64_t> b(-5000, 5000);
      if (trial % 2) for (std::size_t d = 0; d < D; ++d) w.bias.push_back(b(rng));
      const int e_out = -2 - trial % 4;
      OpCounters c;
      auto y = conv_ternary_int(x, w, stride, pad, e_out, &c, 1 + trial % 2);
      auto want = oracle::conv_int(x, w.shape, w.codes, w.scale_mantissa, w.bias, w.scale_exponent,
                                   stride, pad, e_out);
      REQUIRE(y.data == want);
      CHECK(y.exponent == e_out);
      const std::uint64_t outputs = y.data.size();
      CHECK(c.mults_8bit == outputs * ((C + w.group_size - 1) / w.group_size));
      CHECK(c.accs_ternary == outputs * C * K * K);
      CHECK(c.accs_8bit == 0);
      CHECK(c.overhead == outputs);
    }
  }

  TEST_CASE("ternary conv rejects bad codes and accumulator overflow") {
    QTensor x{{1, 1, 1, 1}, {1}, 0};
    TernaryConvWeights bad{{1, 1, 1, 1}, {2}, {1}, 0, 1, {}};
    CHECK(code_of([&] { conv_ternary_int(x, bad, 1, 0, 0); }) == ErrorCode::invalid_code);
    const std::size_t huge = (std::size_t{1} << 24) + 1;
    QTensor big{{1, huge, 1, 1}, std::vector<std::int8_t>(huge, 1), 0};
    TernaryConvWeights w{{1, huge, 1, 1}, std::vector<std::int8_t>(huge, 1), {1}, 0, huge, {}};
    CHECK(code_of([&] { conv_ternary_int(big, w, 1, 0, 0); }) == ErrorCode::accumulator_overflow);
  }

  TEST_CASE("8-bit weight conv trivial cases") {
    QTensor x{{1, 1, 1, 1}, {12}, -3};
    Int8ConvWeights w{{1, 1, 1, 1}, {5}, {1}, -2, {}};
    OpCounters c;
    auto y = conv_int8w(x, w, 1, 0, -4, &c);
    // 12 * 5 = 60 on 2^-5, requantized to 2^-4: 30.
    CHECK(y.data == std::vector<std::int8_t>{30});
    CHECK(c.mults_8bit == 1);
    CHECK(c.accs_8bit == 1);
    Int8ConvWeights zero{{2, 1, 3, 3}, std::vector<std::int8_t>(18, 0), {1, 1}, -2, {}};
    std::mt19937_64 rng(35);
    auto img = random_q({1, 1, 4, 4}, rng, -3);
    auto z = conv_int8w(img, zero, 1, 1, -3);
    CHECK(std::all_of(z.data.begin(), z.data.end(), [](auto v) { return v == 0; }));
  }

  TEST_CASE("8-bit weight conv matches the scalar integer oracle") {
    std::mt19937_64 rng(36);
    std::uniform_int_distribution<int> ch(1, 5), dn(1, 4), sc(1, 127);
    for (int trial = 0; trial < 60; ++trial) {
      std::size_t C = ch(rng), D = dn(rng), K = trial % 2 ? 3 : 1;
      auto x = random_q({1, C, 4, 5}, rng, -4);
      Int8ConvWeights w;
      w.shape = {D, C, K, K};
      const bool four_bit = trial % 3 == 0;
      w.weights = four_bit ? random_codes(D * C * K * K, rng, -7, 7)
                           : random_codes(D * C * K * K, rng, -128, 127);
      for (std::size_t d = 0; d < D; ++d) w.scale_mantissa.push_back(four_bit ? sc(rng) : 1);
      w.exponent = four_bit ? -9 : -7;
      if (trial % 2) {
        std::uniform_int_distribution<std::int64_t> b(-20000, 20000);
        for (std::size_t d = 0; d < D; ++d) w.bias.push_back(b(rng));
      }
      const std::size_t pad = K == 3 ? 1 : 0;
      OpCounters c;
      auto y = conv_int8w(x, w, 1, pad, -3, &c);
      auto want = oracle::conv_int(x, w.shape, w.weights, w.scale_mantissa, w.bias, w.exponent, 1,
                                   pad, -3);
      REQUIRE(y.data == want);
      CHECK(c.mults_8bit == y.data.size() * C * K * K);
      CHECK(c.accs_8bit == c.mults_8bit);
    }
  }

  TEST_CASE("integer affine matches the scalar oracle") {
    std::mt19937_64 rng(37);
    auto x = random_q({2, 3, 2, 2}, rng, -4);
    std::vector<std::int32_t> a{90, -70, 127};
    std::vector<int> ae{-7, -6, -9};
    std::vector<std::int64_t> b{300, -1200, 5};
    OpCounters c;
    auto y = affine_int(x, a, b, ae, -3, &c);
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::size_t ch = (i / 4) % 3;
      long double v = static_cast<long double>(x.data[i]) * a[ch] + b[ch];
      CHECK(y.data[i] == oracle::requant(v, x.exponent + ae[ch] + 3));
    }
    CHECK(c.overhead == x.size());
  }

  TEST_CASE("integer relu and pools agree with float on dequantized values") {
    std::mt19937_64 rng(38);
    auto x = random_q({1, 2, 4, 4}, rng, -5);
    auto xf = fxp::dequantize(x);
    CHECK(fxp::dequantize(relu_int(x)).data == relu_float(xf).data);
    PoolSpec p;
    CHECK(fxp::dequantize(maxpool_int(x, p)).data == maxpool_float(xf, p).data);
    auto avg = avgpool_int(x, p);
    auto avg_ref = avgpool_float(xf, p, x.exponent);
    CHECK(fxp::dequantize(avg).data == avg_ref.data);
    PoolSpec g;
    g.global = true;
    auto gi = avgpool_int(x, g);
    CHECK(gi.shape == Shape{1, 2, 1, 1});
    for (std::size_t c = 0; c < 2; ++c) {
      long long s = 0;
      for (std::size_t i = 0; i < 16; ++i) s += x.data[c * 16 + i];
      CHECK(gi.data[c] == static_cast<std::int8_t>(std::round(static_cast<double>(s) / 16.0)));
    }
  }

  TEST_CASE("snap_to_format rounds half away and saturates") {
    CHECK(snap_to_format(0.15625, -4) == 0.1875);   // 2.5 steps -> 3
    CHECK(snap_to_format(-0.15625, -4) == -0.1875);
    CHECK(snap_to_format(100.0, -4) == 127.0 / 16);
    CHECK(snap_to_format(-100.0, -4) == -8.0);
  }
}
