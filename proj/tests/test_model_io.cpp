// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <random>

#include "doctest.h"
#include "error.hpp"
#include "model_io.hpp"
#include "random_records.hpp"
#include "test_util.hpp"

using namespace qntz;
using qntz::testing::random_record;
using namespace qntz::io;

namespace {

// Scalar reference for the 2-bit layout.
std::vector<std::uint8_t> pack_oracle(const std::vector<std::int8_t>& codes) {
  std::vector<std::uint8_t> out((codes.size() + 3) / 4, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    std::uint8_t bits = codes[i] == 0 ? 0 : (codes[i] == 1 ? 1 : 2);
    out[i / 4] = static_cast<std::uint8_t>(out[i / 4] | (bits << (2 * (i % 4))));
  }
  return out;
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

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}


}  // namespace

TEST_SUITE("model_io") {
  TEST_CASE("empty container round-trips to an empty list") {
    auto bytes = encode_container({});
    CHECK(decode_container(bytes).empty());
  }

  TEST_CASE("f32 [2,2] record survives save and load") {
    testing::TempDir dir("io");
    std::vector<float> v{1.0f, -1.0f, 0.5f, 0.0f};
    std::vector<TensorRecord> recs{make_f32("w", {2, 2}, v)};
    save_container(recs, dir / "a.qtz");
    auto back = load_container(dir / "a.qtz");
    REQUIRE(back.size() == 1);
    CHECK(back[0] == recs[0]);
    CHECK(to_tensor(back[0]).data == v);
  }

  TEST_CASE("five ternary codes take two bytes") {
    std::vector<std::int8_t> codes{1, 0, -1, 1, 0};
    auto rec = make_ternary("t", {5}, codes);
    CHECK(rec.data.size() == 2);
    CHECK(to_ternary_codes(rec) == codes);
  }

  TEST_CASE("packing matches the scalar oracle for all 3^5 sequences") {
    for (int id = 0; id < 243; ++id) {
      std::vector<std::int8_t> codes(5);
      int v = id;
      for (auto& c : codes) {
        c = static_cast<std::int8_t>(v % 3 - 1);
        v /= 3;
      }
      auto packed = pack_ternary(codes);
      CHECK(packed == pack_oracle(codes));
      CHECK(unpack_ternary(packed, 5) == codes);
    }
  }

  TEST_CASE("reserved code 11 and nonzero padding are rejected") {
    CHECK(code_of([] { unpack_ternary(std::vector<std::uint8_t>{0x03}, 1); }) ==
          ErrorCode::invalid_code);
    CHECK(code_of([] { unpack_ternary(std::vector<std::uint8_t>{0x10}, 2); }) ==
          ErrorCode::invalid_code);
  }

  TEST_CASE("saving the same records twice gives identical bytes") {
    testing::TempDir dir("io");
    std::mt19937_64 rng(3);
    std::vector<TensorRecord> recs;
    for (int i = 0; i < 8; ++i) recs.push_back(random_record(rng, "r" + std::to_string(i)));
    save_container(recs, dir / "a.qtz");
    save_container(recs, dir / "b.qtz");
    CHECK(read_file(dir / "a.qtz") == read_file(dir / "b.qtz"));
  }

  TEST_CASE("a record with the wrong payload length fails before any write") {
    testing::TempDir dir("io");
    TensorRecord bad{"w", DType::f32, {2, 2}, std::vector<std::uint8_t>(12)};
    std::vector<TensorRecord> recs{bad};
    CHECK(code_of([&] { save_container(recs, dir / "x.qtz"); }) ==
          ErrorCode::invariant_violation);
    CHECK_FALSE(std::filesystem::exists(dir / "x.qtz"));
  }

  TEST_CASE("1000 random record sets round-trip") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> count(0, 6);
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<TensorRecord> recs;
      int n = count(rng);
      for (int i = 0; i < n; ++i) recs.push_back(random_record(rng, "t" + std::to_string(i)));
      REQUIRE(decode_container(encode_container(recs)) == recs);
    }
  }

  TEST_CASE("corrupt containers are reported by kind") {
    std::vector<float> v{1.0f, 2.0f};
    std::vector<TensorRecord> recs{make_f32("w", {2}, v)};
    auto bytes = encode_container(recs);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK(code_of([&] { decode_container(truncated); }) == ErrorCode::truncated);
    auto magic = bytes;
    magic[0] = 'X';
    CHECK(code_of([&] { decode_container(magic); }) == ErrorCode::malformed_header);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK(code_of([&] { decode_container(trailing); }) == ErrorCode::malformed_header);
    std::vector<TensorRecord> dup{recs[0], recs[0]};
    CHECK(code_of([&] { encode_container(dup); }) == ErrorCode::duplicate_name);
  }

  TEST_CASE("single conv manifest parses to a one-layer graph") {
    auto g = parse_manifest(
        "# one layer\n"
        "input data shape=3,8,8\n"
        "conv c1 weight=w1 k=3 stride=1 pad=1 out=4 first=true\n");
    REQUIRE(g.layers.size() == 1);
    CHECK(g.layers[0].kind == LayerKind::conv);
    CHECK(g.layers[0].kernel == 3);
    CHECK(infer_shapes(g)[0] == Shape{4, 8, 8});
    CHECK(parse_manifest(format_manifest(g)) == g);
  }

  TEST_CASE("missing tensor is a dangling reference naming it") {
    auto g = parse_manifest("input data shape=4,2,2\nconv c1 weight=w9 k=1 out=8 first=true\n");
    std::vector<TensorRecord> none;
    CHECK(code_of([&] { validate_graph(g, none); }) == ErrorCode::dangling_reference);
    CHECK(message_of([&] { validate_graph(g, none); }).find("w9") != std::string::npos);
  }

  TEST_CASE("K=3 declared over a [8,4,1,1] weight is a shape mismatch") {
    auto g = parse_manifest("input data shape=4,5,5\nconv c1 weight=w k=3 out=8 first=true\n");
    std::vector<float> w(32, 0.1f);
    std::vector<TensorRecord> recs{make_f32("w", {8, 4, 1, 1}, w)};
    CHECK(code_of([&] { validate_graph(g, recs); }) == ErrorCode::shape_mismatch);
  }

  TEST_CASE("manifest syntax errors") {
    CHECK(code_of([] { parse_manifest("conv c1 weight=w k=1 out=1 first=true\n"); }) ==
          ErrorCode::manifest_syntax);
    CHECK(code_of([] { parse_manifest("input data shape=1,2,2\nwidget w1\n"); }) ==
          ErrorCode::manifest_syntax);
    CHECK(code_of([] {
            parse_manifest("input data shape=1,2,2\nconv a weight=w k=1 out=1\n");
          }) == ErrorCode::manifest_syntax);
  }

  TEST_CASE("model save and load is lossless") {
    testing::TempDir dir("io");
    Model m;
    m.graph = parse_manifest("input data shape=2,3,3 afmt=e-5\n"
                             "conv c1 weight=w k=1 out=2 first=true afmt=e-3\n"
                             "relu r1\n");
    std::vector<float> w{1, 2, 3, 4};
    m.put(make_f32("w", {2, 2, 1, 1}, w));
    save_model(m, dir / "m.graph", dir / "m.qtz");
    CHECK(load_model(dir / "m.graph", dir / "m.qtz") == m);
  }
}
