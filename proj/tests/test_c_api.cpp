// SPDX-License-Identifier: Apache-2.0
// Exercises the shared library through its C header only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "qntz/qntz.h"
#include "test_util.hpp"

using nlohmann::json;
using qntz::testing::TempDir;

namespace {

// Owns a string handed out by the library.
struct Owned {
  char* s = nullptr;
  ~Owned() { qntz_string_free(s); }
  json parse() const { return json::parse(s); }
};

struct ModelPtr {
  qntz_model* m = nullptr;
  ~ModelPtr() { qntz_model_free(m); }
};

// A small trained toy shared by the cases below.
const TempDir& toy_dir() {
  static TempDir dir("capi");
  static bool built = [] {
    qntz_toy_config cfg;
    qntz_toy_config_default(&cfg);
    cfg.train_samples = 200;
    cfg.test_samples = 100;
    cfg.calibration_samples = 64;
    cfg.epochs = 1;
    Owned report;
    REQUIRE(qntz_toy_build(&cfg, dir.path().c_str(), &report.s) == QNTZ_OK);
    CHECK(report.parse()["kind"] == "toy");
    return true;
  }();
  (void)built;
  return dir;
}

std::string p(const std::string& name) { return (toy_dir() / name).string(); }

void load_float(ModelPtr& out) {
  REQUIRE(qntz_model_load(p("float.graph").c_str(), p("float.qtz").c_str(), &out.m) == QNTZ_OK);
}

}  // namespace

TEST_CASE("version, status names and defaults") {
  CHECK(std::string(qntz_version()) == "0.1.0");
  CHECK(std::string(qntz_status_name(QNTZ_OK)) == "ok");
  CHECK(std::string(qntz_status_name(QNTZ_ERR_MISSING_FORMAT)) == "missing_format");
  CHECK(std::string(qntz_status_name(static_cast<qntz_status>(1234))) == "unknown");
  qntz_quant_config q;
  qntz_quant_config_default(&q);
  CHECK(q.cluster_size == 4);
  CHECK(q.weight_bits == 2);
  qntz_finetune_config f;
  qntz_finetune_config_default(&f);
  CHECK(f.epochs > 0);
  CHECK(f.lr > 0.0);
}

TEST_CASE("load failures set a status and a message") {
  qntz_model* m = nullptr;
  CHECK(qntz_model_load("/nonexistent/a.graph", "/nonexistent/a.qtz", &m) == QNTZ_ERR_IO);
  CHECK(m == nullptr);
  CHECK(std::strlen(qntz_last_error()) > 0);

  TempDir dir("capi-bad");
  std::ofstream(dir / "bad.graph") << "input data shape=1,4,4\nconv c weight=missing k=3 out=2\n";
  std::ofstream(dir / "bad.qtz") << "garbage";
  auto st = qntz_model_load((dir / "bad.graph").c_str(), (dir / "bad.qtz").c_str(), &m);
  CHECK(st != QNTZ_OK);
  CHECK(m == nullptr);

  CHECK(qntz_model_load(nullptr, "x", &m) == QNTZ_ERR_INVALID_ARGUMENT);
  CHECK(std::string(qntz_last_error()).find("null") != std::string::npos);
}

TEST_CASE("null handles are rejected, not dereferenced") {
  Owned out;
  qntz_quant_config q;
  qntz_quant_config_default(&q);
  CHECK(qntz_quantize(nullptr, &q, &out.s) == QNTZ_ERR_INVALID_ARGUMENT);
  CHECK(qntz_analyze(nullptr, &q, 1, &out.s) == QNTZ_ERR_INVALID_ARGUMENT);
  CHECK(qntz_render(nullptr, QNTZ_FORMAT_TEXT, &out.s) == QNTZ_ERR_INVALID_ARGUMENT);
  CHECK(qntz_model_layer_count(nullptr) == 0);
  qntz_model_free(nullptr);
  qntz_string_free(nullptr);
}

TEST_CASE("quantize, calibrate and infer through the C API") {
  ModelPtr m;
  load_float(m);
  CHECK(qntz_model_layer_count(m.m) == 8);

  qntz_quant_config q;
  qntz_quant_config_default(&q);
  q.cluster_size = 0;
  CHECK(qntz_quantize(m.m, &q, nullptr) == QNTZ_ERR_INVALID_ARGUMENT);
  q.cluster_size = 4;
  Owned qr;
  REQUIRE(qntz_quantize(m.m, &q, &qr.s) == QNTZ_OK);
  CHECK(std::string(qntz_last_error()).empty());
  CHECK(qr.parse()["kind"] == "quantize");
  CHECK(qntz_quantize(m.m, &q, nullptr) != QNTZ_OK);  // already quantized

  // Integer inference needs activation formats.
  Owned early;
  CHECK(qntz_infer(m.m, p("test.qtz").c_str(), "int", 1, 0, 0, nullptr, &early.s) ==
        QNTZ_ERR_MISSING_FORMAT);
  CHECK(std::string(qntz_last_error()).find("calibrate") != std::string::npos);

  Owned cal;
  REQUIRE(qntz_calibrate(m.m, p("calib.qtz").c_str(), 1, 1, &cal.s) == QNTZ_OK);
  CHECK(cal.parse()["kind"] == "calibrate");

  TempDir out("capi-out");
  const auto outputs = (out / "out.qtz").string();
  Owned inf;
  REQUIRE(qntz_infer(m.m, p("test.qtz").c_str(), "int", 2, 1, 3, outputs.c_str(), &inf.s) == QNTZ_OK);
  auto j = inf.parse();
  CHECK(j["kind"] == "infer");
  CHECK(j["samples"] == 100);
  CHECK(j["accuracy"].get<double>() > 0.2);
  CHECK(j["top_k"].size() == 100);
  CHECK(j["top_k"][0].size() == 3);
  CHECK(qntz_infer(m.m, p("test.qtz").c_str(), "fp16", 1, 0, 0, nullptr, nullptr) ==
        QNTZ_ERR_INVALID_ARGUMENT);

  Owned text;
  REQUIRE(qntz_render(inf.s, QNTZ_FORMAT_TEXT, &text.s) == QNTZ_OK);
  CHECK(std::string(text.s).find("accuracy") != std::string::npos);

  // Saved quantized model reloads and infers identically.
  REQUIRE(qntz_model_save(m.m, (out / "q.graph").c_str(), (out / "q.qtz").c_str()) == QNTZ_OK);
  ModelPtr again;
  REQUIRE(qntz_model_load((out / "q.graph").c_str(), (out / "q.qtz").c_str(), &again.m) == QNTZ_OK);
  Owned inf2;
  REQUIRE(qntz_infer(again.m, p("test.qtz").c_str(), "int", 1, 0, 3, nullptr, &inf2.s) == QNTZ_OK);
  CHECK(inf2.parse()["accuracy"] == j["accuracy"]);
  CHECK(inf2.parse()["top_k"] == j["top_k"]);

  char hex[65];
  REQUIRE(qntz_file_sha256((out / "q.qtz").c_str(), hex) == QNTZ_OK);
  CHECK(std::strlen(hex) == 64);
}

TEST_CASE("analyze and the sweep report") {
  ModelPtr m;
  load_float(m);
  qntz_quant_config q;
  qntz_quant_config_default(&q);
  Owned a;
  REQUIRE(qntz_analyze(m.m, &q, 1, &a.s) == QNTZ_OK);
  double ratio = a.parse()["replaced_ratio"].get<double>();
  CHECK(ratio > 0.5);
  CHECK(ratio < 1.0);

  Owned empty;
  REQUIRE(qntz_report(nullptr, 0, QNTZ_FORMAT_TEXT, &empty.s) == QNTZ_OK);
  CHECK(std::string(empty.s).find("| bits |") != std::string::npos);
  const char* bad[] = {"/nonexistent/artifact.json"};
  Owned none;
  CHECK(qntz_report(bad, 1, QNTZ_FORMAT_TEXT, &none.s) != QNTZ_OK);
  CHECK(std::string(qntz_last_error()).find("artifact.json") != std::string::npos);
}

TEST_CASE("fine-tuning returns both models") {
  ModelPtr m;
  load_float(m);
  qntz_finetune_config f;
  qntz_finetune_config_default(&f);
  f.epochs = 1;
  ModelPtr shadow, quantized;
  Owned r;
  REQUIRE(qntz_finetune(m.m, p("train.qtz").c_str(), p("test.qtz").c_str(), p("calib.qtz").c_str(), &f,
                        &shadow.m, &quantized.m, &r.s) == QNTZ_OK);
  auto j = r.parse();
  CHECK(j["kind"] == "finetune");
  CHECK(j["curve"].size() == 2);
  Owned inf;
  REQUIRE(qntz_infer(quantized.m, p("test.qtz").c_str(), "int", 1, 0, 0, nullptr, &inf.s) == QNTZ_OK);
  CHECK(inf.parse()["accuracy"] == j["curve"][1]["accuracy"]);
}
