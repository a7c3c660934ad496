// SPDX-License-Identifier: Apache-2.0
#include "qntz/qntz.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <new>
#include <string>

#include "error.hpp"
#include "finetune.hpp"
#include "model_io.hpp"
#include "perf.hpp"
#include "quantize.hpp"
#include "report.hpp"
#include "toy.hpp"

struct qntz_model {
  qntz::io::Model model;
};

namespace {

using qntz::ErrorCode;
using qntz::fail;
using qntz::report::Json;

thread_local std::string g_last_error;

qntz_status record(qntz_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename Fn>
qntz_status guarded(Fn&& fn) noexcept {
  try {
    fn();
    g_last_error.clear();
    return QNTZ_OK;
  } catch (const qntz::Error& e) {
    return record(static_cast<qntz_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return record(QNTZ_ERR_INVALID_ARGUMENT, std::string("malformed report: ") + e.what());
  } catch (const std::bad_alloc&) {
    return record(QNTZ_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return record(QNTZ_ERR_INTERNAL, e.what());
  } catch (...) {
    return record(QNTZ_ERR_INTERNAL, "unknown failure");
  }
}

void require(const void* p, const char* what) {
  if (!p) fail(ErrorCode::invalid_argument, std::string(what) + " must not be null");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void emit(char** out, const Json& json) {
  if (out) *out = dup(json.dump(2) + "\n");
}

qntz::ternary::QuantConfig to_config(const qntz_quant_config* c) {
  require(c, "config");
  qntz::ternary::QuantConfig q;
  q.cluster_size = c->cluster_size;
  q.weight_bits = c->weight_bits;
  q.fc_int8 = c->fc_int8 != 0;
  q.threads = c->threads ? c->threads : 1;
  q.validate();
  return q;
}

bool has_labels(const std::vector<qntz::io::TensorRecord>& records) {
  for (const auto& r : records) {
    if (r.name.rfind("label.", 0) == 0) return true;
  }
  return false;
}

}  // namespace

extern "C" {

const char* qntz_version(void) { return qntz::report::kToolVersion; }

const char* qntz_status_name(qntz_status status) {
  if (status == QNTZ_OK) return "ok";
  if (status == QNTZ_ERR_INTERNAL) return "internal";
  if (status >= QNTZ_ERR_INVALID_ARGUMENT && status <= QNTZ_ERR_DIVERGED) {
    return qntz::error_code_name(static_cast<ErrorCode>(status));
  }
  return "unknown";
}

const char* qntz_last_error(void) { return g_last_error.c_str(); }

void qntz_string_free(char* s) { std::free(s); }

void qntz_quant_config_default(qntz_quant_config* config) {
  if (!config) return;
  qntz::ternary::QuantConfig q;
  *config = {q.cluster_size, q.weight_bits, q.fc_int8 ? 1 : 0, q.threads};
}

void qntz_toy_config_default(qntz_toy_config* config) {
  if (!config) return;
  qntz::train::ToyRecipe r;
  *config = {r.data.seed,         r.model_seed,          r.train_samples,   r.test_samples,
             r.calibration_samples, r.training.epochs, r.data.noise,    r.arch.gain_spread};
}

void qntz_finetune_config_default(qntz_finetune_config* config) {
  if (!config) return;
  qntz::train::FinetuneConfig f;
  config->epochs = f.epochs;
  config->lr = f.lr;
  config->momentum = f.momentum;
  config->batch_size = f.batch_size;
  config->seed = f.seed;
  config->quant = {f.quant.cluster_size, f.quant.weight_bits, f.quant.fc_int8 ? 1 : 0,
                   f.quant.threads};
  config->threads = f.threads;
}

qntz_status qntz_model_load(const char* graph_path, const char* container_path,
                            qntz_model** out) {
  return guarded([&] {
    require(graph_path, "graph_path");
    require(container_path, "container_path");
    require(out, "out");
    *out = nullptr;
    auto m = std::make_unique<qntz_model>();
    m->model = qntz::io::load_model(graph_path, container_path);
    *out = m.release();
  });
}

qntz_status qntz_model_save(const qntz_model* model, const char* graph_path,
                            const char* container_path) {
  return guarded([&] {
    require(model, "model");
    require(graph_path, "graph_path");
    require(container_path, "container_path");
    qntz::io::save_model(model->model, graph_path, container_path);
  });
}

void qntz_model_free(qntz_model* model) { delete model; }

size_t qntz_model_layer_count(const qntz_model* model) {
  return model ? model->model.graph.layers.size() : 0;
}

qntz_status qntz_model_describe(const qntz_model* model, char** json) {
  return guarded([&] {
    require(model, "model");
    require(json, "json");
    const auto& g = model->model.graph;
    auto shapes = qntz::io::infer_shapes(g);
    Json layers = Json::array();
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
      const auto& l = g.layers[i];
      Json j = {{"name", l.name},
                {"kind", qntz::io::layer_kind_name(l.kind)},
                {"output_shape", shapes[i]},
                {"weight_bits", l.weight_bits},
                {"cluster_size", l.cluster_size}};
      j["act_exponent"] = l.act_exponent ? Json(*l.act_exponent) : Json(nullptr);
      layers.push_back(j);
    }
    auto [bits, n] = qntz::report::model_format(g);
    Json d = {{"input", g.input_name},
              {"input_shape", g.input_shape},
              {"input_exponent", g.input_exponent ? Json(*g.input_exponent) : Json(nullptr)},
              {"weight_bits", bits},
              {"cluster_size", n},
              {"layers", layers}};
    *json = dup(d.dump(2) + "\n");
  });
}

qntz_status qntz_quantize(qntz_model* model, const qntz_quant_config* config, char** report) {
  return guarded([&] {
    require(model, "model");
    qntz::ternary::QuantizeReport r;
    auto q = qntz::ternary::quantize_model(model->model, to_config(config), &r);
    emit(report, qntz::report::to_json(r));
    model->model = std::move(q);
  });
}

qntz_status qntz_calibrate(qntz_model* model, const char* batches_path, int recompute_bn,
                           size_t threads, char** report) {
  return guarded([&] {
    require(model, "model");
    require(batches_path, "batches_path");
    auto batches = qntz::toy::input_batches(qntz::io::load_container(batches_path));
    threads = threads ? threads : 1;
    auto m = model->model;
    std::vector<qntz::engine::BatchNormUpdate> bn;
    if (recompute_bn) bn = qntz::engine::recompute_batchnorm(m, batches, threads);
    auto formats = qntz::engine::calibrate(m, batches, threads);
    emit(report, qntz::report::calibration_json(formats, bn));
    model->model = std::move(m);
  });
}

qntz_status qntz_infer(const qntz_model* model, const char* input_path, const char* mode,
                       size_t threads, int dump_activations, size_t top_k,
                       const char* output_path, char** report) {
  return guarded([&] {
    require(model, "model");
    require(input_path, "input_path");
    require(mode, "mode");
    auto parsed = qntz::engine::parse_mode(mode);
    if (!parsed) fail(ErrorCode::invalid_argument, std::string("unknown mode '") + mode + "'");

    auto records = qntz::io::load_container(input_path);
    auto batches = qntz::toy::input_batches(records);
    const bool labelled = has_labels(records);
    auto data = qntz::toy::from_records(records);

    qntz::engine::Plan plan(model->model, *parsed);
    const auto& sample = model->model.graph.input_shape;
    qntz::report::InferSummary s;
    s.mode = mode;
    s.labelled = labelled;
    std::tie(s.weight_bits, s.cluster_size) = qntz::report::model_format(model->model.graph);
    std::vector<qntz::io::TensorRecord> out;
    std::size_t offset = 0;
    for (std::size_t k = 0; k < batches.size(); ++k) {
      auto x = qntz::engine::as_batch(batches[k], sample);
      const std::size_t count = x.shape[0];
      auto r = plan.run(x, {threads ? threads : 1, dump_activations != 0});
      s.counters += r.total;
      s.samples += count;
      const std::size_t classes = count ? r.output.size() / count : 0;
      s.classes = classes;
      for (std::size_t i = 0; i < count; ++i) {
        auto row = std::span<const float>(r.output.data).subspan(i * classes, classes);
        if (labelled && qntz::toy::argmax(row) == data.labels[offset + i]) ++s.correct;
        if (top_k) s.top_k.push_back(qntz::report::top_classes(row, top_k));
      }
      offset += count;
      if (output_path) {
        const auto suffix = "." + std::to_string(k);
        out.push_back(qntz::io::make_f32("output" + suffix, r.output.shape, r.output.data));
        for (auto& a : r.activations) {
          a.name += suffix;
          out.push_back(std::move(a));
        }
      }
    }
    if (output_path) qntz::io::save_container(out, output_path);
    emit(report, qntz::report::to_json(s));
  });
}

qntz_status qntz_analyze(const qntz_model* model, const qntz_quant_config* config, size_t batch,
                         char** report) {
  return guarded([&] {
    require(model, "model");
    require(report, "report");
    auto r = qntz::perf::count_graph(model->model.graph, to_config(config), batch ? batch : 1);
    emit(report, qntz::report::to_json(r));
  });
}

qntz_status qntz_toy_build(const qntz_toy_config* config, const char* directory, char** report) {
  return guarded([&] {
    require(config, "config");
    require(directory, "directory");
    if (config->train_samples == 0 || config->test_samples == 0 || config->calibration_samples == 0) {
      fail(ErrorCode::invalid_argument, "toy datasets need at least one sample each");
    }
    qntz::train::ToyRecipe r;
    r.data.seed = config->data_seed;
    r.data.noise = config->noise;
    r.model_seed = config->model_seed;
    r.train_samples = config->train_samples;
    r.test_samples = config->test_samples;
    r.calibration_samples = config->calibration_samples;
    r.training.epochs = config->epochs;
    r.arch.gain_spread = config->gain_spread;
    auto setup = qntz::train::prepare_toy(r);

    std::filesystem::path dir(directory);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorCode::io, "cannot create '" + dir.string() + "': " + ec.message());
    qntz::io::save_container(qntz::toy::to_records(setup.train, 256), dir / "train.qtz");
    qntz::io::save_container(qntz::toy::to_records(setup.test, 256), dir / "test.qtz");
    qntz::io::save_container(qntz::toy::to_records(setup.calibration, r.calibration_batch),
                             dir / "calib.qtz");
    qntz::io::save_model(setup.float_model, dir / "float.graph", dir / "float.qtz");

    Json j = {{"kind", "toy"},
              {"train_samples", r.train_samples},
              {"test_samples", r.test_samples},
              {"calibration_samples", r.calibration_samples},
              {"float_accuracy", setup.curve.empty() ? 0.0 : setup.curve.back().accuracy},
              {"curve", qntz::report::curve_json(setup.curve).at("curve")}};
    emit(report, j);
  });
}

qntz_status qntz_finetune(const qntz_model* float_model, const char* train_path,
                          const char* eval_path, const char* calibration_path,
                          const qntz_finetune_config* config, qntz_model** shadow,
                          qntz_model** quantized, char** report) {
  return guarded([&] {
    require(float_model, "float_model");
    require(train_path, "train_path");
    require(eval_path, "eval_path");
    require(calibration_path, "calibration_path");
    require(config, "config");
    if (shadow) *shadow = nullptr;
    if (quantized) *quantized = nullptr;
    auto train_set = qntz::toy::from_records(qntz::io::load_container(train_path));
    auto eval = qntz::toy::from_records(qntz::io::load_container(eval_path));
    auto calib = qntz::toy::input_batches(qntz::io::load_container(calibration_path));

    qntz::train::FinetuneConfig fc;
    fc.epochs = config->epochs;
    fc.lr = config->lr;
    fc.momentum = config->momentum;
    fc.batch_size = config->batch_size;
    fc.seed = config->seed;
    fc.quant = to_config(&config->quant);
    fc.threads = config->threads ? config->threads : 1;
    if (fc.batch_size == 0) fail(ErrorCode::invalid_argument, "batch size must be positive");
    if (!(fc.lr > 0)) fail(ErrorCode::invalid_argument, "learning rate must be positive");

    auto result = qntz::train::finetune(float_model->model, train_set, eval, calib, fc);
    auto s = std::make_unique<qntz_model>();
    auto q = std::make_unique<qntz_model>();
    s->model = result.shadow.to_model();
    q->model = std::move(result.quantized);
    emit(report, qntz::report::curve_json(result.curve));
    if (shadow) *shadow = s.release();
    if (quantized) *quantized = q.release();
  });
}

qntz_status qntz_render(const char* report_json, qntz_format format, char** out) {
  return guarded([&] {
    require(report_json, "report_json");
    require(out, "out");
    auto j = Json::parse(report_json);
    switch (format) {
      case QNTZ_FORMAT_JSON: *out = dup(j.dump(2) + "\n"); break;
      case QNTZ_FORMAT_TEXT: *out = dup(qntz::report::render_text(j)); break;
      case QNTZ_FORMAT_CSV: *out = dup(qntz::report::render_csv(j)); break;
      default: fail(ErrorCode::invalid_argument, "unknown format");
    }
  });
}

qntz_status qntz_report(const char* const* paths, size_t count, qntz_format format, char** out) {
  return guarded([&] {
    require(out, "out");
    if (count) require(paths, "paths");
    std::vector<std::filesystem::path> files;
    for (std::size_t i = 0; i < count; ++i) {
      require(paths[i], "path");
      files.emplace_back(paths[i]);
    }
    auto sweep = qntz::report::consolidate(files);
    switch (format) {
      case QNTZ_FORMAT_TEXT: *out = dup(qntz::report::sweep_markdown(sweep)); break;
      case QNTZ_FORMAT_CSV: *out = dup(qntz::report::sweep_csv(sweep)); break;
      default: fail(ErrorCode::invalid_argument, "sweep reports render as text or CSV");
    }
  });
}

qntz_status qntz_file_sha256(const char* path, char* hex) {
  return guarded([&] {
    require(path, "path");
    require(hex, "hex");
    auto digest = qntz::report::file_sha256(path);
    std::memcpy(hex, digest.c_str(), digest.size() + 1);
  });
}

}  // extern "C"
