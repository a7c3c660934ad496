// SPDX-License-Identifier: Apache-2.0
// qntz: command-line front end over the qntz C API.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "qntz/qntz.h"

namespace {

using json = nlohmann::ordered_json;

// A failed library call; main() turns it into exit code 1.
struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(qntz_status status) {
  if (status != QNTZ_OK) {
    throw Failure(std::string(qntz_status_name(status)) + ": " + qntz_last_error());
  }
}

struct CString {
  char* p = nullptr;
  ~CString() { qntz_string_free(p); }
  std::string str() const { return p ? p : ""; }
};

struct ModelHandle {
  qntz_model* p = nullptr;
  ~ModelHandle() { qntz_model_free(p); }
};

std::string graph_path(const std::string& prefix) { return prefix + ".graph"; }
std::string tensors_path(const std::string& prefix) { return prefix + ".qtz"; }

void load(ModelHandle& m, const std::string& prefix) {
  check(qntz_model_load(graph_path(prefix).c_str(), tensors_path(prefix).c_str(), &m.p));
}

void save(const ModelHandle& m, const std::string& prefix) {
  check(qntz_model_save(m.p, graph_path(prefix).c_str(), tensors_path(prefix).c_str()));
}

std::string sha256(const std::string& path) {
  char hex[65];
  check(qntz_file_sha256(path.c_str(), hex));
  return hex;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Failure("io: cannot write '" + path + "'");
}

// What produced an artifact: tool version, command line, effective
// configuration and digests of every input and output file.
struct RunManifest {
  std::vector<std::string> command;
  json config = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  json to_json(bool with_outputs) const {
    json in = json::object();
    for (const auto& p : inputs) in[p] = sha256(p);
    json j = {{"tool", "qntz"}, {"version", qntz_version()}, {"command", command},
              {"config", config}, {"inputs", in}};
    if (with_outputs) {
      json out = json::object();
      for (const auto& p : outputs) out[p] = sha256(p);
      j["outputs"] = out;
    }
    return j;
  }
};

struct Context {
  RunManifest run;
  std::size_t threads = 1;
};

std::string render(const std::string& report, qntz_format format) {
  CString out;
  check(qntz_render(report.c_str(), format, &out.p));
  return out.str();
}

// Prints the text table and writes the optional machine outputs. JSON
// reports carry their run manifest inline.
void publish(Context& ctx, const std::string& report, const std::string& json_path,
             const std::string& csv_path) {
  std::cout << render(report, QNTZ_FORMAT_TEXT);
  if (!json_path.empty()) {
    auto j = json::parse(report);
    j["run"] = ctx.run.to_json(false);
    write_text(json_path, j.dump(2) + "\n");
  }
  if (!csv_path.empty()) {
    write_text(csv_path, render(report, QNTZ_FORMAT_CSV));
    ctx.run.outputs.push_back(csv_path);
  }
}

void write_manifest(const Context& ctx, const std::string& path) {
  write_text(path, ctx.run.to_json(true).dump(2) + "\n");
}

void add_model_outputs(Context& ctx, const std::string& prefix) {
  ctx.run.outputs.push_back(graph_path(prefix));
  ctx.run.outputs.push_back(tensors_path(prefix));
}

void add_model_inputs(Context& ctx, const std::string& prefix) {
  ctx.run.inputs.push_back(graph_path(prefix));
  ctx.run.inputs.push_back(tensors_path(prefix));
}

struct QuantFlags {
  std::size_t cluster_size = 4;
  int weight_bits = 2;
  bool fc_int8 = false;

  void add(CLI::App* app, std::size_t default_cluster) {
    cluster_size = default_cluster;
    app->add_option("-N,--cluster-size", cluster_size, "Filters sharing one scale")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app->add_option("--weight-bits", weight_bits, "2 (ternary) or 4")
        ->check(CLI::IsMember({2, 4}))
        ->capture_default_str();
    app->add_flag("--fc-int8,!--no-fc-int8", fc_int8, "Keep fully connected weights at 8 bits");
  }

  qntz_quant_config config(std::size_t threads) const {
    return {cluster_size, weight_bits, fc_int8 ? 1 : 0, threads};
  }

  json echo() const {
    return {{"cluster_size", cluster_size}, {"weight_bits", weight_bits}, {"fc_int8", fc_int8}};
  }
};

// ---------------------------------------------------------------------------

struct ToyCmd {
  std::string out;
  qntz_toy_config cfg{};
  std::string json_path, csv_path;

  void add(CLI::App& app) {
    qntz_toy_config_default(&cfg);
    auto* c = app.add_subcommand("toy", "Build the synthetic task and train its float model");
    c->add_option("--out", out, "Output directory")->required();
    c->add_option("--data-seed", cfg.data_seed)->capture_default_str();
    c->add_option("--model-seed", cfg.model_seed)->capture_default_str();
    c->add_option("--train", cfg.train_samples, "Training samples")->capture_default_str();
    c->add_option("--test", cfg.test_samples, "Test samples")->capture_default_str();
    c->add_option("--calib", cfg.calibration_samples, "Calibration samples")->capture_default_str();
    c->add_option("--epochs", cfg.epochs)->capture_default_str();
    c->add_option("--noise", cfg.noise)->check(CLI::NonNegativeNumber)->capture_default_str();
    c->add_option("--gain-spread", cfg.gain_spread)->check(CLI::NonNegativeNumber)->capture_default_str();
    c->add_option("--json", json_path, "Write the report as JSON");
    c->add_option("--csv", csv_path, "Write the float training curve as CSV");
    c->callback([this] { cmd = true; });
  }

  int run(Context& ctx) {
    ctx.run.config = {{"data_seed", cfg.data_seed},   {"model_seed", cfg.model_seed},
                      {"train", cfg.train_samples},   {"test", cfg.test_samples},
                      {"calib", cfg.calibration_samples}, {"epochs", cfg.epochs},
                      {"noise", cfg.noise},           {"gain_spread", cfg.gain_spread}};
    CString report;
    check(qntz_toy_build(&cfg, out.c_str(), &report.p));
    for (const char* f : {"train.qtz", "test.qtz", "calib.qtz", "float.graph", "float.qtz"}) {
      ctx.run.outputs.push_back(out + "/" + f);
    }
    publish(ctx, report.str(), json_path, csv_path);
    write_manifest(ctx, out + "/run.json");
    return 0;
  }

  bool cmd = false;
};

struct QuantizeCmd {
  std::string model, out, calib, json_path, csv_path;
  QuantFlags quant;
  bool no_bn = false;
  bool cmd = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("quantize", "Quantize conv/fc weights of a float model");
    c->add_option("--model", model, "Input model prefix (<p>.graph, <p>.qtz)")->required();
    c->add_option("--out", out, "Output model prefix")->required();
    quant.add(c, 4);
    c->add_option("--calib", calib, "Calibration batches; also recomputes BN and sets formats");
    c->add_flag("--no-bn-recompute", no_bn, "With --calib, keep batch-norm statistics");
    c->add_option("--json", json_path, "Write the error report as JSON");
    c->add_option("--csv", csv_path, "Write the error report as CSV");
    c->callback([this] { cmd = true; });
  }

  int run(Context& ctx) {
    ctx.run.config = quant.echo();
    ctx.run.config["calib"] = calib;
    ctx.run.config["bn_recompute"] = !calib.empty() && !no_bn;
    add_model_inputs(ctx, model);
    ModelHandle m;
    load(m, model);
    auto cfg = quant.config(ctx.threads);
    CString report;
    check(qntz_quantize(m.p, &cfg, &report.p));
    if (!calib.empty()) {
      ctx.run.inputs.push_back(calib);
      CString cal;
      check(qntz_calibrate(m.p, calib.c_str(), no_bn ? 0 : 1, ctx.threads, &cal.p));
    }
    save(m, out);
    add_model_outputs(ctx, out);
    publish(ctx, report.str(), json_path, csv_path);
    write_manifest(ctx, out + ".run.json");
    return 0;
  }
};

struct CalibrateCmd {
  std::string model, data, out, json_path, csv_path;
  bool no_bn = false;
  bool cmd = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("calibrate", "Choose activation formats from sample data");
    c->add_option("--model", model, "Input model prefix")->required();
    c->add_option("--data", data, "Container with input.<n> batches")->required();
    c->add_option("--out", out, "Output model prefix")->required();
    c->add_flag("--no-bn-recompute", no_bn, "Keep batch-norm statistics");
    c->add_option("--json", json_path, "Write the report as JSON");
    c->add_option("--csv", csv_path, "Write the formats as CSV");
    c->callback([this] { cmd = true; });
  }

  int run(Context& ctx) {
    ctx.run.config = {{"bn_recompute", !no_bn}};
    add_model_inputs(ctx, model);
    ctx.run.inputs.push_back(data);
    ModelHandle m;
    load(m, model);
    CString report;
    check(qntz_calibrate(m.p, data.c_str(), no_bn ? 0 : 1, ctx.threads, &report.p));
    save(m, out);
    add_model_outputs(ctx, out);
    publish(ctx, report.str(), json_path, csv_path);
    write_manifest(ctx, out + ".run.json");
    return 0;
  }
};

struct InferCmd {
  std::string model, input, mode = "int", out, json_path, csv_path;
  bool dump = false;
  std::size_t top_k = 0;
  bool cmd = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("infer", "Run a model over input batches");
    c->add_option("--model", model, "Model prefix")->required();
    c->add_option("--input", input, "Container with input.<n> (and optional label.<n>)")->required();
    c->add_option("--mode", mode, "float, quant or int")
        ->check(CLI::IsMember({"float", "quant", "int"}))
        ->capture_default_str();
    c->add_option("--out", out, "Write output.<n> records to this container");
    c->add_flag("--dump-activations", dump, "Also write act.<layer>.<n> records");
    c->add_option("--top-k", top_k, "Print the best k classes per sample");
    c->add_option("--json", json_path, "Write the summary as JSON");
    c->add_option("--csv", csv_path, "Write the summary as CSV");
    c->callback([this] { cmd = true; });
  }

  int run(Context& ctx) {
    if (dump && out.empty()) throw CLI::ValidationError("--dump-activations", "requires --out");
    ctx.run.config = {{"mode", mode}, {"dump_activations", dump}, {"top_k", top_k}};
    add_model_inputs(ctx, model);
    ctx.run.inputs.push_back(input);
    ModelHandle m;
    load(m, model);
    CString report;
    check(qntz_infer(m.p, input.c_str(), mode.c_str(), ctx.threads, dump ? 1 : 0, top_k,
                     out.empty() ? nullptr : out.c_str(), &report.p));
    if (!out.empty()) ctx.run.outputs.push_back(out);
    publish(ctx, report.str(), json_path, csv_path);
    if (!out.empty()) write_manifest(ctx, out + ".run.json");
    return 0;
  }
};

struct AnalyzeCmd {
  std::string model, json_path, csv_path;
  QuantFlags quant;
  std::size_t batch = 1;
  bool cmd = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("analyze", "Count 8-bit multiplies and accumulations");
    c->add_option("--model", model, "Model prefix")->required();
    quant.add(c, 4);
    c->add_option("--batch", batch, "Samples per run")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--json", json_path, "Write the counts as JSON");
    c->add_option("--csv", csv_path, "Write the counts as CSV");
    c->callback([this] { cmd = true; });
  }

  int run(Context& ctx) {
    ctx.run.config = quant.echo();
    ctx.run.config["batch"] = batch;
    add_model_inputs(ctx, model);
    ModelHandle m;
    load(m, model);
    auto cfg = quant.config(ctx.threads);
    CString report;
    check(qntz_analyze(m.p, &cfg, batch, &report.p));
    publish(ctx, report.str(), json_path, csv_path);
    return 0;
  }
};

struct FinetuneCmd {
  std::string model, train, eval, calib, out, checkpoint, json_path, csv_path;
  qntz_finetune_config cfg{};
  QuantFlags quant;
  bool cmd = false;

  void add(CLI::App& app) {
    qntz_finetune_config_default(&cfg);
    auto* c = app.add_subcommand("finetune", "Low-precision fine-tuning of a float model");
    c->add_option("--model", model, "Float model (or checkpoint) prefix")->required();
    c->add_option("--train", train, "Training container")->required();
    c->add_option("--eval", eval, "Evaluation container")->required();
    c->add_option("--calib", calib, "Calibration container")->required();
    c->add_option("--out", out, "Quantized model prefix")->required();
    c->add_option("--checkpoint", checkpoint, "Write the float shadow weights to this prefix");
    c->add_option("--epochs", cfg.epochs)->capture_default_str();
    c->add_option("--lr", cfg.lr)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--momentum", cfg.momentum)->check(CLI::Range(0.0, 1.0))->capture_default_str();
    c->add_option("--batch-size", cfg.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--seed", cfg.seed)->capture_default_str();
    quant.add(c, cfg.quant.cluster_size);
    quant.fc_int8 = cfg.quant.fc_int8 != 0;
    c->add_option("--json", json_path, "Write the accuracy curve as JSON");
    c->add_option("--csv", csv_path, "Write the accuracy curve as CSV");
    c->callback([this] { cmd = true; });
  }

  int run(Context& ctx) {
    cfg.quant = quant.config(ctx.threads);
    cfg.threads = ctx.threads;
    ctx.run.config = quant.echo();
    ctx.run.config.update({{"epochs", cfg.epochs}, {"lr", cfg.lr}, {"momentum", cfg.momentum},
                           {"batch_size", cfg.batch_size}, {"seed", cfg.seed}});
    add_model_inputs(ctx, model);
    for (const auto* p : {&train, &eval, &calib}) ctx.run.inputs.push_back(*p);
    ModelHandle m, shadow, quantized;
    load(m, model);
    CString report;
    check(qntz_finetune(m.p, train.c_str(), eval.c_str(), calib.c_str(), &cfg, &shadow.p,
                        &quantized.p, &report.p));
    save(quantized, out);
    add_model_outputs(ctx, out);
    if (!checkpoint.empty()) {
      save(shadow, checkpoint);
      add_model_outputs(ctx, checkpoint);
    }
    publish(ctx, report.str(), json_path, csv_path);
    write_manifest(ctx, out + ".run.json");
    return 0;
  }
};

struct ReportCmd {
  std::vector<std::string> artifacts;
  std::string out, csv_path;
  bool cmd = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("report", "Consolidate quantize/infer JSON artifacts by cluster size");
    c->add_option("artifacts", artifacts, "JSON artifacts from --json");
    c->add_option("--out", out, "Write the markdown table to a file instead of stdout");
    c->add_option("--csv", csv_path, "Write the table as CSV");
    c->callback([this] { cmd = true; });
  }

  int run(Context& ctx) {
    ctx.run.inputs = artifacts;
    std::vector<const char*> paths;
    for (const auto& a : artifacts) paths.push_back(a.c_str());
    CString md, csv;
    check(qntz_report(paths.data(), paths.size(), QNTZ_FORMAT_TEXT, &md.p));
    if (out.empty()) {
      std::cout << md.str();
    } else {
      write_text(out, md.str());
      ctx.run.outputs.push_back(out);
    }
    if (!csv_path.empty()) {
      check(qntz_report(paths.data(), paths.size(), QNTZ_FORMAT_CSV, &csv.p));
      write_text(csv_path, csv.str());
      ctx.run.outputs.push_back(csv_path);
    }
    if (!ctx.run.outputs.empty()) write_manifest(ctx, ctx.run.outputs.front() + ".run.json");
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ternary weight quantization toolkit"};
  app.set_version_flag("--version", std::string(qntz_version()));
  app.require_subcommand(1);
  Context ctx;
  auto* threads = app.add_option("--threads", ctx.threads, "Worker threads (results do not depend on it)")
      ->envname("QNTZ_THREADS")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  ToyCmd toy;
  QuantizeCmd quantize;
  CalibrateCmd calibrate;
  InferCmd infer;
  AnalyzeCmd analyze;
  FinetuneCmd finetune;
  ReportCmd report;
  toy.add(app);
  quantize.add(app);
  calibrate.add(app);
  infer.add(app);
  analyze.add(app);
  finetune.add(app);
  report.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  // CLI11 silently skips an environment value that fails validation.
  if (threads->count() == 0) {
    if (const char* env = std::getenv("QNTZ_THREADS"); env && *env) {
      std::size_t n = 0;
      if (!CLI::detail::lexical_cast(std::string(env), n) || n == 0) {
        std::cerr << "QNTZ_THREADS: expected a positive integer, got '" << env << "'\n";
        return 2;
      }
    }
  }
  ctx.run.command = {"qntz"};
  ctx.run.command.insert(ctx.run.command.end(), argv + 1, argv + argc);

  try {
    if (toy.cmd) return toy.run(ctx);
    if (quantize.cmd) return quantize.run(ctx);
    if (calibrate.cmd) return calibrate.run(ctx);
    if (infer.cmd) return infer.run(ctx);
    if (analyze.cmd) return analyze.run(ctx);
    if (finetune.cmd) return finetune.run(ctx);
    if (report.cmd) return report.run(ctx);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Failure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
