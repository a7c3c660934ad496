// SPDX-License-Identifier: Apache-2.0
#include "report.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <sstream>

#include "error.hpp"

namespace qntz::report {

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string rel(double num, double den) { return den > 0 ? fmt("%.4f", num / den) : "-"; }

// Left-aligned first column, right-aligned rest.
class Table {
 public:
  explicit Table(std::vector<std::string> header) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

  std::string str() const {
    std::vector<std::size_t> width(rows_.front().size(), 0);
    for (const auto& r : rows_) {
      for (std::size_t i = 0; i < r.size() && i < width.size(); ++i) {
        width[i] = std::max(width[i], r[i].size());
      }
    }
    std::ostringstream os;
    for (const auto& r : rows_) {
      for (std::size_t i = 0; i < r.size() && i < width.size(); ++i) {
        if (i) os << "  ";
        std::string pad(width[i] - r[i].size(), ' ');
        os << (i == 0 ? r[i] + pad : pad + r[i]);
      }
      os << '\n';
    }
    return os.str();
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

Json counters_json(const engine::OpCounters& c) {
  return {{"mults_8bit", c.mults_8bit},
          {"accs_ternary", c.accs_ternary},
          {"accs_8bit", c.accs_8bit},
          {"overhead", c.overhead}};
}

}  // namespace

Json to_json(const ternary::QuantizeReport& report) {
  Json layers = Json::array();
  for (const auto& l : report.layers) {
    layers.push_back({{"name", l.name},
                      {"kind", l.kind},
                      {"weight_bits", l.weight_bits},
                      {"cluster_size", l.cluster_size},
                      {"clusters", l.clusters},
                      {"scale_exponent", l.scale_exponent},
                      {"error_exact", l.error_exact},
                      {"error_quantized", l.error_quantized},
                      {"weight_energy", l.weight_energy}});
  }
  return {{"kind", "quantize"},
          {"config",
           {{"cluster_size", report.config.cluster_size},
            {"weight_bits", report.config.weight_bits},
            {"fc_int8", report.config.fc_int8}}},
          {"layers", layers},
          {"totals",
           {{"error_exact", report.total_error_exact()},
            {"error_quantized", report.total_error_quantized()},
            {"weight_energy", report.total_energy()}}}};
}

Json to_json(const perf::OpCountReport& report) {
  Json layers = Json::array();
  auto row = [](const perf::LayerCount& l) {
    return Json{{"name", l.name},
                {"kind", l.kind},
                {"weight_bits", l.weight_bits},
                {"cluster_size", l.cluster_size},
                {"macs", l.macs},
                {"mults_8bit", l.mults_8bit},
                {"accs_ternary", l.accs_ternary},
                {"accs_8bit", l.accs_8bit},
                {"overhead", l.overhead}};
  };
  for (const auto& l : report.layers) layers.push_back(row(l));
  return {{"kind", "analyze"},
          {"batch", report.batch},
          {"layers", layers},
          {"total", row(report.total())},
          {"replaced_ratio", report.replaced_ratio()}};
}

perf::OpCountReport opcount_from_json(const Json& json) {
  perf::OpCountReport r;
  r.batch = json.at("batch").get<std::size_t>();
  for (const auto& j : json.at("layers")) {
    perf::LayerCount l;
    l.name = j.at("name").get<std::string>();
    l.kind = j.at("kind").get<std::string>();
    l.weight_bits = j.at("weight_bits").get<int>();
    l.cluster_size = j.at("cluster_size").get<std::size_t>();
    l.macs = j.at("macs").get<std::uint64_t>();
    l.mults_8bit = j.at("mults_8bit").get<std::uint64_t>();
    l.accs_ternary = j.at("accs_ternary").get<std::uint64_t>();
    l.accs_8bit = j.at("accs_8bit").get<std::uint64_t>();
    l.overhead = j.at("overhead").get<std::uint64_t>();
    r.layers.push_back(std::move(l));
  }
  return r;
}

Json calibration_json(std::span<const engine::LayerCalibration> formats,
                      std::span<const engine::BatchNormUpdate> batchnorm) {
  Json f = Json::array();
  for (const auto& c : formats) {
    f.push_back({{"name", c.name},
                 {"max_abs", c.stats.max_abs},
                 {"samples", c.stats.sample_count},
                 {"exponent", c.exponent}});
  }
  Json b = Json::array();
  for (const auto& u : batchnorm) {
    b.push_back({{"name", u.name},
                 {"old_mean", u.old_mean},
                 {"new_mean", u.new_mean},
                 {"old_var", u.old_var},
                 {"new_var", u.new_var}});
  }
  return {{"kind", "calibrate"}, {"formats", f}, {"batchnorm", b}};
}

Json to_json(const InferSummary& s) {
  Json j = {{"kind", "infer"},
            {"mode", s.mode},
            {"weight_bits", s.weight_bits},
            {"cluster_size", s.cluster_size},
            {"samples", s.samples},
            {"classes", s.classes},
            {"labelled", s.labelled}};
  if (s.labelled) {
    j["correct"] = s.correct;
    j["accuracy"] = s.samples ? static_cast<double>(s.correct) / static_cast<double>(s.samples) : 0.0;
  }
  j["counters"] = counters_json(s.counters);
  if (!s.top_k.empty()) j["top_k"] = s.top_k;
  return j;
}

std::vector<std::size_t> top_classes(std::span<const float> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

std::pair<int, std::size_t> model_format(const io::ModelGraph& graph) {
  bool any8 = false;
  for (const auto& l : graph.layers) {
    if (!is_compute(l.kind)) continue;
    if (l.weight_bits == 2 || l.weight_bits == 4) return {l.weight_bits, l.cluster_size};
    if (l.weight_bits == 8) any8 = true;
  }
  return {any8 ? 8 : 32, 0};
}

Json curve_json(std::span<const train::EpochPoint> curve) {
  Json points = Json::array();
  for (const auto& p : curve) {
    points.push_back({{"epoch", p.epoch}, {"train_loss", p.train_loss}, {"accuracy", p.accuracy}});
  }
  return {{"kind", "finetune"}, {"curve", points}};
}

namespace {

std::string quantize_text(const Json& r) {
  Table t({"layer", "kind", "bits", "N", "clusters", "wexp", "err_exact", "err_q", "rel_err"});
  for (const auto& l : r.at("layers")) {
    const double energy = l.at("weight_energy").get<double>();
    t.add({l.at("name").get<std::string>(), l.at("kind").get<std::string>(),
           std::to_string(l.at("weight_bits").get<int>()),
           std::to_string(l.at("cluster_size").get<std::size_t>()),
           std::to_string(l.at("clusters").get<std::size_t>()),
           std::to_string(l.at("scale_exponent").get<int>()),
           fmt("%.6g", l.at("error_exact").get<double>()),
           fmt("%.6g", l.at("error_quantized").get<double>()),
           rel(l.at("error_quantized").get<double>(), energy)});
  }
  const auto& tot = r.at("totals");
  t.add({"total", "-", "-", "-", "-", "-", fmt("%.6g", tot.at("error_exact").get<double>()),
         fmt("%.6g", tot.at("error_quantized").get<double>()),
         rel(tot.at("error_quantized").get<double>(), tot.at("weight_energy").get<double>())});
  return t.str();
}

std::string quantize_csv(const Json& r) {
  std::ostringstream os;
  os << "layer,kind,bits,cluster,clusters,wexp,error_exact,error_quantized,weight_energy\n";
  for (const auto& l : r.at("layers")) {
    os << l.at("name").get<std::string>() << ',' << l.at("kind").get<std::string>() << ','
       << l.at("weight_bits").get<int>() << ',' << l.at("cluster_size").get<std::size_t>() << ','
       << l.at("clusters").get<std::size_t>() << ',' << l.at("scale_exponent").get<int>() << ','
       << fmt("%.9g", l.at("error_exact").get<double>()) << ','
       << fmt("%.9g", l.at("error_quantized").get<double>()) << ','
       << fmt("%.9g", l.at("weight_energy").get<double>()) << '\n';
  }
  return os.str();
}

double max_abs_diff(const Json& a, const Json& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    m = std::max(m, std::fabs(a[i].get<double>() - b[i].get<double>()));
  }
  return m;
}

std::string calibrate_text(const Json& r) {
  Table t({"tensor", "max_abs", "exponent", "step"});
  for (const auto& f : r.at("formats")) {
    int e = f.at("exponent").get<int>();
    t.add({f.at("name").get<std::string>(), fmt("%.6g", f.at("max_abs").get<double>()),
           std::to_string(e), fmt("%.6g", std::ldexp(1.0, e))});
  }
  std::string out = t.str();
  if (!r.at("batchnorm").empty()) {
    Table b({"batchnorm", "max|d_mean|", "max|d_var|"});
    for (const auto& u : r.at("batchnorm")) {
      b.add({u.at("name").get<std::string>(),
             fmt("%.6g", max_abs_diff(u.at("old_mean"), u.at("new_mean"))),
             fmt("%.6g", max_abs_diff(u.at("old_var"), u.at("new_var")))});
    }
    out += "\n" + b.str();
  }
  return out;
}

std::string calibrate_csv(const Json& r) {
  std::ostringstream os;
  os << "tensor,max_abs,exponent\n";
  for (const auto& f : r.at("formats")) {
    os << f.at("name").get<std::string>() << ',' << fmt("%.9g", f.at("max_abs").get<double>())
       << ',' << f.at("exponent").get<int>() << '\n';
  }
  return os.str();
}

std::string infer_text(const Json& r) {
  std::ostringstream os;
  os << "mode " << r.at("mode").get<std::string>() << "  samples " << r.at("samples").get<std::size_t>()
     << "  classes " << r.at("classes").get<std::size_t>();
  if (r.at("labelled").get<bool>()) {
    os << "  correct " << r.at("correct").get<std::size_t>() << "  accuracy "
       << fmt("%.4f", r.at("accuracy").get<double>());
  }
  os << '\n';
  const auto& c = r.at("counters");
  if (c.at("accs_ternary").get<std::uint64_t>() + c.at("accs_8bit").get<std::uint64_t>() > 0) {
    os << "mults_8bit " << c.at("mults_8bit").get<std::uint64_t>() << "  accs_ternary "
       << c.at("accs_ternary").get<std::uint64_t>() << "  accs_8bit "
       << c.at("accs_8bit").get<std::uint64_t>() << "  overhead "
       << c.at("overhead").get<std::uint64_t>() << '\n';
  }
  if (r.contains("top_k")) {
    std::size_t i = 0;
    for (const auto& row : r.at("top_k")) {
      os << "sample " << i++ << ':';
      for (const auto& c : row) os << ' ' << c.get<std::size_t>();
      os << '\n';
    }
  }
  return os.str();
}

std::string infer_csv(const Json& r) {
  std::ostringstream os;
  os << "mode,samples,classes,correct,accuracy\n";
  const bool labelled = r.at("labelled").get<bool>();
  os << r.at("mode").get<std::string>() << ',' << r.at("samples").get<std::size_t>() << ','
     << r.at("classes").get<std::size_t>() << ','
     << (labelled ? std::to_string(r.at("correct").get<std::size_t>()) : "") << ','
     << (labelled ? fmt("%.6f", r.at("accuracy").get<double>()) : "") << '\n';
  return os.str();
}

std::string finetune_text(const Json& r) {
  Table t({"epoch", "train_loss", "accuracy"});
  for (const auto& p : r.at("curve")) {
    t.add({std::to_string(p.at("epoch").get<std::size_t>()),
           p.at("epoch").get<std::size_t>() ? fmt("%.6f", p.at("train_loss").get<double>()) : "-",
           fmt("%.4f", p.at("accuracy").get<double>())});
  }
  return t.str();
}

std::string finetune_csv(const Json& r) {
  std::ostringstream os;
  os << "epoch,train_loss,accuracy\n";
  for (const auto& p : r.at("curve")) {
    os << p.at("epoch").get<std::size_t>() << ',' << fmt("%.9g", p.at("train_loss").get<double>())
       << ',' << fmt("%.6f", p.at("accuracy").get<double>()) << '\n';
  }
  return os.str();
}

std::string toy_text(const Json& r) {
  std::ostringstream os;
  os << "train " << r.at("train_samples").get<std::size_t>() << "  test "
     << r.at("test_samples").get<std::size_t>() << "  calibration "
     << r.at("calibration_samples").get<std::size_t>() << "\n";
  os << "float accuracy " << fmt("%.4f", r.at("float_accuracy").get<double>()) << '\n';
  return os.str();
}

std::string kind_of(const Json& report) {
  if (!report.is_object() || !report.contains("kind") || !report.at("kind").is_string()) {
    fail(ErrorCode::invalid_argument, "report has no \"kind\"");
  }
  return report.at("kind").get<std::string>();
}

}  // namespace

std::string render_text(const Json& report) {
  const auto kind = kind_of(report);
  if (kind == "quantize") return quantize_text(report);
  if (kind == "analyze") return perf::format_table(opcount_from_json(report));
  if (kind == "calibrate") return calibrate_text(report);
  if (kind == "infer") return infer_text(report);
  if (kind == "finetune") return finetune_text(report);
  if (kind == "toy") return toy_text(report);
  fail(ErrorCode::invalid_argument, "unknown report kind '" + kind + "'");
}

std::string render_csv(const Json& report) {
  const auto kind = kind_of(report);
  if (kind == "quantize") return quantize_csv(report);
  if (kind == "analyze") return perf::format_csv(opcount_from_json(report));
  if (kind == "calibrate") return calibrate_csv(report);
  if (kind == "infer") return infer_csv(report);
  if (kind == "finetune" || kind == "toy") {
    return finetune_csv(kind == "toy" ? Json{{"curve", report.at("curve")}} : report);
  }
  fail(ErrorCode::invalid_argument, "unknown report kind '" + kind + "'");
}

// ---------------------------------------------------------------------------

Sweep consolidate(std::span<const std::filesystem::path> artifacts) {
  std::map<std::pair<int, std::size_t>, SweepRow> rows;
  for (const auto& path : artifacts) {
    const std::string where = "artifact '" + path.string() + "'";
    Json j;
    try {
      auto bytes = io::read_file(path);
      j = Json::parse(bytes.begin(), bytes.end());
    } catch (const Error& e) {
      fail(e.code(), where + ": " + e.what());
    } catch (const std::exception& e) {
      fail(ErrorCode::malformed_header, where + ": not valid JSON (" + e.what() + ")");
    }
    try {
      const auto kind = kind_of(j);
      if (kind == "quantize") {
        const auto& c = j.at("config");
        std::pair key{c.at("weight_bits").get<int>(), c.at("cluster_size").get<std::size_t>()};
        auto& row = rows[key];
        row.weight_bits = key.first;
        row.cluster_size = key.second;
        const auto& t = j.at("totals");
        row.error_exact = t.at("error_exact").get<double>();
        row.error_quantized = t.at("error_quantized").get<double>();
        row.weight_energy = t.at("weight_energy").get<double>();
        row.sources.push_back(path.filename().string());
      } else if (kind == "infer") {
        std::pair key{j.at("weight_bits").get<int>(), j.at("cluster_size").get<std::size_t>()};
        auto& row = rows[key];
        row.weight_bits = key.first;
        row.cluster_size = key.second;
        if (j.at("labelled").get<bool>()) {
          row.accuracy[j.at("mode").get<std::string>()] = j.at("accuracy").get<double>();
        }
        row.sources.push_back(path.filename().string());
      } else {
        fail(ErrorCode::invalid_argument, "kind '" + kind + "' is not a sweep artifact");
      }
    } catch (const Error& e) {
      fail(e.code(), where + ": " + e.what());
    } catch (const std::exception& e) {
      fail(ErrorCode::malformed_header, where + ": " + e.what());
    }
  }
  Sweep s;
  for (auto& [key, row] : rows) s.rows.push_back(std::move(row));
  return s;
}

namespace {

const char* kModes[] = {"float", "quant", "int"};

std::string opt(const std::optional<double>& v, const char* pattern) {
  return v ? fmt(pattern, *v) : "";
}

std::optional<double> relative(const SweepRow& r) {
  if (!r.error_quantized || !r.weight_energy || *r.weight_energy <= 0) return std::nullopt;
  return *r.error_quantized / *r.weight_energy;
}

std::optional<double> acc(const SweepRow& r, const char* mode) {
  auto it = r.accuracy.find(mode);
  if (it == r.accuracy.end()) return std::nullopt;
  return it->second;
}

}  // namespace

std::string sweep_markdown(const Sweep& sweep) {
  std::ostringstream os;
  os << "| bits | N | error_exact | error_quantized | rel_error | acc_float | acc_quant | acc_int |\n"
     << "|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& r : sweep.rows) {
    os << "| " << r.weight_bits << " | " << (r.cluster_size ? std::to_string(r.cluster_size) : "-")
       << " | " << opt(r.error_exact, "%.6g") << " | " << opt(r.error_quantized, "%.6g") << " | "
       << opt(relative(r), "%.4f");
    for (const char* m : kModes) os << " | " << opt(acc(r, m), "%.4f");
    os << " |\n";
  }
  return os.str();
}

std::string sweep_csv(const Sweep& sweep) {
  std::ostringstream os;
  os << "weight_bits,cluster_size,error_exact,error_quantized,weight_energy,acc_float,acc_quant,acc_int\n";
  for (const auto& r : sweep.rows) {
    os << r.weight_bits << ',' << r.cluster_size << ',' << opt(r.error_exact, "%.9g") << ','
       << opt(r.error_quantized, "%.9g") << ',' << opt(r.weight_energy, "%.9g");
    for (const char* m : kModes) os << ',' << opt(acc(r, m), "%.6f");
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    fail(ErrorCode::io, "sha256 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  return sha256_hex(io::read_file(path));
}

}  // namespace qntz::report
