// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "engine.hpp"
#include "perf.hpp"
#include "quantize.hpp"
#include "trainer.hpp"

// Machine-readable reports. Every pipeline step produces a JSON object with a
// "kind" member; the renderers turn any of them into an aligned text table or
// CSV, and the sweep consolidation reads saved quantize/infer artifacts back.
namespace qntz::report {

using Json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

Json to_json(const ternary::QuantizeReport& report);
Json to_json(const perf::OpCountReport& report);
perf::OpCountReport opcount_from_json(const Json& json);

Json calibration_json(std::span<const engine::LayerCalibration> formats,
                      std::span<const engine::BatchNormUpdate> batchnorm);

/// Summary of one inference run over a labelled or unlabelled input set.
struct InferSummary {
  std::string mode;
  std::size_t samples = 0;
  std::size_t classes = 0;
  bool labelled = false;
  std::size_t correct = 0;
  int weight_bits = 32;        // of the model's clustered layers; 8 or 32 when none
  std::size_t cluster_size = 0;
  engine::OpCounters counters;
  std::vector<std::vector<std::size_t>> top_k;  // per sample, best first
};
Json to_json(const InferSummary& summary);

/// Indices of the k largest scores, best first; ties keep the lower index.
std::vector<std::size_t> top_classes(std::span<const float> scores, std::size_t k);

/// Weight format that identifies a model in a sweep: the bits and cluster
/// size of its clustered layers, else 8 when any layer is 8-bit, else 32.
std::pair<int, std::size_t> model_format(const io::ModelGraph& graph);

Json curve_json(std::span<const train::EpochPoint> curve);

/// Dispatch on "kind". Unknown kinds throw invalid_argument.
std::string render_text(const Json& report);
std::string render_csv(const Json& report);

// ---------------------------------------------------------------------------
// Sweep consolidation
// ---------------------------------------------------------------------------

struct SweepRow {
  int weight_bits = 32;
  std::size_t cluster_size = 0;
  std::optional<double> error_exact, error_quantized, weight_energy;
  std::map<std::string, double> accuracy;  // by inference mode
  std::vector<std::string> sources;
};

struct Sweep {
  std::vector<SweepRow> rows;  // ordered by (weight_bits, cluster_size)
};

/// Reads quantize and infer JSON artifacts. Errors name the offending file.
Sweep consolidate(std::span<const std::filesystem::path> artifacts);
std::string sweep_markdown(const Sweep& sweep);
std::string sweep_csv(const Sweep& sweep);

// ---------------------------------------------------------------------------
// Digests
// ---------------------------------------------------------------------------

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace qntz::report
