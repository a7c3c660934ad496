// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tensor.hpp"

namespace qntz::io {

// ---------------------------------------------------------------------------
// Tensor container
//
// Layout (all integers little-endian):
//   "QNTZ1\0" | u32 count | count x record
//   record: u16 name_len | name | u8 dtype | u8 rank | rank x u32 dim
//           | u64 byte_len | payload
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, i8 = 1, u8 = 2, ternary2 = 3 };

const char* dtype_name(DType dtype);

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> data;

  std::size_t element_count() const { return shape_product(shape); }
  bool operator==(const TensorRecord&) const = default;
};

/// Payload size implied by dtype and shape. ternary2 packs four codes per byte.
std::size_t expected_byte_length(DType dtype, std::size_t element_count);

/// Throws invariant_violation naming the record when the payload length or
/// shape is inconsistent.
void check_record(const TensorRecord& record);

/// Ternary codes {-1, 0, +1} as 2-bit fields: 00 = 0, 01 = +1, 10 = -1, 11 is
/// invalid. The lowest-order pair of each byte holds the lowest index; unused
/// trailing pairs are zero.
std::vector<std::uint8_t> pack_ternary(std::span<const std::int8_t> codes);
std::vector<std::int8_t> unpack_ternary(std::span<const std::uint8_t> bytes,
                                        std::size_t count);

std::vector<std::uint8_t> encode_container(std::span<const TensorRecord> records);
std::vector<TensorRecord> decode_container(std::span<const std::uint8_t> bytes);

void save_container(std::span<const TensorRecord> records,
                    const std::filesystem::path& path);
std::vector<TensorRecord> load_container(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes);

TensorRecord make_f32(std::string name, Shape shape, std::span<const float> values);
TensorRecord make_i8(std::string name, Shape shape, std::span<const std::int8_t> values);
TensorRecord make_u8(std::string name, Shape shape, std::span<const std::uint8_t> values);
TensorRecord make_ternary(std::string name, Shape shape,
                          std::span<const std::int8_t> codes);

Tensor to_tensor(const TensorRecord& record);
std::vector<std::int8_t> to_i8(const TensorRecord& record);
std::vector<std::uint8_t> to_u8(const TensorRecord& record);
std::vector<std::int8_t> to_ternary_codes(const TensorRecord& record);

// ---------------------------------------------------------------------------
// Graph manifest
// ---------------------------------------------------------------------------

enum class LayerKind { conv, fc, batchnorm, relu, maxpool, avgpool };

const char* layer_kind_name(LayerKind kind);
std::optional<LayerKind> parse_layer_kind(std::string_view text);

inline bool is_compute(LayerKind kind) {
  return kind == LayerKind::conv || kind == LayerKind::fc;
}

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::string name;
  std::string input;  // producer name; empty means the preceding layer

  // conv / fc
  std::optional<std::string> weight;
  std::optional<std::string> bias;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t out_channels = 0;
  bool first_conv = false;

  // Quantized weights. weight_bits == 32 means f32 weights in `weight`.
  int weight_bits = 32;
  std::optional<std::string> scales;
  std::optional<int> weight_exponent;
  std::size_t cluster_size = 0;

  // batchnorm
  std::string mean, var, gamma, beta;
  double epsilon = 1e-5;

  // avgpool over the whole plane
  bool global_pool = false;

  // Activation format of this layer's output.
  std::optional<int> act_exponent;

  bool operator==(const LayerSpec&) const = default;
};

struct ModelGraph {
  std::string input_name = "data";
  Shape input_shape;  // per sample, CHW
  std::optional<int> input_exponent;
  std::vector<LayerSpec> layers;

  const LayerSpec* find(std::string_view name) const;
  bool operator==(const ModelGraph&) const = default;
};

/// Parses and structurally validates a manifest. Does not resolve tensors.
ModelGraph parse_manifest(std::string_view text);
std::string format_manifest(const ModelGraph& graph);

ModelGraph load_graph(const std::filesystem::path& path);
void save_graph(const ModelGraph& graph, const std::filesystem::path& path);

/// Per-sample output shape of every layer (index-aligned with graph.layers).
std::vector<Shape> infer_shapes(const ModelGraph& graph);

/// Per-sample input shape of layer `index`.
Shape layer_input_shape(const ModelGraph& graph, const std::vector<Shape>& shapes,
                        std::size_t index);

/// Layer index producing the input of `index`, or nullopt for the graph input.
std::optional<std::size_t> producer_index(const ModelGraph& graph, std::size_t index);

/// Checks every tensor reference against the container: presence, dtype and
/// shape. Throws dangling_reference or shape_mismatch naming the culprit.
void validate_graph(const ModelGraph& graph, std::span<const TensorRecord> records);

// ---------------------------------------------------------------------------
// Model = manifest + container
// ---------------------------------------------------------------------------

struct Model {
  ModelGraph graph;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(std::string_view name) const;
  const TensorRecord& get(std::string_view name) const;
  /// Replaces an existing record of the same name or appends.
  void put(TensorRecord record);
  void erase(std::string_view name);

  bool operator==(const Model&) const = default;
};

Model load_model(const std::filesystem::path& graph_path,
                 const std::filesystem::path& container_path);
void save_model(const Model& model, const std::filesystem::path& graph_path,
                const std::filesystem::path& container_path);

}  // namespace qntz::io
