// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "error.hpp"
#include "model_io.hpp"

namespace qntz::io {

const TensorRecord* Model::find(std::string_view name) const {
  auto it = std::find_if(tensors.begin(), tensors.end(),
                         [&](const TensorRecord& r) { return r.name == name; });
  return it == tensors.end() ? nullptr : &*it;
}

const TensorRecord& Model::get(std::string_view name) const {
  if (const auto* r = find(name)) return *r;
  fail(ErrorCode::dangling_reference, "missing tensor '" + std::string(name) + "'");
}

void Model::put(TensorRecord record) {
  auto it = std::find_if(tensors.begin(), tensors.end(),
                         [&](const TensorRecord& r) { return r.name == record.name; });
  if (it == tensors.end()) {
    tensors.push_back(std::move(record));
  } else {
    *it = std::move(record);
  }
}

void Model::erase(std::string_view name) {
  std::erase_if(tensors, [&](const TensorRecord& r) { return r.name == name; });
}

Model load_model(const std::filesystem::path& graph_path,
                 const std::filesystem::path& container_path) {
  Model model{load_graph(graph_path), load_container(container_path)};
  validate_graph(model.graph, model.tensors);
  return model;
}

void save_model(const Model& model, const std::filesystem::path& graph_path,
                const std::filesystem::path& container_path) {
  validate_graph(model.graph, model.tensors);
  auto bytes = encode_container(model.tensors);
  save_graph(model.graph, graph_path);
  write_file(container_path, bytes);
}

}  // namespace qntz::io
