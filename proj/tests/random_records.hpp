// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <random>
#include <string>

#include "model_io.hpp"

namespace qntz::testing {

// A record of random dtype, rank 0..3 and contents.
inline io::TensorRecord random_record(std::mt19937_64& rng, const std::string& name) {
  std::uniform_int_distribution<int> dtype(0, 3), rank(0, 3), dim(1, 5);
  io::TensorRecord r;
  r.name = name;
  r.dtype = static_cast<io::DType>(dtype(rng));
  int k = rank(rng);
  for (int i = 0; i < k; ++i) r.shape.push_back(static_cast<std::size_t>(dim(rng)));
  const std::size_t n = shape_product(r.shape);
  if (r.dtype == io::DType::ternary2) {
    std::uniform_int_distribution<int> code(-1, 1);
    std::vector<std::int8_t> codes(n);
    for (auto& c : codes) c = static_cast<std::int8_t>(code(rng));
    r.data = io::pack_ternary(codes);
  } else if (r.dtype == io::DType::f32) {
    std::normal_distribution<float> v(0.0f, 3.0f);
    std::vector<float> vals(n);
    for (auto& x : vals) x = v(rng);
    r.data.resize(4 * n);
    std::memcpy(r.data.data(), vals.data(), r.data.size());
  } else {
    std::uniform_int_distribution<int> byte(0, 255);
    r.data.resize(n);
    for (auto& b : r.data) b = static_cast<std::uint8_t>(byte(rng));
  }
  return r;
}

}  // namespace qntz::testing
