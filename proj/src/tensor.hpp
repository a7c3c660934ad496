// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace qntz {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

/// Dense row-major array. Activations use NCHW.
template <typename T>
struct BasicTensor {
  Shape shape;
  std::vector<T> data;

  BasicTensor() = default;
  explicit BasicTensor(Shape s, T fill = T{})
      : shape(std::move(s)), data(shape_product(shape), fill) {}
  BasicTensor(Shape s, std::vector<T> values)
      : shape(std::move(s)), data(std::move(values)) {}

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  bool operator==(const BasicTensor&) const = default;
};

using Tensor = BasicTensor<float>;

/// i8 mantissas sharing one power-of-two exponent: value = m * 2^exponent.
struct QTensor {
  Shape shape;
  std::vector<std::int8_t> data;
  int exponent = 0;

  std::size_t size() const { return data.size(); }
  bool operator==(const QTensor&) const = default;
};

}  // namespace qntz
