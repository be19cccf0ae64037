// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace lcsb {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float32 buffer. Scalars use an empty shape.
struct Tensor {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  std::size_t numel() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  float& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<float> span() noexcept { return data; }
  std::span<const float> span() const noexcept { return data; }

  bool all_finite() const noexcept;
};

/// True when both tensors have the same shape and bit-identical payloads.
bool bit_equal(const Tensor& a, const Tensor& b) noexcept;

}  // namespace lcsb
