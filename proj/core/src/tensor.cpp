// SPDX-License-Identifier: Apache-2.0
#include "lcsb/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>

#include "lcsb/errors.hpp"

namespace lcsb {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

Tensor::Tensor(Shape s, std::vector<float> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape s, bool rg) { return filled(std::move(s), 0.0f, rg); }

Tensor Tensor::filled(Shape s, float value, bool rg) {
  const std::size_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<float>(n, value), rg);
}

Tensor Tensor::scalar(float value, bool rg) { return Tensor({}, {value}, rg); }

std::size_t Tensor::rows() const {
  if (shape.size() != 2) throw RankError("rows() needs a matrix, got " + shape_to_string(shape));
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.size() != 2) throw RankError("cols() needs a matrix, got " + shape_to_string(shape));
  return shape[1];
}

bool Tensor::all_finite() const noexcept {
  for (float x : data) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) noexcept {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace lcsb
