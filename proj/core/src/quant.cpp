// SPDX-License-Identifier: Apache-2.0
#include "lcsb/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lcsb/errors.hpp"

namespace lcsb {

QuantizedLinear::QuantizedLinear(std::size_t rows, std::size_t cols, std::size_t group_size,
                                 std::vector<std::int8_t> codes, std::vector<float> scales,
                                 std::optional<std::vector<float>> bias)
    : rows_(rows), cols_(cols), group_size_(group_size), codes_(std::move(codes)), scales_(std::move(scales)),
      bias_(std::move(bias)) {
  if (group_size_ == 0 || cols_ % group_size_ != 0) {
    throw DimensionError("quantization group size " + std::to_string(group_size_) + " does not divide row length " +
                         std::to_string(cols_));
  }
  if (codes_.size() != rows_ * cols_ || scales_.size() != rows_ * groups_per_row()) {
    throw DimensionError("quantized payload does not match a " + std::to_string(rows_) + "x" +
                         std::to_string(cols_) + " matrix");
  }
  for (std::int8_t c : codes_) {
    if (c < kMinCode || c > kMaxCode) throw InputError("4-bit code " + std::to_string(c) + " out of range");
  }
  if (bias_ && bias_->size() != rows_) throw DimensionError("bias length does not match output rows");
}

Tensor QuantizedLinear::dequantize() const {
  Tensor out = Tensor::zeros({rows_, cols_});
  const std::size_t groups = groups_per_row();
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) {
      out.data[r * cols_ + c] = static_cast<float>(codes_[r * cols_ + c]) * scales_[r * groups + c / group_size_];
    }
  }
  return out;
}

QuantizedLinear quantize_weights(const Tensor& weight, std::size_t group_size) {
  std::size_t rows = 1, cols = weight.numel();
  if (weight.rank() == 2) {
    rows = weight.shape[0];
    cols = weight.shape[1];
  } else if (weight.rank() != 1) {
    throw RankError("quantize_weights needs a vector or matrix, got " + shape_to_string(weight.shape));
  }
  if (group_size == 0 || cols % group_size != 0) {
    throw DimensionError("quantization group size " + std::to_string(group_size) + " does not divide row length " +
                         std::to_string(cols));
  }
  const std::size_t groups = cols / group_size;
  std::vector<std::int8_t> codes(rows * cols);
  std::vector<float> scales(rows * groups);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t begin = r * cols + g * group_size;
      float max_abs = 0.0f;
      for (std::size_t i = 0; i < group_size; ++i) max_abs = std::max(max_abs, std::abs(weight.data[begin + i]));
      const float scale = max_abs > 0.0f ? max_abs / static_cast<float>(QuantizedLinear::kMaxCode) : 1.0f;
      scales[r * groups + g] = scale;
      for (std::size_t i = 0; i < group_size; ++i) {
        const float q = std::nearbyint(weight.data[begin + i] / scale);
        codes[begin + i] = static_cast<std::int8_t>(
            std::clamp(q, static_cast<float>(QuantizedLinear::kMinCode), static_cast<float>(QuantizedLinear::kMaxCode)));
      }
    }
  }
  return QuantizedLinear(rows, cols, group_size, std::move(codes), std::move(scales));
}

}  // namespace lcsb
