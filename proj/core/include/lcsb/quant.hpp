// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lcsb/tensor.hpp"

namespace lcsb {

/// Frozen 4-bit linear weights: signed codes in [-8, 7], one float scale
/// per group of `group_size` consecutive weights within an output row.
class QuantizedLinear {
 public:
  static constexpr int kMinCode = -8;
  static constexpr int kMaxCode = 7;

  QuantizedLinear(std::size_t rows, std::size_t cols, std::size_t group_size, std::vector<std::int8_t> codes,
                  std::vector<float> scales, std::optional<std::vector<float>> bias = std::nullopt);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t group_size() const noexcept { return group_size_; }
  std::size_t groups_per_row() const noexcept { return cols_ / group_size_; }
  std::span<const std::int8_t> codes() const noexcept { return codes_; }
  std::span<const float> scales() const noexcept { return scales_; }
  const std::optional<std::vector<float>>& bias() const noexcept { return bias_; }

  Tensor dequantize() const;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::size_t group_size_;
  std::vector<std::int8_t> codes_;
  std::vector<float> scales_;
  std::optional<std::vector<float>> bias_;
};

/// Symmetric per-group quantization: scale = max|w| / 7, code =
/// clamp(round(w / scale), -8, 7). All-zero groups get scale 1.
QuantizedLinear quantize_weights(const Tensor& weight, std::size_t group_size);

inline Tensor dequantize(const QuantizedLinear& q) { return q.dequantize(); }

}  // namespace lcsb
