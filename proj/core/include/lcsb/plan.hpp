// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace lcsb {

/// How a transformer block takes part in one training step.
///   attached  - normal residual block, full gradient flow
///   detached  - same forward values; gradient passes through the
///               residual identity only, the block's parameters get zero
///   dropped   - block skipped entirely (y = x), as in Stochastic Depth
enum class BlockMode { attached, detached, dropped };

std::string_view to_string(BlockMode mode);

/// Per-step layer assignment produced by select_layers.
struct SelectionPlan {
  std::vector<BlockMode> modes;
  long step = 0;
  double r_used = 1.0;
  std::size_t k_used = 0;

  static SelectionPlan all(std::size_t n_layers, BlockMode mode = BlockMode::attached);

  std::size_t size() const noexcept { return modes.size(); }
  bool is_attached(std::size_t layer) const { return modes.at(layer) == BlockMode::attached; }
  std::vector<std::size_t> attached_layers() const;
  std::size_t attached_count() const;
};

}  // namespace lcsb
