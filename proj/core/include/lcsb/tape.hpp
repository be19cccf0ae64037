// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lcsb/tensor.hpp"

namespace lcsb {

using NodeId = std::uint32_t;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid until the
/// tape is cleared or destroyed.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
  NodeId id() const noexcept { return id_; }
  Tape& tape() const noexcept { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

enum class PrimitiveKind {
  matmul,
  add,
  mul,
  scale,
  embedding_lookup,
  rms_norm,
  softmax,
  silu,
  transpose,
  reshape,
  slice,
  concat,
  cross_entropy_logits,
  sum,
  mean,
};

std::string_view to_string(PrimitiveKind kind);
/// Throws UnsupportedPrimitiveError for names outside the primitive set.
PrimitiveKind parse_primitive_kind(std::string_view name);

/// Attributes consumed by primitive_forward. Each kind reads only the
/// fields it needs.
struct PrimitiveAttrs {
  bool transpose_b = false;              // matmul: a * b^T
  float factor = 1.0f;                   // scale
  float eps = 1e-6f;                     // rms_norm
  bool causal = false;                   // softmax: mask j > i
  std::size_t axis = 0;                  // slice, concat
  std::size_t start = 0;                 // slice
  std::size_t length = 0;                // slice
  Shape shape;                           // reshape
  std::vector<std::int32_t> indices;     // embedding_lookup ids, cross-entropy targets
};

/// Map from leaf parameter to its accumulated gradient.
class GradientMap {
 public:
  void set(const Tensor* param, Tensor grad) { grads_[param] = std::move(grad); }
  bool contains(const Tensor* param) const { return grads_.count(param) != 0; }
  /// Gradient for param; throws ContractError when absent.
  const Tensor& at(const Tensor* param) const;
  std::size_t size() const noexcept { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::unordered_map<const Tensor*, Tensor> grads_;
};

/// Append-only record of one forward pass. Node order is topological by
/// construction: a node is appended only after all of its inputs exist.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, NodeId self, std::span<const float> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an externally owned tensor (a parameter or frozen weight)
  /// without copying it. The tensor must outlive the tape. Repeated calls
  /// with the same tensor return the same node so gradients accumulate.
  Var leaf(const Tensor& tensor);

  /// Records a tape-owned constant.
  Var constant(Tensor tensor);

  /// Appends a node computed by a primitive. The backward rule is only
  /// kept when recording is on and an input requires grad; otherwise the
  /// node records no inputs.
  Var record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward);

  const Tensor& value(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Every requires_grad leaf registered
  /// on the tape gets an entry; unreachable leaves get exact zeros.
  GradientMap backward(Var loss);

  /// Gradient accumulated at a node by the last backward(); zeros when no
  /// gradient reached it.
  Tensor grad(Var v) const;

  /// Mutable gradient buffer for a node, zero-filled on first access.
  /// Only valid inside backward().
  std::span<float> grad_buffer(NodeId id);

  void clear();

  bool recording() const noexcept { return recording_; }

  /// While alive, new nodes are recorded as constants with no inputs.
  class Pause {
   public:
    explicit Pause(Tape& tape) : tape_(tape), previous_(tape.recording_) { tape.recording_ = false; }
    ~Pause() { tape_.recording_ = previous_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape& tape_;
    bool previous_;
  };

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<float>> grads_;
  std::unordered_map<const Tensor*, NodeId> leaves_;
  bool recording_ = true;
};

/// Generic dispatch over the primitive set.
Var primitive_forward(PrimitiveKind kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs);

namespace ops {

Var matmul(Var a, Var b, bool transpose_b = false);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float factor);
Var embedding_lookup(Var table, std::span<const std::int32_t> ids);
/// Row-wise x / sqrt(mean(x^2) + eps) * gain. gain may be an invalid Var
/// for unit gain.
Var rms_norm(Var x, Var gain, float eps);
Var softmax(Var x, bool causal = false);
Var silu(Var x);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
Var concat(std::span<const Var> parts, std::size_t axis);
/// Mean over rows of -log softmax(logits)[target].
Var cross_entropy_logits(Var logits, std::span<const std::int32_t> targets);
Var sum(Var x);
Var mean(Var x);

/// Copies the value and severs gradient flow to its producers.
Var detach(Var x);

/// h + detach(o - h), with the forward value taken verbatim from o so the
/// result is bit-identical to o. Gradient flows to h through the identity
/// only.
Var detached_residual(Var h, Var o);

}  // namespace ops

/// Raw kernel: c = a * b (row-major, sequential k-order accumulation).
void gemm(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate = false);

}  // namespace lcsb
