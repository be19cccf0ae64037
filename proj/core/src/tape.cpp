// SPDX-License-Identifier: Apache-2.0
#include "lcsb/tape.hpp"

#include <cstring>

#include <algorithm>
#include <cmath>
#include <string>

#include "lcsb/errors.hpp"

namespace lcsb {

namespace {

[[noreturn]] void dimension_error(std::string_view op, const std::string& detail) {
  throw DimensionError(std::string(op) + ": " + detail);
}

void require_matrix(std::string_view op, const Tensor& t) {
  if (t.rank() != 2) dimension_error(op, "expected a matrix, got " + shape_to_string(t.shape));
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    dimension_error(op, "shapes " + shape_to_string(a.shape) + " and " + shape_to_string(b.shape) +
                            " differ");
  }
}

Tape& common_tape(std::initializer_list<Var> vars) {
  Tape* tape = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) continue;
    if (tape && &v.tape() != tape) throw ContractError("inputs recorded on different tapes");
    tape = &v.tape();
  }
  if (!tape) throw ContractError("primitive called without a recorded input");
  return *tape;
}

// Rows and columns of a tensor viewed as a matrix; vectors are one row.
std::pair<std::size_t, std::size_t> as_rows(std::string_view op, const Tensor& t) {
  if (t.rank() == 1) return {1, t.shape[0]};
  if (t.rank() == 2) return {t.shape[0], t.shape[1]};
  dimension_error(op, "expected a vector or matrix, got " + shape_to_string(t.shape));
}

std::vector<float> transposed(std::span<const float> src, std::size_t rows, std::size_t cols) {
  std::vector<float> dst(src.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
  return dst;
}

void axpy(std::span<float> dst, std::span<const float> src, float alpha = 1.0f) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

}  // namespace

namespace {

// Every c[i][j] is accumulated over p = 0..k-1 in order, whichever path
// computes it, so the blocked and the edge loops agree bit for bit.
constexpr std::size_t kRowBlock = 6;
constexpr std::size_t kColBlock = 16;

using Lane = float __attribute__((vector_size(32)));
constexpr std::size_t kLaneWidth = sizeof(Lane) / sizeof(float);
constexpr std::size_t kLanes = kColBlock / kLaneWidth;

Lane load_lane(const float* p) {
  Lane v;
  std::memcpy(&v, p, sizeof(Lane));
  return v;
}

void gemm_block(const float* pa, const float* pb, float* pc, std::size_t i0, std::size_t j0, std::size_t k,
                std::size_t n) {
  Lane acc[kRowBlock][kLanes];
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    for (std::size_t l = 0; l < kLanes; ++l) acc[r][l] = load_lane(pc + (i0 + r) * n + j0 + l * kLaneWidth);
  }
  for (std::size_t p = 0; p < k; ++p) {
    const float* brow = pb + p * n + j0;
    Lane bv[kLanes];
    for (std::size_t l = 0; l < kLanes; ++l) bv[l] = load_lane(brow + l * kLaneWidth);
    for (std::size_t r = 0; r < kRowBlock; ++r) {
      const float av = pa[(i0 + r) * k + p];
      for (std::size_t l = 0; l < kLanes; ++l) acc[r][l] += av * bv[l];
    }
  }
  for (std::size_t r = 0; r < kRowBlock; ++r) {
    for (std::size_t l = 0; l < kLanes; ++l) {
      std::memcpy(pc + (i0 + r) * n + j0 + l * kLaneWidth, &acc[r][l], sizeof(Lane));
    }
  }
}

void gemm_edge(const float* pa, const float* pb, float* pc, std::size_t i_begin, std::size_t i_end,
               std::size_t j_begin, std::size_t j_end, std::size_t k, std::size_t n) {
  for (std::size_t i = i_begin; i < i_end; ++i) {
    float* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = pa[i * k + p];
      const float* brow = pb + p * n;
      for (std::size_t j = j_begin; j < j_end; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

void gemm(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c.begin(), c.end(), 0.0f);
  const float* pa = a.data();
  const float* pb = b.data();
  float* pc = c.data();
  const std::size_t m_full = m - m % kRowBlock;
  const std::size_t n_full = n - n % kColBlock;
  for (std::size_t i0 = 0; i0 < m_full; i0 += kRowBlock) {
    for (std::size_t j0 = 0; j0 < n_full; j0 += kColBlock) gemm_block(pa, pb, pc, i0, j0, k, n);
  }
  if (n_full < n) gemm_edge(pa, pb, pc, 0, m_full, n_full, n, k, n);
  if (m_full < m) gemm_edge(pa, pb, pc, m_full, m, 0, n, k, n);
}

// ---------------------------------------------------------------------------
// Var / GradientMap

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

const Tensor& GradientMap::at(const Tensor* param) const {
  auto it = grads_.find(param);
  if (it == grads_.end()) throw ContractError("no gradient entry for parameter");
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(const Tensor& tensor) {
  const bool rg = recording_ && tensor.requires_grad;
  if (rg) {
    auto it = leaves_.find(&tensor);
    if (it != leaves_.end()) return Var(this, it->second);
  }
  Node node;
  node.external = &tensor;
  node.requires_grad = rg;
  nodes_.push_back(std::move(node));
  const auto id = static_cast<NodeId>(nodes_.size() - 1);
  if (rg) leaves_.emplace(&tensor, id);
  return Var(this, id);
}

Var Tape::constant(Tensor tensor) {
  tensor.requires_grad = false;
  Node node;
  node.owned = std::move(tensor);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
  bool rg = false;
  if (recording_ && backward) {
    for (NodeId id : inputs) rg = rg || nodes_[id].requires_grad;
  }
  Node node;
  value.requires_grad = rg;
  node.owned = std::move(value);
  node.requires_grad = rg;
  if (rg) {
    node.inputs = std::move(inputs);
    node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

const Tensor& Tape::value(NodeId id) const {
  const Node& n = nodes_.at(id);
  return n.external ? *n.external : n.owned;
}

std::span<float> Tape::grad_buffer(NodeId id) {
  auto& buf = grads_[id];
  if (buf.empty()) buf.assign(value(id).numel(), 0.0f);
  return buf;
}

GradientMap Tape::backward(Var loss) {
  if (&loss.tape() != this) throw ContractError("loss is not recorded on this tape");
  const Tensor& lv = loss.value();
  if (lv.numel() != 1) throw RankError("backward needs a scalar loss, got shape " + shape_to_string(lv.shape));
  if (!std::isfinite(lv.data[0])) {
    throw NonFiniteError("non-finite loss " + std::to_string(lv.data[0]) + " at backward");
  }
  grads_.assign(nodes_.size(), {});
  grads_[loss.id()].assign(1, 1.0f);
  for (std::int64_t id = loss.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty() || !node.backward) continue;
    node.backward(*this, static_cast<NodeId>(id), g);
  }
  GradientMap out;
  for (const auto& [param, id] : leaves_) {
    const auto& g = grads_[id];
    Tensor grad = Tensor::zeros(param->shape);
    if (!g.empty()) grad.data = g;
    out.set(param, std::move(grad));
  }
  return out;
}

Tensor Tape::grad(Var v) const {
  Tensor out = Tensor::zeros(v.value().shape);
  if (v.id() < grads_.size() && !grads_[v.id()].empty()) out.data = grads_[v.id()];
  return out;
}

void Tape::clear() {
  nodes_.clear();
  grads_.clear();
  leaves_.clear();
}

// ---------------------------------------------------------------------------
// Primitive names

std::string_view to_string(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::matmul: return "matmul";
    case PrimitiveKind::add: return "add";
    case PrimitiveKind::mul: return "mul";
    case PrimitiveKind::scale: return "scale";
    case PrimitiveKind::embedding_lookup: return "embedding_lookup";
    case PrimitiveKind::rms_norm: return "rms_norm";
    case PrimitiveKind::softmax: return "softmax";
    case PrimitiveKind::silu: return "silu";
    case PrimitiveKind::transpose: return "transpose";
    case PrimitiveKind::reshape: return "reshape";
    case PrimitiveKind::slice: return "slice";
    case PrimitiveKind::concat: return "concat";
    case PrimitiveKind::cross_entropy_logits: return "cross_entropy_logits";
    case PrimitiveKind::sum: return "sum";
    case PrimitiveKind::mean: return "mean";
  }
  throw UnsupportedPrimitiveError("unknown primitive kind " + std::to_string(static_cast<int>(kind)));
}

PrimitiveKind parse_primitive_kind(std::string_view name) {
  static constexpr PrimitiveKind all[] = {
      PrimitiveKind::matmul,    PrimitiveKind::add,          PrimitiveKind::mul,
      PrimitiveKind::scale,     PrimitiveKind::embedding_lookup, PrimitiveKind::rms_norm,
      PrimitiveKind::softmax,   PrimitiveKind::silu,         PrimitiveKind::transpose,
      PrimitiveKind::reshape,   PrimitiveKind::slice,        PrimitiveKind::concat,
      PrimitiveKind::cross_entropy_logits, PrimitiveKind::sum, PrimitiveKind::mean};
  for (PrimitiveKind k : all) {
    if (to_string(k) == name) return k;
  }
  throw UnsupportedPrimitiveError("unsupported primitive '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Primitives

namespace ops {

Var matmul(Var a, Var b, bool transpose_b) {
  Tape& tape = common_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("matmul", av);
  require_matrix("matmul", bv);
  const std::size_t m = av.shape[0], k = av.shape[1];
  const std::size_t kb = transpose_b ? bv.shape[1] : bv.shape[0];
  const std::size_t n = transpose_b ? bv.shape[0] : bv.shape[1];
  if (k != kb) {
    dimension_error("matmul", "inner dimensions of " + shape_to_string(av.shape) + " and " +
                                  shape_to_string(bv.shape) + (transpose_b ? "^T" : "") + " differ");
  }
  Tensor out = Tensor::zeros({m, n});
  if (transpose_b) {
    const auto bt = transposed(bv.data, n, k);
    gemm(av.data, bt, out.data, m, k, n);
  } else {
    gemm(av.data, bv.data, out.data, m, k, n);
  }
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib},
                     [ia, ib, m, k, n, transpose_b](Tape& t, NodeId, std::span<const float> g) {
                       const Tensor& av = t.value(ia);
                       const Tensor& bv = t.value(ib);
                       if (t.requires_grad(ia)) {
                         // dA = G * B_eff^T, shape (m, k).
                         auto da = t.grad_buffer(ia);
                         if (transpose_b) {
                           gemm(g, bv.data, da, m, n, k, true);
                         } else {
                           const auto bt = transposed(bv.data, k, n);
                           gemm(g, bt, da, m, n, k, true);
                         }
                       }
                       if (t.requires_grad(ib)) {
                         auto db = t.grad_buffer(ib);
                         if (transpose_b) {
                           // dB = G^T * A, shape (n, k).
                           const auto gt = transposed(g, m, n);
                           gemm(gt, av.data, db, n, m, k, true);
                         } else {
                           // dB = A^T * G, shape (k, n).
                           const auto at = transposed(av.data, m, k);
                           gemm(at, g, db, k, m, n, true);
                         }
                       }
                     });
}

Var add(Var a, Var b) {
  Tape& tape = common_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("add", av, bv);
  Tensor out(av.shape, av.data);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId, std::span<const float> g) {
    if (t.requires_grad(ia)) axpy(t.grad_buffer(ia), g);
    if (t.requires_grad(ib)) axpy(t.grad_buffer(ib), g);
  });
}

Var mul(Var a, Var b) {
  Tape& tape = common_tape({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("mul", av, bv);
  Tensor out(av.shape, av.data);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  const NodeId ia = a.id(), ib = b.id();
  return tape.record(std::move(out), {ia, ib}, [ia, ib](Tape& t, NodeId, std::span<const float> g) {
    if (t.requires_grad(ia)) {
      auto da = t.grad_buffer(ia);
      const auto& bd = t.value(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bd[i];
    }
    if (t.requires_grad(ib)) {
      auto db = t.grad_buffer(ib);
      const auto& ad = t.value(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * ad[i];
    }
  });
}

Var scale(Var a, float factor) {
  Tape& tape = common_tape({a});
  Tensor out(a.value().shape, a.value().data);
  for (float& x : out.data) x *= factor;
  const NodeId ia = a.id();
  return tape.record(std::move(out), {ia}, [ia, factor](Tape& t, NodeId, std::span<const float> g) {
    axpy(t.grad_buffer(ia), g, factor);
  });
}

Var embedding_lookup(Var table, std::span<const std::int32_t> ids) {
  Tape& tape = common_tape({table});
  const Tensor& tv = table.value();
  require_matrix("embedding_lookup", tv);
  const std::size_t vocab = tv.shape[0], dim = tv.shape[1];
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  Tensor out = Tensor::zeros({idx.size(), dim});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
      dimension_error("embedding_lookup",
                      "id " + std::to_string(idx[r]) + " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(idx[r] * dim), dim,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * dim));
  }
  const NodeId it = table.id();
  return tape.record(std::move(out), {it},
                     [it, idx = std::move(idx), dim](Tape& t, NodeId, std::span<const float> g) {
                       auto dt = t.grad_buffer(it);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         for (std::size_t c = 0; c < dim; ++c) dt[idx[r] * dim + c] += g[r * dim + c];
                       }
                     });
}

Var rms_norm(Var x, Var gain, float eps) {
  Tape& tape = common_tape({x, gain});
  const Tensor& xv = x.value();
  const auto [rows, cols] = as_rows("rms_norm", xv);
  const float* gv = nullptr;
  if (gain.valid()) {
    const Tensor& gt = gain.value();
    if (gt.rank() != 1 || gt.shape[0] != cols) {
      dimension_error("rms_norm", "gain " + shape_to_string(gt.shape) + " does not match rows of " +
                                      shape_to_string(xv.shape));
    }
    gv = gt.data.data();
  }
  Tensor out(xv.shape, xv.data);
  std::vector<float> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = xv.data[r * cols + c];
      ss += v * v;
    }
    inv[r] = static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(cols) + eps));
    for (std::size_t c = 0; c < cols; ++c) {
      float& y = out.data[r * cols + c];
      y = y * inv[r];
      if (gv) y *= gv[c];
    }
  }
  const NodeId ix = x.id();
  const bool has_gain = gain.valid();
  const NodeId ig = has_gain ? gain.id() : 0;
  std::vector<NodeId> inputs{ix};
  if (has_gain) inputs.push_back(ig);
  return tape.record(
      std::move(out), std::move(inputs),
      [ix, ig, has_gain, rows, cols, inv = std::move(inv)](Tape& t, NodeId, std::span<const float> g) {
        const auto& xd = t.value(ix).data;
        const float* gd = has_gain ? t.value(ig).data.data() : nullptr;
        const bool need_x = t.requires_grad(ix);
        const bool need_g = has_gain && t.requires_grad(ig);
        std::span<float> dx = need_x ? t.grad_buffer(ix) : std::span<float>{};
        std::span<float> dg = need_g ? t.grad_buffer(ig) : std::span<float>{};
        std::vector<float> dxhat(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            const float xhat = xd[r * cols + c] * inv[r];
            const float gy = g[r * cols + c];
            dxhat[c] = gd ? gy * gd[c] : gy;
            dot += static_cast<double>(dxhat[c]) * xhat;
            if (need_g) dg[c] += gy * xhat;
          }
          if (!need_x) continue;
          const float mean_dot = static_cast<float>(dot / static_cast<double>(cols));
          for (std::size_t c = 0; c < cols; ++c) {
            const float xhat = xd[r * cols + c] * inv[r];
            dx[r * cols + c] += inv[r] * (dxhat[c] - xhat * mean_dot);
          }
        }
      });
}

Var softmax(Var x, bool causal) {
  Tape& tape = common_tape({x});
  const Tensor& xv = x.value();
  const auto [rows, cols] = as_rows("softmax", xv);
  Tensor out = Tensor::zeros(xv.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t limit = causal ? std::min(cols, r + 1) : cols;
    const float* xr = xv.data.data() + r * cols;
    float* yr = out.data.data() + r * cols;
    float mx = xr[0];
    for (std::size_t c = 1; c < limit; ++c) mx = std::max(mx, xr[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < limit; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t c = 0; c < limit; ++c) yr[c] *= inv;
  }
  const NodeId ix = x.id();
  return tape.record(std::move(out), {ix}, [ix, rows, cols](Tape& t, NodeId self, std::span<const float> g) {
    const auto& y = t.value(self).data;
    auto dx = t.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c]) * y[r * cols + c];
      const float d = static_cast<float>(dot);
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - d);
    }
  });
}

Var silu(Var x) {
  Tape& tape = common_tape({x});
  Tensor out(x.value().shape, x.value().data);
  for (float& v : out.data) v = v / (1.0f + std::exp(-v));
  const NodeId ix = x.id();
  return tape.record(std::move(out), {ix}, [ix](Tape& t, NodeId, std::span<const float> g) {
    const auto& xd = t.value(ix).data;
    auto dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const float s = 1.0f / (1.0f + std::exp(-xd[i]));
      dx[i] += g[i] * s * (1.0f + xd[i] * (1.0f - s));
    }
  });
}

Var transpose(Var x) {
  Tape& tape = common_tape({x});
  const Tensor& xv = x.value();
  require_matrix("transpose", xv);
  const std::size_t rows = xv.shape[0], cols = xv.shape[1];
  Tensor out({cols, rows}, transposed(xv.data, rows, cols));
  const NodeId ix = x.id();
  return tape.record(std::move(out), {ix}, [ix, rows, cols](Tape& t, NodeId, std::span<const float> g) {
    axpy(t.grad_buffer(ix), transposed(g, cols, rows));
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = common_tape({x});
  const Tensor& xv = x.value();
  if (shape_numel(shape) != xv.numel()) {
    dimension_error("reshape", "cannot view " + shape_to_string(xv.shape) + " as " + shape_to_string(shape));
  }
  Tensor out(std::move(shape), xv.data);
  const NodeId ix = x.id();
  return tape.record(std::move(out), {ix},
                     [ix](Tape& t, NodeId, std::span<const float> g) { axpy(t.grad_buffer(ix), g); });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  Tape& tape = common_tape({x});
  const Tensor& xv = x.value();
  require_matrix("slice", xv);
  if (axis > 1 || start + length > xv.shape[axis] || length == 0) {
    dimension_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                 ") on axis " + std::to_string(axis) + " of " + shape_to_string(xv.shape));
  }
  const std::size_t rows = xv.shape[0], cols = xv.shape[1];
  const std::size_t out_rows = axis == 0 ? length : rows;
  const std::size_t out_cols = axis == 1 ? length : cols;
  const std::size_t r0 = axis == 0 ? start : 0;
  const std::size_t c0 = axis == 1 ? start : 0;
  Tensor out = Tensor::zeros({out_rows, out_cols});
  for (std::size_t r = 0; r < out_rows; ++r) {
    std::copy_n(xv.data.begin() + static_cast<std::ptrdiff_t>((r0 + r) * cols + c0), out_cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(r * out_cols));
  }
  const NodeId ix = x.id();
  return tape.record(std::move(out), {ix},
                     [ix, r0, c0, out_rows, out_cols, cols](Tape& t, NodeId, std::span<const float> g) {
                       auto dx = t.grad_buffer(ix);
                       for (std::size_t r = 0; r < out_rows; ++r) {
                         for (std::size_t c = 0; c < out_cols; ++c) {
                           dx[(r0 + r) * cols + c0 + c] += g[r * out_cols + c];
                         }
                       }
                     });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis > 1) dimension_error("concat", "axis " + std::to_string(axis) + " out of range");
  Tape& tape = parts[0].tape();
  const Tensor& first = parts[0].value();
  require_matrix("concat", first);
  std::size_t total = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    if (&p.tape() != &tape) throw ContractError("inputs recorded on different tapes");
    const Tensor& v = p.value();
    require_matrix("concat", v);
    if (v.shape[1 - axis] != first.shape[1 - axis]) {
      dimension_error("concat", "shapes " + shape_to_string(first.shape) + " and " +
                                    shape_to_string(v.shape) + " disagree off axis " + std::to_string(axis));
    }
    total += v.shape[axis];
    ids.push_back(p.id());
    extents.push_back(v.shape[axis]);
  }
  const std::size_t rows = axis == 0 ? total : first.shape[0];
  const std::size_t cols = axis == 1 ? total : first.shape[1];
  Tensor out = Tensor::zeros({rows, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t pr = v.shape[0], pc = v.shape[1];
    for (std::size_t r = 0; r < pr; ++r) {
      const std::size_t dst = axis == 0 ? (offset + r) * cols : r * cols + offset;
      std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>(r * pc), pc,
                  out.data.begin() + static_cast<std::ptrdiff_t>(dst));
    }
    offset += v.shape[axis];
  }
  return tape.record(std::move(out), ids,
                     [ids, extents, axis, rows, cols](Tape& t, NodeId, std::span<const float> g) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < ids.size(); ++p) {
                         const std::size_t pr = axis == 0 ? extents[p] : rows;
                         const std::size_t pc = axis == 1 ? extents[p] : cols;
                         if (t.requires_grad(ids[p])) {
                           auto dp = t.grad_buffer(ids[p]);
                           for (std::size_t r = 0; r < pr; ++r) {
                             const std::size_t src = axis == 0 ? (offset + r) * cols : r * cols + offset;
                             for (std::size_t c = 0; c < pc; ++c) dp[r * pc + c] += g[src + c];
                           }
                         }
                         offset += extents[p];
                       }
                     });
}

Var cross_entropy_logits(Var logits, std::span<const std::int32_t> targets) {
  Tape& tape = common_tape({logits});
  const Tensor& lv = logits.value();
  const auto [rows, vocab] = as_rows("cross_entropy_logits", lv);
  if (targets.size() != rows) {
    dimension_error("cross_entropy_logits", std::to_string(targets.size()) + " targets for " +
                                                std::to_string(rows) + " rows");
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<float> probs(lv.numel());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab) {
      dimension_error("cross_entropy_logits", "target " + std::to_string(tgt[r]) + " outside vocabulary of " +
                                                  std::to_string(vocab));
    }
    const float* xr = lv.data.data() + r * vocab;
    float mx = xr[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, xr[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(xr[c]) - mx);
    const double logz = std::log(z) + mx;
    total += logz - xr[tgt[r]];
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = static_cast<float>(std::exp(static_cast<double>(xr[c]) - logz));
    }
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(rows)));
  const NodeId il = logits.id();
  return tape.record(std::move(out), {il},
                     [il, rows, vocab, tgt = std::move(tgt), probs = std::move(probs)](
                         Tape& t, NodeId, std::span<const float> g) {
                       auto dl = t.grad_buffer(il);
                       const float s = g[0] / static_cast<float>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < vocab; ++c) dl[r * vocab + c] += s * probs[r * vocab + c];
                         dl[r * vocab + static_cast<std::size_t>(tgt[r])] -= s;
                       }
                     });
}

Var sum(Var x) {
  Tape& tape = common_tape({x});
  double total = 0.0;
  for (float v : x.value().data) total += v;
  const NodeId ix = x.id();
  return tape.record(Tensor::scalar(static_cast<float>(total)), {ix},
                     [ix](Tape& t, NodeId, std::span<const float> g) {
                       for (float& d : t.grad_buffer(ix)) d += g[0];
                     });
}

Var mean(Var x) {
  Tape& tape = common_tape({x});
  const std::size_t n = x.value().numel();
  if (n == 0) throw DimensionError("mean: empty tensor");
  double total = 0.0;
  for (float v : x.value().data) total += v;
  const NodeId ix = x.id();
  return tape.record(Tensor::scalar(static_cast<float>(total / static_cast<double>(n))), {ix},
                     [ix, n](Tape& t, NodeId, std::span<const float> g) {
                       const float s = g[0] / static_cast<float>(n);
                       for (float& d : t.grad_buffer(ix)) d += s;
                     });
}

Var detach(Var x) {
  Tape& tape = common_tape({x});
  return tape.record(Tensor(x.value().shape, x.value().data), {}, nullptr);
}

Var detached_residual(Var h, Var o) {
  Tape& tape = common_tape({h, o});
  require_same_shape("detached_residual", h.value(), o.value());
  const NodeId ih = h.id();
  return tape.record(Tensor(o.value().shape, o.value().data), {ih},
                     [ih](Tape& t, NodeId, std::span<const float> g) { axpy(t.grad_buffer(ih), g); });
}

}  // namespace ops

Var primitive_forward(PrimitiveKind kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs) {
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (inputs.size() < lo || inputs.size() > hi) {
      throw DimensionError(std::string(to_string(kind)) + ": expected " + std::to_string(lo) +
                           (lo == hi ? "" : "-" + std::to_string(hi)) + " inputs, got " +
                           std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case PrimitiveKind::matmul: arity(2, 2); return ops::matmul(inputs[0], inputs[1], attrs.transpose_b);
    case PrimitiveKind::add: arity(2, 2); return ops::add(inputs[0], inputs[1]);
    case PrimitiveKind::mul: arity(2, 2); return ops::mul(inputs[0], inputs[1]);
    case PrimitiveKind::scale: arity(1, 1); return ops::scale(inputs[0], attrs.factor);
    case PrimitiveKind::embedding_lookup: arity(1, 1); return ops::embedding_lookup(inputs[0], attrs.indices);
    case PrimitiveKind::rms_norm:
      arity(1, 2);
      return ops::rms_norm(inputs[0], inputs.size() > 1 ? inputs[1] : Var{}, attrs.eps);
    case PrimitiveKind::softmax: arity(1, 1); return ops::softmax(inputs[0], attrs.causal);
    case PrimitiveKind::silu: arity(1, 1); return ops::silu(inputs[0]);
    case PrimitiveKind::transpose: arity(1, 1); return ops::transpose(inputs[0]);
    case PrimitiveKind::reshape: arity(1, 1); return ops::reshape(inputs[0], attrs.shape);
    case PrimitiveKind::slice: arity(1, 1); return ops::slice(inputs[0], attrs.axis, attrs.start, attrs.length);
    case PrimitiveKind::concat: arity(1, inputs.size()); return ops::concat(inputs, attrs.axis);
    case PrimitiveKind::cross_entropy_logits:
      arity(1, 1);
      return ops::cross_entropy_logits(inputs[0], attrs.indices);
    case PrimitiveKind::sum: arity(1, 1); return ops::sum(inputs[0]);
    case PrimitiveKind::mean: arity(1, 1); return ops::mean(inputs[0]);
  }
  throw UnsupportedPrimitiveError("unsupported primitive kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace lcsb
