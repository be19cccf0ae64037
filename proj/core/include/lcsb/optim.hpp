// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "lcsb/random.hpp"
#include "lcsb/tape.hpp"
#include "lcsb/tensor.hpp"

namespace lcsb {

struct AdamWConfig {
  float lr = 1e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
  bool bias_correction = true;
};

struct Moments {
  std::vector<float> m;
  std::vector<float> v;
};

/// AdamW state for an ordered parameter list; moments[i] belongs to
/// params[i] of every call.
struct OptimizerState {
  AdamWConfig hyper;
  long t = 0;
  std::vector<Moments> moments;
};

/// One AdamW step over every parameter:
///   theta <- theta - lr * wd * theta                    (decoupled decay)
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
/// where m_hat, v_hat are bias corrected only when hyper.bias_correction.
/// With g = 0 this is the momentum-driven implicit update. Every parameter
/// needs an explicit entry in grads (ContractError otherwise).
void adamw_step(OptimizerState& state, std::span<Tensor* const> params, const GradientMap& grads);

/// Adds an all-zero gradient for each parameter missing from grads.
GradientMap with_explicit_zeros(const GradientMap& grads, std::span<Tensor* const> params);

/// Last exact gradient seen for each parameter (ablation support).
struct GradientCache {
  std::vector<std::optional<Tensor>> last;
  std::vector<long> captured_at;

  bool has(std::size_t i) const { return i < last.size() && last[i].has_value(); }
};

enum class FillMode { zero_fill, cached_fill };

std::string_view to_string(FillMode mode);

/// AdamW step where parameters without an exact gradient this step
/// (exact[i] == false) receive zeros (zero_fill) or their cached last exact
/// gradient (cached_fill; zeros when the cache is empty). The cache is
/// refreshed from the exact entries.
void stale_cache_step(OptimizerState& state, GradientCache& cache, std::span<Tensor* const> params,
                      const GradientMap& grads, const std::vector<bool>& exact, FillMode mode);

struct ZeroOrderResult {
  double loss_plus = 0.0;
  double loss_minus = 0.0;
  double projected_grad = 0.0;
};

/// Two-point zeroth-order step with a shared Gaussian perturbation z:
///   g_hat = (L(theta + eps z) - L(theta - eps z)) / (2 eps)
///   theta <- theta - lr * g_hat * z
/// z is regenerated from a per-step seed drawn from rng rather than
/// stored. Throws DivergenceError when either probe loss is non-finite
/// (parameters are restored first).
ZeroOrderResult zero_order_step(std::span<Tensor* const> params, const std::function<double()>& loss,
                                float perturb_scale, float lr, Rng& rng);

}  // namespace lcsb
