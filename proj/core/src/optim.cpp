// SPDX-License-Identifier: Apache-2.0
#include "lcsb/optim.hpp"

#include <cmath>
#include <string>

#include "lcsb/errors.hpp"

namespace lcsb {

void adamw_step(OptimizerState& state, std::span<Tensor* const> params, const GradientMap& grads) {
  if (state.moments.empty()) {
    state.moments.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.moments[i].m.assign(params[i]->numel(), 0.0f);
      state.moments[i].v.assign(params[i]->numel(), 0.0f);
    }
  }
  if (state.moments.size() != params.size()) {
    throw ContractError("optimizer state tracks " + std::to_string(state.moments.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads.contains(params[i])) {
      throw ContractError("missing gradient for parameter " + std::to_string(i) + "; zeros must be explicit");
    }
  }

  // Moments are stored as float; each element's update is evaluated in
  // double and rounded once, so the zero-gradient delta is the correctly
  // rounded closed form.
  const AdamWConfig& h = state.hyper;
  state.t += 1;
  const double b1 = h.beta1, b2 = h.beta2, lr = h.lr, eps = h.eps;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  const double decay = lr * static_cast<double>(h.weight_decay);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads.at(params[i]);
    if (g.numel() != p.numel()) throw ContractError("gradient size does not match parameter " + std::to_string(i));
    auto& m = state.moments[i].m;
    auto& v = state.moments[i].v;
    for (std::size_t j = 0; j < p.numel(); ++j) {
      double theta = p.data[j];
      theta -= decay * theta;
      const double gj = g.data[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * (gj * gj);
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double m_hat = h.bias_correction ? mj / bc1 : mj;
      const double v_hat = h.bias_correction ? vj / bc2 : vj;
      theta -= lr * (m_hat / (std::sqrt(v_hat) + eps));
      p.data[j] = static_cast<float>(theta);
    }
  }
}

GradientMap with_explicit_zeros(const GradientMap& grads, std::span<Tensor* const> params) {
  GradientMap out;
  for (Tensor* p : params) out.set(p, grads.contains(p) ? grads.at(p) : Tensor::zeros(p->shape));
  return out;
}

std::string_view to_string(FillMode mode) { return mode == FillMode::zero_fill ? "zero_fill" : "cached_fill"; }

void stale_cache_step(OptimizerState& state, GradientCache& cache, std::span<Tensor* const> params,
                      const GradientMap& grads, const std::vector<bool>& exact, FillMode mode) {
  if (exact.size() != params.size()) throw ContractError("exactness mask does not cover every parameter");
  cache.last.resize(params.size());
  cache.captured_at.resize(params.size(), -1);
  const long step = state.t + 1;
  GradientMap merged;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor* p = params[i];
    if (exact[i]) {
      const Tensor& g = grads.at(p);
      merged.set(p, g);
      cache.last[i] = g;
      cache.captured_at[i] = step;
    } else if (mode == FillMode::cached_fill && cache.has(i)) {
      merged.set(p, *cache.last[i]);
    } else {
      merged.set(p, Tensor::zeros(p->shape));
    }
  }
  adamw_step(state, params, merged);
}

ZeroOrderResult zero_order_step(std::span<Tensor* const> params, const std::function<double()>& loss,
                                float perturb_scale, float lr, Rng& rng) {
  if (!(perturb_scale > 0.0f)) throw InputError("perturb_scale must be positive");
  const std::uint64_t z_seed = rng.next_u64();

  std::vector<std::vector<float>> original;
  original.reserve(params.size());
  for (Tensor* p : params) original.push_back(p->data);

  // Writes theta0 + sign * scale * z into the parameters.
  auto apply = [&](float sign, float scale) {
    Rng z(z_seed);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& data = params[i]->data;
      for (std::size_t j = 0; j < data.size(); ++j) {
        data[j] = original[i][j] + sign * scale * static_cast<float>(z.normal());
      }
    }
  };
  auto restore = [&] {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->data = original[i];
  };

  ZeroOrderResult result;
  apply(1.0f, perturb_scale);
  result.loss_plus = loss();
  apply(-1.0f, perturb_scale);
  result.loss_minus = loss();
  restore();
  if (!std::isfinite(result.loss_plus) || !std::isfinite(result.loss_minus)) {
    throw DivergenceError("zeroth-order probe produced a non-finite loss (L+=" + std::to_string(result.loss_plus) +
                              ", L-=" + std::to_string(result.loss_minus) + ")",
                          result.loss_plus, result.loss_minus);
  }
  result.projected_grad = (result.loss_plus - result.loss_minus) / (2.0 * static_cast<double>(perturb_scale));
  apply(-1.0f, static_cast<float>(lr * result.projected_grad));
  return result;
}

}  // namespace lcsb
