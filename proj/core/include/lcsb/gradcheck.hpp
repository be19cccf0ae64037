// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lcsb/tensor.hpp"

namespace lcsb {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per
/// coordinate. The denominator uses the perturbation actually realized in
/// float32, which removes the rounding of x +/- eps from the estimate.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                              float eps);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, max_j |b_j|): the error of each
/// coordinate relative to the gradient's max-norm. Float32 central
/// differences carry absolute noise of order ulp(f) / eps, so a purely
/// elementwise ratio is meaningless on coordinates whose true gradient is
/// near zero.
double max_relative_error(const Tensor& analytic, const Tensor& oracle);

/// Step used by the primitive sweep; balances float32 rounding noise
/// against truncation error for the smooth primitives.
inline constexpr float kPrimitiveCheckEps = 1e-2f;

struct GradcheckResult {
  std::string name;
  double max_relative_error = 0.0;
  int seeds = 0;
  bool passed = false;
};

/// Checks every primitive's backward rule against finite_difference_grad
/// on random inputs no larger than 8x8, one trial per seed.
std::vector<GradcheckResult> run_primitive_gradcheck(int seeds, double tolerance, std::uint64_t base_seed = 1);

}  // namespace lcsb
