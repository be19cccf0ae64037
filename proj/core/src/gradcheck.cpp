// SPDX-License-Identifier: Apache-2.0
#include "lcsb/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "lcsb/random.hpp"
#include "lcsb/tape.hpp"

namespace lcsb {

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta, float eps) {
  Tensor grad = Tensor::zeros(theta.shape);
  Tensor probe = theta;
  for (std::size_t i = 0; i < theta.numel(); ++i) {
    const float x = theta.data[i];
    const float up = x + eps;
    const float down = x - eps;
    probe.data[i] = up;
    const double f_up = f(probe);
    probe.data[i] = down;
    const double f_down = f(probe);
    probe.data[i] = x;
    grad.data[i] = static_cast<float>((f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down)));
  }
  return grad;
}

double max_relative_error(const Tensor& analytic, const Tensor& oracle) {
  double scale = 0.0;
  for (float v : oracle.data) scale = std::max(scale, std::abs(static_cast<double>(v)));
  const double floor = std::max(scale, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < oracle.numel(); ++i) {
    const double a = analytic.data[i];
    const double b = oracle.data[i];
    const double denom = std::max({std::abs(a), std::abs(b), floor});
    worst = std::max(worst, std::abs(a - b) / denom);
  }
  return worst;
}

namespace {

struct Case {
  std::string name;
  std::vector<Tensor> inputs;  // inputs with requires_grad are checked
  std::function<Var(std::vector<Var>&)> build;
};

Tensor random_tensor(Rng& rng, Shape shape, double spread, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (float& v : t.data) v = static_cast<float>(spread * rng.normal());
  return t;
}

std::size_t dim(Rng& rng) { return 2 + rng.uniform_index(7); }  // 2..8

std::vector<Case> make_cases(Rng& rng) {
  std::vector<Case> cases;
  const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);

  cases.push_back({"matmul",
                   {random_tensor(rng, {m, k}, 1.0, true), random_tensor(rng, {k, n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::matmul(v[0], v[1]); }});
  cases.push_back({"matmul_transpose_b",
                   {random_tensor(rng, {m, k}, 1.0, true), random_tensor(rng, {n, k}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::matmul(v[0], v[1], true); }});
  cases.push_back({"add",
                   {random_tensor(rng, {m, n}, 1.0, true), random_tensor(rng, {m, n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::add(v[0], v[1]); }});
  cases.push_back({"mul",
                   {random_tensor(rng, {m, n}, 1.0, true), random_tensor(rng, {m, n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::mul(v[0], v[1]); }});
  const float factor = static_cast<float>(rng.normal());
  cases.push_back({"scale", {random_tensor(rng, {m, n}, 1.0, true)},
                   [factor](std::vector<Var>& v) { return ops::scale(v[0], factor); }});

  std::vector<std::int32_t> ids(m);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.uniform_index(k));
  cases.push_back({"embedding_lookup", {random_tensor(rng, {k, n}, 1.0, true)},
                   [ids](std::vector<Var>& v) { return ops::embedding_lookup(v[0], ids); }});

  cases.push_back({"rms_norm",
                   {random_tensor(rng, {m, n}, 1.0, true), random_tensor(rng, {n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::rms_norm(v[0], v[1], 1e-6f); }});
  cases.push_back({"softmax", {random_tensor(rng, {m, n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::softmax(v[0]); }});
  cases.push_back({"softmax_causal", {random_tensor(rng, {m, m}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::softmax(v[0], true); }});
  cases.push_back({"silu", {random_tensor(rng, {m, n}, 2.0, true)},
                   [](std::vector<Var>& v) { return ops::silu(v[0]); }});
  cases.push_back({"transpose", {random_tensor(rng, {m, n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::transpose(v[0]); }});
  cases.push_back({"reshape", {random_tensor(rng, {m, n}, 1.0, true)},
                   [m, n](std::vector<Var>& v) { return ops::reshape(v[0], {n, m}); }});
  const std::size_t start = rng.uniform_index(n - 1);
  const std::size_t len = 1 + rng.uniform_index(n - start);
  cases.push_back({"slice", {random_tensor(rng, {m, n}, 1.0, true)},
                   [start, len](std::vector<Var>& v) { return ops::slice(v[0], 1, start, len); }});
  cases.push_back({"concat",
                   {random_tensor(rng, {m, n}, 1.0, true), random_tensor(rng, {m, k}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::concat(v, 1); }});
  std::vector<std::int32_t> targets(m);
  for (auto& t : targets) t = static_cast<std::int32_t>(rng.uniform_index(n));
  cases.push_back({"cross_entropy_logits", {random_tensor(rng, {m, n}, 1.0, true)},
                   [targets](std::vector<Var>& v) { return ops::cross_entropy_logits(v[0], targets); }});
  cases.push_back({"sum", {random_tensor(rng, {m, n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::sum(v[0]); }});
  cases.push_back({"mean", {random_tensor(rng, {m, n}, 1.0, true)},
                   [](std::vector<Var>& v) { return ops::mean(v[0]); }});
  return cases;
}

// Scalarizes an output with fixed random weights so every output element
// contributes to the checked gradient.
double project(const Tensor& y, const Tensor& weights) {
  if (y.numel() == 1) return y.data[0];
  double total = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) total += static_cast<double>(weights.data[i]) * y.data[i];
  return total;
}

double check_case(const Case& c, Rng& rng) {
  Tensor weights;
  {
    Tape probe;
    std::vector<Var> vars;
    Tape::Pause pause(probe);
    for (const auto& t : c.inputs) vars.push_back(probe.leaf(t));
    weights = random_tensor(rng, c.build(vars).value().shape, 1.0, false);
  }

  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : c.inputs) vars.push_back(tape.leaf(t));
  Var y = c.build(vars);
  Var loss = y.value().numel() == 1 ? y : ops::sum(ops::mul(y, tape.constant(weights)));
  const GradientMap grads = tape.backward(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    if (!c.inputs[i].requires_grad) continue;
    auto f = [&](const Tensor& theta) {
      Tape t;
      Tape::Pause pause(t);
      std::vector<Var> vs;
      for (std::size_t j = 0; j < c.inputs.size(); ++j) vs.push_back(t.leaf(j == i ? theta : c.inputs[j]));
      return project(c.build(vs).value(), weights);
    };
    const Tensor oracle = finite_difference_grad(f, c.inputs[i], kPrimitiveCheckEps);
    worst = std::max(worst, max_relative_error(grads.at(&c.inputs[i]), oracle));
  }
  return worst;
}

}  // namespace

std::vector<GradcheckResult> run_primitive_gradcheck(int seeds, double tolerance, std::uint64_t base_seed) {
  std::vector<GradcheckResult> results;
  for (int s = 0; s < seeds; ++s) {
    Rng rng = Rng::derive(base_seed, static_cast<std::uint64_t>(s));
    const auto cases = make_cases(rng);
    if (results.empty()) {
      for (const auto& c : cases) results.push_back({c.name, 0.0, 0, true});
    }
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const double err = check_case(cases[i], rng);
      results[i].max_relative_error = std::max(results[i].max_relative_error, err);
      results[i].seeds += 1;
    }
  }
  for (auto& r : results) r.passed = r.max_relative_error < tolerance;
  return results;
}

}  // namespace lcsb
