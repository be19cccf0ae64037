// SPDX-License-Identifier: Apache-2.0
#include "lcsb/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "lcsb/errors.hpp"

namespace lcsb {

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::fixed: return "fixed";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::step: return "step";
  }
  return "unknown";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  for (auto k : {ScheduleKind::fixed, ScheduleKind::cosine, ScheduleKind::linear, ScheduleKind::step}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown schedule kind '" + std::string(name) + "'");
}

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::uniform: return "uniform";
    case StrategyKind::round_robin: return "round_robin";
    case StrategyKind::importance: return "importance";
    case StrategyKind::freeze: return "freeze";
    case StrategyKind::full: return "full";
    case StrategyKind::stochastic_depth: return "stochastic_depth";
  }
  return "unknown";
}

StrategyKind parse_strategy_kind(std::string_view name) {
  for (auto k : {StrategyKind::uniform, StrategyKind::round_robin, StrategyKind::importance, StrategyKind::freeze,
                 StrategyKind::full, StrategyKind::stochastic_depth}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown selection strategy '" + std::string(name) + "'");
}

namespace {

void check_ratio(double r, const char* what) {
  if (!(r > 0.0 && r <= 1.0)) {
    throw ScheduleError(std::string(what) + " must lie in (0, 1], got " + std::to_string(r));
  }
}

}  // namespace

void RatioSchedule::validate() const {
  check_ratio(r_start, "r_start");
  check_ratio(r_end, "r_end");
  long previous = 0;
  for (const auto& [step, r] : boundaries) {
    check_ratio(r, "step boundary ratio");
    if (step <= previous) throw ScheduleError("step boundaries must be strictly ascending and start at >= 1");
    previous = step;
  }
}

std::vector<std::pair<long, double>> effective_step_boundaries(const RatioSchedule& schedule, long total_steps) {
  if (!schedule.boundaries.empty()) return schedule.boundaries;
  const double lo = std::min(schedule.r_start, schedule.r_end);
  const double hi = std::max(schedule.r_start, schedule.r_end);
  const double middle = std::clamp(0.5, lo, hi);
  return {{1, schedule.r_start}, {total_steps / 4 + 1, middle}, {total_steps / 2 + 1, schedule.r_end}};
}

double schedule_ratio(const RatioSchedule& schedule, long t, long total_steps) {
  schedule.validate();
  if (schedule.kind == ScheduleKind::fixed) {
    if (t < 1) throw ScheduleError("step must be >= 1, got " + std::to_string(t));
    return schedule.r_start;
  }
  if (total_steps < 2) {
    throw ScheduleError(std::string(to_string(schedule.kind)) + " schedule needs T >= 2, got " +
                        std::to_string(total_steps));
  }
  if (t < 1 || t > total_steps) {
    throw ScheduleError("step " + std::to_string(t) + " outside 1.." + std::to_string(total_steps));
  }
  const double progress = static_cast<double>(t - 1) / static_cast<double>(total_steps - 1);
  const double r0 = schedule.r_start, r1 = schedule.r_end;
  switch (schedule.kind) {
    case ScheduleKind::linear: return r0 + (r1 - r0) * progress;
    case ScheduleKind::cosine: return r1 + (r0 - r1) * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
    case ScheduleKind::step: {
      double r = r0;
      for (const auto& [step, value] : effective_step_boundaries(schedule, total_steps)) {
        if (step <= t) r = value;
      }
      return r;
    }
    case ScheduleKind::fixed: break;
  }
  return r0;
}

void SelectionStrategy::validate() const {
  if (!(freeze_fraction >= 0.0 && freeze_fraction < 1.0)) {
    throw ConfigError("freeze_fraction must lie in [0, 1)");
  }
  if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) throw ConfigError("ema_alpha must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
}

std::size_t layers_for_ratio(std::size_t n, double r) {
  const double exact = static_cast<double>(n) * r;
  const double rounded = std::round(exact);
  const double k = std::abs(exact - rounded) < 1e-9 ? rounded : std::ceil(exact);
  return std::clamp<std::size_t>(static_cast<std::size_t>(k), 1, n);
}

std::vector<double> importance_probabilities(const ImportanceState& state, double temperature) {
  std::vector<double> p(state.scores.size());
  if (p.empty()) return p;
  const double mx = *std::max_element(state.scores.begin(), state.scores.end()) / temperature;
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(state.scores[i] / temperature - mx);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

namespace {

std::vector<std::size_t> sample_uniform(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

// Successive weighted draws without replacement.
std::vector<std::size_t> sample_weighted(std::vector<double> weights, std::size_t k, Rng& rng) {
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double u = rng.uniform01() * total;
    std::size_t pick = weights.size();
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] <= 0.0) continue;
      pick = i;
      if (u < weights[i]) break;
      u -= weights[i];
    }
    chosen.push_back(pick);
    weights[pick] = 0.0;
  }
  return chosen;
}

}  // namespace

SelectionPlan select_layers(const SelectionStrategy& strategy, const ImportanceState& importance, long t,
                            long warmup, std::size_t n, double r, Rng* rng) {
  if (n == 0) throw InputError("select_layers needs at least one layer");
  if (!(r > 0.0 && r <= 1.0)) throw ScheduleError("selection ratio must lie in (0, 1], got " + std::to_string(r));

  SelectionPlan plan = SelectionPlan::all(n);
  plan.step = t;
  plan.r_used = r;
  if (t <= warmup || strategy.kind == StrategyKind::full) {
    plan.r_used = 1.0;
    return plan;
  }

  const BlockMode off = strategy.kind == StrategyKind::stochastic_depth ? BlockMode::dropped : BlockMode::detached;
  std::vector<std::size_t> attached;
  switch (strategy.kind) {
    case StrategyKind::uniform:
    case StrategyKind::stochastic_depth:
    case StrategyKind::importance: {
      if (!rng) throw MissingRngError(std::string(to_string(strategy.kind)) + " selection needs a generator");
      const std::size_t k = layers_for_ratio(n, r);
      // k == n needs no draw; leaving the generator untouched keeps r = 1
      // runs identical to full backpropagation.
      if (k == n) return plan;
      if (strategy.kind == StrategyKind::importance) {
        if (importance.scores.size() != n) throw InputError("importance state does not cover every layer");
        attached = sample_weighted(importance_probabilities(importance, strategy.temperature), k, *rng);
      } else {
        attached = sample_uniform(n, k, *rng);
      }
      break;
    }
    case StrategyKind::round_robin: {
      const std::size_t k = layers_for_ratio(n, r);
      const auto offset = static_cast<std::size_t>(t - warmup - 1);
      const std::size_t start = (offset * k) % n;
      for (std::size_t i = 0; i < k; ++i) attached.push_back((start + i) % n);
      break;
    }
    case StrategyKind::freeze: {
      const auto first = static_cast<std::size_t>(std::floor(static_cast<double>(n) * strategy.freeze_fraction));
      for (std::size_t i = first; i < n; ++i) attached.push_back(i);
      plan.r_used = static_cast<double>(attached.size()) / static_cast<double>(n);
      break;
    }
    case StrategyKind::full: return plan;
  }
  plan.modes.assign(n, off);
  for (std::size_t i : attached) plan.modes[i] = BlockMode::attached;
  plan.k_used = attached.size();
  return plan;
}

ImportanceState update_importance(const ImportanceState& state, const SelectionPlan& plan,
                                  const std::vector<double>& lora_grad_norms, double alpha) {
  if (lora_grad_norms.size() != state.scores.size() || plan.modes.size() != state.scores.size()) {
    throw InputError("importance update needs one gradient norm and one plan entry per layer");
  }
  ImportanceState next = state;
  for (std::size_t i = 0; i < next.scores.size(); ++i) {
    if (!plan.is_attached(i)) continue;
    const double g = lora_grad_norms[i];
    if (!(g >= 0.0)) throw InputError("gradient norm of layer " + std::to_string(i) + " is negative");
    next.scores[i] = alpha * next.scores[i] + (1.0 - alpha) * g;
  }
  return next;
}

}  // namespace lcsb
