// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string_view>
#include <utility>
#include <vector>

#include "lcsb/plan.hpp"
#include "lcsb/random.hpp"

namespace lcsb {

enum class ScheduleKind { fixed, cosine, linear, step };

std::string_view to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view name);

/// Selection ratio r over training steps 1..T.
struct RatioSchedule {
  ScheduleKind kind = ScheduleKind::fixed;
  double r_start = 0.5;
  double r_end = 0.5;
  /// (first step, ratio) pairs for kind=step, ascending by step. When empty
  /// the step schedule uses r_start for the first quarter of T, 0.5
  /// (clamped into [r_end, r_start]) for the second quarter, r_end after.
  std::vector<std::pair<long, double>> boundaries;

  /// Throws ScheduleError when a ratio is outside (0, 1].
  void validate() const;
};

/// Ratio at step t of T; see RatioSchedule for the per-kind rule.
double schedule_ratio(const RatioSchedule& schedule, long t, long total_steps);

/// Boundaries used by a step schedule for a run of T steps.
std::vector<std::pair<long, double>> effective_step_boundaries(const RatioSchedule& schedule, long total_steps);

enum class StrategyKind { uniform, round_robin, importance, freeze, full, stochastic_depth };

std::string_view to_string(StrategyKind kind);
StrategyKind parse_strategy_kind(std::string_view name);

struct SelectionStrategy {
  StrategyKind kind = StrategyKind::uniform;
  double freeze_fraction = 0.5;
  double ema_alpha = 0.9;
  double temperature = 2.0;

  void validate() const;
};

/// Per-layer EMA of LoRA gradient norms; starts at 1.
struct ImportanceState {
  std::vector<double> scores;

  static ImportanceState ones(std::size_t n_layers) { return {std::vector<double>(n_layers, 1.0)}; }
};

/// k = ceil(n * r), guarded against floating-point noise just above an
/// integer (0.3 * 10 must give 3, not 4).
std::size_t layers_for_ratio(std::size_t n, double r);

/// Chooses the attached layers for step t (1-based). During warmup
/// (t <= warmup) every layer is attached. rng may be null for strategies
/// that do not sample; a sampling strategy without one raises
/// MissingRngError.
SelectionPlan select_layers(const SelectionStrategy& strategy, const ImportanceState& importance, long t,
                            long warmup, std::size_t n, double r, Rng* rng);

/// scores[i] <- alpha * scores[i] + (1 - alpha) * g_i for attached i only.
ImportanceState update_importance(const ImportanceState& state, const SelectionPlan& plan,
                                  const std::vector<double>& lora_grad_norms, double alpha);

/// softmax(scores / temperature) as sampling weights.
std::vector<double> importance_probabilities(const ImportanceState& state, double temperature);

}  // namespace lcsb
