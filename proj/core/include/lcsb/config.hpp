// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcsb/model.hpp"
#include "lcsb/optim.hpp"
#include "lcsb/selection.hpp"

namespace lcsb {

enum class Method { lcsb, full_backprop, stochastic_depth, freeze, mezo };
enum class AblationMode { none, cached_fill };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);
std::string_view to_string(AblationMode mode);
AblationMode parse_ablation_mode(std::string_view name);

struct ZeroOrderConfig {
  float lr = 1e-6f;
  float perturb_scale = 1e-3f;
};

struct TrainConfig {
  ModelConfig model;
  SelectionStrategy strategy;
  RatioSchedule schedule;
  AdamWConfig optimizer;
  ZeroOrderConfig zero_order;
  long warmup_steps = 50;
  long total_steps = 500;
  std::size_t batch_size = 1;
  std::uint64_t seed = 42;
  std::string corpus_path;
  double eval_fraction = 0.1;
  long eval_every = 50;
  /// Cap on eval windows (0 evaluates the whole held-out split).
  std::size_t eval_windows = 0;
  double divergence_threshold = 20.0;
  AblationMode ablation_mode = AblationMode::none;
  Method method = Method::lcsb;

  /// Throws ConfigError (or ScheduleError for the ratio schedule).
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

/// Strict: unknown keys and wrongly typed values raise ConfigError naming
/// the dotted path. Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& doc);

/// Applies "a.b.c=value" to doc. The value is parsed as JSON when possible
/// and taken as a plain string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Reads a JSON config file, applies overrides in order, then LCSB_SEED
/// from the environment when set.
TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& doc);

}  // namespace lcsb
