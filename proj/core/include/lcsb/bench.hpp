// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcsb/train.hpp"

namespace lcsb {

/// A named set of dotted-path overrides applied to the suite's base config.
struct Variant {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();
};

struct SuiteConfig {
  /// TrainConfig as JSON so variants can override any field.
  nlohmann::json base = nlohmann::json::object();
  std::vector<Variant> variants;
  /// Seeds per variant: base seed, base seed + 1, ...
  int repeats = 3;
  std::string reference_variant;
  /// Speedups from wall time without eval (both are persisted).
  bool exclude_eval = false;
  /// Runs concurrently; only losses are meaningful then.
  bool parallel = false;

  /// Throws SuiteError.
  void validate() const;
  TrainConfig variant_config(const Variant& variant, int repeat) const;
};

/// Reads a suite file. `base` is either an inline run config or a path to
/// one (relative to the suite file); a relative corpus_path is taken
/// relative to the file that holds it.
SuiteConfig load_suite_config(const std::filesystem::path& path);
SuiteConfig suite_config_from_json(const nlohmann::json& doc);

struct RunOutcome {
  std::string variant;
  std::uint64_t seed = 0;
  bool diverged = false;
  double final_eval_loss = 0.0;
  double time_excluding_eval = 0.0;
  double time_including_eval = 0.0;
  double backward_share = 0.0;
  double mean_backward_time = 0.0;
  /// Mean r_used over steps after warmup (1 when every step is warmup).
  double mean_ratio = 1.0;
  /// Empty when the run outputs were not written to disk.
  std::filesystem::path run_dir;
};

struct VariantRow {
  std::string name;
  int runs = 0;
  int diverged = 0;
  /// Means and sample standard deviations over non-divergent runs.
  double loss_mean = 0.0;
  double loss_std = 0.0;
  double time_mean = 0.0;
  double time_std = 0.0;
  double time_including_eval_mean = 0.0;
  double backward_share = 0.0;
  double mean_backward_time = 0.0;
  double ratio = 1.0;
  /// Speedup on the suite's time basis, plus both bases explicitly.
  double speedup = 1.0;
  double speedup_including_eval = 1.0;
  double speedup_excluding_eval = 1.0;
  double loss_gap = 0.0;
};

struct ComparisonTable {
  std::string reference;
  bool exclude_eval = false;
  std::vector<VariantRow> rows;
  std::vector<RunOutcome> runs;
  std::vector<std::string> footnotes;

  const VariantRow& row(std::string_view name) const;
};

/// Aggregates finished runs. The reference row anchors speedup (reference
/// time / variant time) and loss_gap ((variant - reference) / reference).
/// Divergent runs are excluded from means and counted in footnotes; a
/// divergent reference run raises SuiteError.
ComparisonTable aggregate_runs(const std::vector<RunOutcome>& runs, const std::vector<std::string>& variant_order,
                               const std::string& reference, bool exclude_eval);

RunOutcome outcome_from_report(const std::string& variant, const RunReport& report);

/// Runs repeats x variants training runs and aggregates them. When out_dir
/// is given, each run writes its outputs under out_dir/runs/<variant>/seed-<s>
/// and the table is written as table.json and table.txt.
ComparisonTable run_suite(const SuiteConfig& suite, const std::optional<std::filesystem::path>& out_dir = {});

nlohmann::json to_json(const ComparisonTable& table);
std::string render_table(const ComparisonTable& table);
void write_table(const ComparisonTable& table, const std::filesystem::path& dir);

enum class PlotKind { loss_curve, ratio_sweep, strategy_bar };

std::string_view to_string(PlotKind kind);
PlotKind parse_plot_kind(std::string_view name);

/// Writes <kind>.csv into dir and returns its path. loss_curve reads the
/// JSONL traces of every run and lays out one step column plus one mean
/// train-loss column per variant. Raises ReportingError for an empty table
/// or a missing trace.
std::filesystem::path emit_plot_data(const ComparisonTable& table, PlotKind kind, const std::filesystem::path& dir);

}  // namespace lcsb
