// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lcsb/config.hpp"
#include "lcsb/corpus.hpp"
#include "lcsb/model.hpp"
#include "lcsb/optim.hpp"
#include "lcsb/random.hpp"
#include "lcsb/selection.hpp"

namespace lcsb {

struct StepMetrics {
  long step = 0;
  double train_loss = 0.0;
  double r_used = 1.0;
  std::vector<std::size_t> selected_layers;
  double t_forward = 0.0;
  double t_backward = 0.0;
  double t_optimizer = 0.0;
  double t_selection = 0.0;
  /// Wall time of the whole step, eval excluded.
  double t_step = 0.0;
  double cumulative_time = 0.0;
  std::optional<double> eval_loss;
};

struct EvalPoint {
  long step = 0;
  double loss = 0.0;
};

struct RunReport {
  TrainConfig config;
  std::vector<StepMetrics> metrics;
  std::vector<EvalPoint> evals;
  double initial_eval_loss = 0.0;
  /// +infinity when the run diverged.
  double final_eval_loss = 0.0;
  bool diverged = false;
  long divergence_step = 0;
  std::string divergence_reason;
  double total_forward = 0.0;
  double total_backward = 0.0;
  double total_optimizer = 0.0;
  double total_selection = 0.0;
  double total_time_excluding_eval = 0.0;
  double total_time_including_eval = 0.0;

  double backward_share() const;
  double mean_backward_time() const;
};

/// Mean cross-entropy over the eval windows with every layer attached.
/// Consumes no randomness and records no backward graph.
double evaluate(const Model& model, std::span<const std::int32_t> eval_tokens, std::size_t seq_len,
                std::size_t max_windows = 0);
double evaluate(const Model& model, const Batch& windows);

/// Zeroth-order step on the model's LoRA tensors, using the batch loss with
/// every layer attached. Base weights are never touched.
ZeroOrderResult zero_order_step(Model& model, const Batch& batch, float perturb_scale, float lr, Rng& rng);

/// Runs one configuration step by step. Owns the model, optimizer state,
/// importance scores, gradient cache and one generator per random stream
/// (data, selection, zeroth-order).
class Trainer {
 public:
  explicit Trainer(TrainConfig config);

  /// Restores a run saved with save(); the corpus is re-read from the
  /// checkpointed config.
  static Trainer resume(const std::filesystem::path& checkpoint_dir);

  /// Runs the next step. Returns false once all steps ran or the run
  /// diverged.
  bool step();
  void run_until(long step);
  bool finished() const noexcept;

  /// Final eval (unless diverged) and the assembled report.
  RunReport finish();

  /// Writes manifest.json and blob.bin into dir.
  void save(const std::filesystem::path& dir) const;

  long current_step() const noexcept { return t_; }
  const Model& model() const noexcept { return *model_; }
  const TrainConfig& config() const noexcept { return config_; }
  const std::vector<StepMetrics>& metrics() const noexcept { return report_.metrics; }
  const ImportanceState& importance() const noexcept { return importance_; }

  std::function<void(const StepMetrics&)> on_step;

 private:
  struct NoInit {};
  Trainer(TrainConfig config, NoInit);
  void load_data();
  void bind_parameters();
  SelectionPlan plan_for(long t, double& t_selection);
  StepMetrics first_order_step(const Batch& batch);
  StepMetrics zero_order_step_metrics(const Batch& batch);
  double run_eval();

  TrainConfig config_;
  // Heap-allocated so parameter pointers survive moving the trainer.
  std::unique_ptr<Model> model_;
  std::vector<NamedParameter> named_params_;
  std::vector<Tensor*> params_;
  CorpusSplit split_;
  Batch eval_set_;
  OptimizerState optimizer_;
  GradientCache cache_;
  ImportanceState importance_;
  Rng data_rng_;
  Rng selection_rng_;
  Rng zo_rng_;
  long t_ = 0;
  double eval_time_ = 0.0;
  RunReport report_;
};

/// Trainer(config).run_until(T).finish().
RunReport train(const TrainConfig& config);

/// Writes metrics.jsonl, metrics.csv and summary.json into dir.
void write_run_outputs(const RunReport& report, const std::filesystem::path& dir);

nlohmann::json to_json(const StepMetrics& m);
StepMetrics step_metrics_from_json(const nlohmann::json& j);
nlohmann::json summary_json(const RunReport& report);

/// Reads a run directory written by write_run_outputs (ReportingError when
/// a file is missing or malformed).
RunReport read_run_outputs(const std::filesystem::path& dir);

/// Process exit code for a finished run: 0 converged, 2 divergence.
int exit_code(const RunReport& report);

}  // namespace lcsb
