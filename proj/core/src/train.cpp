// SPDX-License-Identifier: Apache-2.0
#include "lcsb/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "lcsb/checkpoint.hpp"
#include "lcsb/errors.hpp"

namespace lcsb {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Random streams beyond the two used by model initialization.
constexpr std::uint64_t kDataStream = 10;
constexpr std::uint64_t kSelectionStream = 11;
constexpr std::uint64_t kZeroOrderStream = 12;

Var batch_loss(Tape& tape, const Model& model, const Batch& batch, const SelectionPlan& plan) {
  Var total;
  for (std::size_t b = 0; b < batch.inputs.size(); ++b) {
    Var loss = sequence_loss(tape, model, batch.inputs[b], batch.targets[b], plan);
    total = b == 0 ? loss : ops::add(total, loss);
  }
  if (batch.inputs.size() > 1) total = ops::scale(total, 1.0f / static_cast<float>(batch.inputs.size()));
  return total;
}

}  // namespace

double RunReport::backward_share() const {
  const double total = total_forward + total_backward + total_optimizer + total_selection;
  return total > 0.0 ? total_backward / total : 0.0;
}

double RunReport::mean_backward_time() const {
  return metrics.empty() ? 0.0 : total_backward / static_cast<double>(metrics.size());
}

double evaluate(const Model& model, const Batch& windows) {
  if (windows.inputs.empty()) throw InputError("evaluation needs at least one window");
  const SelectionPlan plan = SelectionPlan::all(model.blocks.size());
  double total = 0.0;
  for (std::size_t w = 0; w < windows.inputs.size(); ++w) {
    Tape tape;
    Tape::Pause pause(tape);
    total += sequence_loss(tape, model, windows.inputs[w], windows.targets[w], plan).value().data[0];
  }
  return total / static_cast<double>(windows.inputs.size());
}

double evaluate(const Model& model, std::span<const std::int32_t> eval_tokens, std::size_t seq_len,
                std::size_t max_windows) {
  return evaluate(model, eval_windows(eval_tokens, seq_len, max_windows));
}

ZeroOrderResult zero_order_step(Model& model, const Batch& batch, float perturb_scale, float lr, Rng& rng) {
  std::vector<Tensor*> params;
  for (const auto& p : model.trainable_parameters()) params.push_back(p.tensor);
  const SelectionPlan plan = SelectionPlan::all(model.blocks.size());
  auto loss = [&] {
    Tape tape;
    Tape::Pause pause(tape);
    return static_cast<double>(batch_loss(tape, model, batch, plan).value().data[0]);
  };
  return zero_order_step(params, loss, perturb_scale, lr, rng);
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, NoInit) : config_(std::move(config)) {
  config_.validate();
  model_ = std::make_unique<Model>(init_model(config_.model, config_.seed));
  bind_parameters();
  load_data();
  optimizer_.hyper = config_.optimizer;
  importance_ = ImportanceState::ones(config_.model.n_layers);
  data_rng_ = Rng::derive(config_.seed, kDataStream);
  selection_rng_ = Rng::derive(config_.seed, kSelectionStream);
  zo_rng_ = Rng::derive(config_.seed, kZeroOrderStream);
  report_.config = config_;
}

Trainer::Trainer(TrainConfig config) : Trainer(std::move(config), NoInit{}) {
  const auto start = Clock::now();
  report_.initial_eval_loss = evaluate(*model_, eval_set_);
  eval_time_ += seconds_since(start);
  report_.evals.push_back({0, report_.initial_eval_loss});
}

void Trainer::bind_parameters() {
  named_params_ = model_->trainable_parameters();
  params_.clear();
  for (const auto& p : named_params_) params_.push_back(p.tensor);
}

void Trainer::load_data() {
  const Tokens tokens = load_corpus(config_.corpus_path, config_.model.seq_len);
  split_ = split_corpus(tokens, config_.eval_fraction);
  if (split_.train.size() < config_.model.seq_len + 1 || split_.eval.size() < config_.model.seq_len + 1) {
    throw IngestionError("corpus '" + config_.corpus_path + "' is too short for a train and eval split of seq_len " +
                         std::to_string(config_.model.seq_len));
  }
  eval_set_ = eval_windows(split_.eval, config_.model.seq_len, config_.eval_windows);
}

bool Trainer::finished() const noexcept { return report_.diverged || t_ >= config_.total_steps; }

SelectionPlan Trainer::plan_for(long t, double& t_selection) {
  const auto start = Clock::now();
  const std::size_t n = config_.model.n_layers;
  SelectionStrategy strategy = config_.strategy;
  double r = 1.0;
  switch (config_.method) {
    case Method::mezo:
    case Method::full_backprop: strategy.kind = StrategyKind::full; break;
    case Method::freeze: strategy.kind = StrategyKind::freeze; break;
    case Method::stochastic_depth:
      strategy.kind = StrategyKind::stochastic_depth;
      r = schedule_ratio(config_.schedule, t, config_.total_steps);
      break;
    case Method::lcsb: r = schedule_ratio(config_.schedule, t, config_.total_steps); break;
  }
  SelectionPlan plan = select_layers(strategy, importance_, t, config_.warmup_steps, n, r, &selection_rng_);
  t_selection += seconds_since(start);
  return plan;
}

StepMetrics Trainer::first_order_step(const Batch& batch) {
  StepMetrics m;
  m.step = t_;
  const SelectionPlan plan = plan_for(t_, m.t_selection);
  m.r_used = plan.r_used;
  m.selected_layers = plan.attached_layers();

  auto start = Clock::now();
  Tape tape;
  Var loss = batch_loss(tape, *model_, batch, plan);
  m.train_loss = loss.value().data[0];
  m.t_forward = seconds_since(start);
  if (!std::isfinite(m.train_loss) || m.train_loss > config_.divergence_threshold) return m;

  start = Clock::now();
  const GradientMap grads = tape.backward(loss);
  m.t_backward = seconds_since(start);

  if (config_.method == Method::lcsb && config_.strategy.kind == StrategyKind::importance) {
    start = Clock::now();
    importance_ = update_importance(importance_, plan, layer_lora_grad_norms(*model_, grads),
                                    config_.strategy.ema_alpha);
    m.t_selection += seconds_since(start);
  }

  start = Clock::now();
  std::vector<bool> exact(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    exact[i] = plan.is_attached(named_params_[i].layer) && grads.contains(params_[i]);
  }
  const FillMode mode = config_.ablation_mode == AblationMode::cached_fill ? FillMode::cached_fill : FillMode::zero_fill;
  stale_cache_step(optimizer_, cache_, params_, grads, exact, mode);
  m.t_optimizer = seconds_since(start);
  return m;
}

StepMetrics Trainer::zero_order_step_metrics(const Batch& batch) {
  StepMetrics m;
  m.step = t_;
  const SelectionPlan plan = plan_for(t_, m.t_selection);
  m.r_used = plan.r_used;
  m.selected_layers = plan.attached_layers();
  const auto start = Clock::now();
  try {
    const ZeroOrderResult r =
        zero_order_step(*model_, batch, config_.zero_order.perturb_scale, config_.zero_order.lr, zo_rng_);
    m.train_loss = 0.5 * (r.loss_plus + r.loss_minus);
  } catch (const DivergenceError&) {
    m.train_loss = std::numeric_limits<double>::infinity();
  }
  m.t_forward = seconds_since(start);
  return m;
}

double Trainer::run_eval() {
  const auto start = Clock::now();
  const double loss = evaluate(*model_, eval_set_);
  eval_time_ += seconds_since(start);
  report_.evals.push_back({t_, loss});
  return loss;
}

bool Trainer::step() {
  if (finished()) return false;
  ++t_;
  const auto start = Clock::now();
  const Batch batch = next_batch(split_.train, config_.model.seq_len, config_.batch_size, data_rng_);
  StepMetrics m = config_.method == Method::mezo ? zero_order_step_metrics(batch) : first_order_step(batch);
  m.t_step = seconds_since(start);
  m.cumulative_time = (report_.metrics.empty() ? 0.0 : report_.metrics.back().cumulative_time) + m.t_step;

  if (!std::isfinite(m.train_loss) || m.train_loss > config_.divergence_threshold) {
    report_.diverged = true;
    report_.divergence_step = t_;
    std::ostringstream reason;
    reason << "train loss " << m.train_loss << " at step " << t_ << " exceeds threshold "
           << config_.divergence_threshold;
    report_.divergence_reason = reason.str();
  } else if (t_ % config_.eval_every == 0 || t_ == config_.total_steps) {
    m.eval_loss = run_eval();
  }
  report_.metrics.push_back(m);
  if (on_step) on_step(report_.metrics.back());
  return !finished();
}

void Trainer::run_until(long step) {
  while (t_ < step && this->step()) {
  }
}

RunReport Trainer::finish() {
  RunReport r = report_;
  r.config = config_;
  if (r.diverged) {
    r.final_eval_loss = std::numeric_limits<double>::infinity();
  } else if (!r.metrics.empty() && r.metrics.back().eval_loss) {
    r.final_eval_loss = *r.metrics.back().eval_loss;
  } else {
    r.final_eval_loss = run_eval();
    r.evals = report_.evals;
  }
  r.total_forward = r.total_backward = r.total_optimizer = r.total_selection = 0.0;
  for (const auto& m : r.metrics) {
    r.total_forward += m.t_forward;
    r.total_backward += m.t_backward;
    r.total_optimizer += m.t_optimizer;
    r.total_selection += m.t_selection;
  }
  r.total_time_excluding_eval = r.metrics.empty() ? 0.0 : r.metrics.back().cumulative_time;
  r.total_time_including_eval = r.total_time_excluding_eval + eval_time_;
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints

void Trainer::save(const std::filesystem::path& dir) const {
  CheckpointWriter writer;
  for (const auto& nt : model_->named_tensors()) writer.add("model." + nt.name, *nt.tensor);
  for (std::size_t i = 0; i < named_params_.size(); ++i) {
    if (!optimizer_.moments.empty()) {
      writer.add("optim.m." + named_params_[i].name, optimizer_.moments[i].m);
      writer.add("optim.v." + named_params_[i].name, optimizer_.moments[i].v);
    }
    if (cache_.has(i)) writer.add("cache." + named_params_[i].name, *cache_.last[i]);
  }

  json metrics = json::array();
  for (const auto& m : report_.metrics) metrics.push_back(to_json(m));
  json evals = json::array();
  for (const auto& e : report_.evals) evals.push_back({e.step, e.loss});
  json state = {
      {"config", to_json(config_)},
      {"step", t_},
      {"rng", {{"data", data_rng_.serialize()}, {"selection", selection_rng_.serialize()}, {"zero_order", zo_rng_.serialize()}}},
      {"optimizer_t", optimizer_.t},
      {"importance", importance_.scores},
      {"cache_captured_at", cache_.captured_at},
      {"eval_time", eval_time_},
      {"initial_eval_loss", report_.initial_eval_loss},
      {"evals", evals},
      {"metrics", metrics},
  };
  writer.write(dir, std::move(state));
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint_dir) {
  const CheckpointReader reader(checkpoint_dir);
  const json& state = reader.state();
  TrainConfig config;
  try {
    config = train_config_from_json(state.at("config"));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint entry 'config': ") + e.what());
  }
  Trainer trainer(std::move(config), NoInit{});
  try {
    for (const auto& nt : trainer.model_->named_tensors()) {
      reader.read_into("model." + nt.name, const_cast<Tensor&>(*nt.tensor));
    }
    trainer.t_ = state.at("step").get<long>();
    trainer.data_rng_.restore(state.at("rng").at("data").get<std::string>());
    trainer.selection_rng_.restore(state.at("rng").at("selection").get<std::string>());
    trainer.zo_rng_.restore(state.at("rng").at("zero_order").get<std::string>());
    trainer.optimizer_.t = state.at("optimizer_t").get<long>();
    if (trainer.optimizer_.t > 0) {
      trainer.optimizer_.moments.resize(trainer.params_.size());
      for (std::size_t i = 0; i < trainer.params_.size(); ++i) {
        const std::string& name = trainer.named_params_[i].name;
        trainer.optimizer_.moments[i].m = reader.read_floats("optim.m." + name, trainer.params_[i]->numel());
        trainer.optimizer_.moments[i].v = reader.read_floats("optim.v." + name, trainer.params_[i]->numel());
      }
    }
    trainer.importance_.scores = state.at("importance").get<std::vector<double>>();
    if (trainer.importance_.scores.size() != trainer.config_.model.n_layers) {
      throw CorruptionError("checkpoint entry 'importance' does not cover every layer");
    }
    trainer.cache_.captured_at = state.at("cache_captured_at").get<std::vector<long>>();
    trainer.cache_.last.assign(trainer.cache_.captured_at.size(), std::nullopt);
    for (std::size_t i = 0; i < trainer.cache_.captured_at.size() && i < trainer.params_.size(); ++i) {
      const std::string entry = "cache." + trainer.named_params_[i].name;
      if (reader.contains(entry)) {
        Tensor g = Tensor::zeros(trainer.params_[i]->shape);
        reader.read_into(entry, g);
        trainer.cache_.last[i] = std::move(g);
      }
    }
    trainer.eval_time_ = state.at("eval_time").get<double>();
    trainer.report_.initial_eval_loss = state.at("initial_eval_loss").get<double>();
    for (const auto& e : state.at("evals")) trainer.report_.evals.push_back({e.at(0).get<long>(), e.at(1).get<double>()});
    for (const auto& m : state.at("metrics")) trainer.report_.metrics.push_back(step_metrics_from_json(m));
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint manifest state is malformed: ") + e.what());
  }
  return trainer;
}

RunReport train(const TrainConfig& config) {
  Trainer trainer(config);
  trainer.run_until(config.total_steps);
  return trainer.finish();
}

int exit_code(const RunReport& report) { return report.diverged ? 2 : 0; }

// ---------------------------------------------------------------------------
// Run outputs

json to_json(const StepMetrics& m) {
  json j = {{"step", m.step},
            {"train_loss", m.train_loss},
            {"r_used", m.r_used},
            {"selected_layers", m.selected_layers},
            {"t_forward", m.t_forward},
            {"t_backward", m.t_backward},
            {"t_optimizer", m.t_optimizer},
            {"t_selection", m.t_selection},
            {"t_step", m.t_step},
            {"cumulative_time", m.cumulative_time}};
  if (!std::isfinite(m.train_loss)) j["train_loss"] = nullptr;
  if (m.eval_loss) j["eval_loss"] = *m.eval_loss;
  return j;
}

StepMetrics step_metrics_from_json(const json& j) {
  StepMetrics m;
  m.step = j.at("step").get<long>();
  m.train_loss = j.at("train_loss").is_null() ? std::numeric_limits<double>::infinity()
                                              : j.at("train_loss").get<double>();
  m.r_used = j.at("r_used").get<double>();
  m.selected_layers = j.at("selected_layers").get<std::vector<std::size_t>>();
  m.t_forward = j.at("t_forward").get<double>();
  m.t_backward = j.at("t_backward").get<double>();
  m.t_optimizer = j.at("t_optimizer").get<double>();
  m.t_selection = j.at("t_selection").get<double>();
  m.t_step = j.at("t_step").get<double>();
  m.cumulative_time = j.at("cumulative_time").get<double>();
  if (j.contains("eval_loss")) m.eval_loss = j.at("eval_loss").get<double>();
  return m;
}

json summary_json(const RunReport& r) {
  json evals = json::array();
  for (const auto& e : r.evals) evals.push_back({{"step", e.step}, {"eval_loss", e.loss}});
  json j = {{"config", to_json(r.config)},
            {"steps_run", r.metrics.size()},
            {"initial_eval_loss", r.initial_eval_loss},
            {"final_eval_loss", r.diverged ? json(nullptr) : json(r.final_eval_loss)},
            {"diverged", r.diverged},
            {"evals", evals},
            {"time",
             {{"forward", r.total_forward},
              {"backward", r.total_backward},
              {"optimizer", r.total_optimizer},
              {"selection", r.total_selection},
              {"total_excluding_eval", r.total_time_excluding_eval},
              {"total_including_eval", r.total_time_including_eval},
              {"backward_share", r.backward_share()}}}};
  if (r.diverged) {
    j["divergence_step"] = r.divergence_step;
    j["divergence_reason"] = r.divergence_reason;
  }
  return j;
}

void write_run_outputs(const RunReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream jsonl(dir / "metrics.jsonl");
  std::ofstream csv(dir / "metrics.csv");
  if (!jsonl || !csv) throw ReportingError("cannot write metrics into '" + dir.string() + "'");
  csv << "step,train_loss,r_used,n_selected,t_forward,t_backward,t_optimizer,t_selection,t_step,cumulative_time,"
         "eval_loss\n";
  csv.precision(10);
  for (const auto& m : report.metrics) {
    jsonl << to_json(m).dump() << '\n';
    csv << m.step << ',' << m.train_loss << ',' << m.r_used << ',' << m.selected_layers.size() << ','
        << m.t_forward << ',' << m.t_backward << ',' << m.t_optimizer << ',' << m.t_selection << ',' << m.t_step
        << ',' << m.cumulative_time << ',';
    if (m.eval_loss) csv << *m.eval_loss;
    csv << '\n';
  }
  std::ofstream summary(dir / "summary.json");
  if (!summary) throw ReportingError("cannot write summary into '" + dir.string() + "'");
  summary << summary_json(report).dump(2) << '\n';
}

RunReport read_run_outputs(const std::filesystem::path& dir) {
  std::ifstream summary_in(dir / "summary.json");
  std::ifstream jsonl(dir / "metrics.jsonl");
  if (!summary_in) throw ReportingError("run '" + dir.string() + "' has no summary.json");
  if (!jsonl) throw ReportingError("run '" + dir.string() + "' has no metrics.jsonl trace");
  RunReport r;
  try {
    const json s = json::parse(summary_in);
    r.config = train_config_from_json(s.at("config"));
    r.initial_eval_loss = s.at("initial_eval_loss").get<double>();
    r.diverged = s.at("diverged").get<bool>();
    r.final_eval_loss =
        r.diverged ? std::numeric_limits<double>::infinity() : s.at("final_eval_loss").get<double>();
    if (r.diverged) {
      r.divergence_step = s.at("divergence_step").get<long>();
      r.divergence_reason = s.at("divergence_reason").get<std::string>();
    }
    for (const auto& e : s.at("evals")) r.evals.push_back({e.at("step").get<long>(), e.at("eval_loss").get<double>()});
    const json& t = s.at("time");
    r.total_time_including_eval = t.at("total_including_eval").get<double>();
    std::string line;
    while (std::getline(jsonl, line)) {
      if (!line.empty()) r.metrics.push_back(step_metrics_from_json(json::parse(line)));
    }
  } catch (const std::exception& e) {
    throw ReportingError("run '" + dir.string() + "' is malformed: " + e.what());
  }
  for (const auto& m : r.metrics) {
    r.total_forward += m.t_forward;
    r.total_backward += m.t_backward;
    r.total_optimizer += m.t_optimizer;
    r.total_selection += m.t_selection;
  }
  r.total_time_excluding_eval = r.metrics.empty() ? 0.0 : r.metrics.back().cumulative_time;
  return r;
}

}  // namespace lcsb
