// SPDX-License-Identifier: Apache-2.0
// lcsb: train, evaluate and compare selective-backpropagation runs.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "lcsb/bench.hpp"
#include "lcsb/checkpoint.hpp"
#include "lcsb/corpus.hpp"
#include "lcsb/errors.hpp"
#include "lcsb/gradcheck.hpp"
#include "lcsb/train.hpp"

namespace fs = std::filesystem;

namespace {

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "runs/latest";
  std::string resume;
  long save_at = 0;
  std::string checkpoint;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  std::unique_ptr<lcsb::Trainer> trainer;
  if (!a.resume.empty()) {
    trainer = std::make_unique<lcsb::Trainer>(lcsb::Trainer::resume(a.resume));
  } else {
    trainer = std::make_unique<lcsb::Trainer>(lcsb::load_train_config(a.config, a.overrides));
  }
  const lcsb::TrainConfig& config = trainer->config();
  if (!a.quiet) {
    trainer->on_step = [](const lcsb::StepMetrics& m) {
      if (!m.eval_loss) return;
      std::printf("step %5ld  train %.4f  eval %.4f  r %.2f  %.1fs\n", m.step, m.train_loss, *m.eval_loss, m.r_used,
                  m.cumulative_time);
      std::fflush(stdout);
    };
  }
  if (a.save_at > 0) {
    trainer->run_until(a.save_at);
    const fs::path dir = a.checkpoint.empty() ? fs::path(a.out) / "checkpoint" : fs::path(a.checkpoint);
    trainer->save(dir);
    if (!a.quiet) std::printf("checkpoint at step %ld written to %s\n", trainer->current_step(), dir.c_str());
  }
  trainer->run_until(config.total_steps);
  if (a.save_at <= 0 && !a.checkpoint.empty()) trainer->save(a.checkpoint);
  const lcsb::RunReport report = trainer->finish();
  lcsb::write_run_outputs(report, a.out);
  if (report.diverged) {
    std::printf("diverged: %s\n", report.divergence_reason.c_str());
  } else {
    std::printf("final eval loss %.4f (initial %.4f), %.1fs training, %.1fs with eval\n", report.final_eval_loss,
                report.initial_eval_loss, report.total_time_excluding_eval, report.total_time_including_eval);
  }
  return lcsb::exit_code(report);
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus, std::size_t windows) {
  const lcsb::Trainer trainer = lcsb::Trainer::resume(checkpoint);
  const std::size_t seq_len = trainer.config().model.seq_len;
  const lcsb::Tokens tokens = lcsb::load_corpus(corpus, seq_len);
  const double loss = lcsb::evaluate(trainer.model(), tokens, seq_len, windows);
  std::printf("eval loss %.6f over %s (step %ld)\n", loss, corpus.c_str(), trainer.current_step());
  return 0;
}

int cmd_gradcheck(int seeds, double tolerance) {
  bool ok = true;
  for (const auto& r : lcsb::run_primitive_gradcheck(seeds, tolerance)) {
    std::printf("%-20s max rel err %.3e  %s\n", r.name.c_str(), r.max_relative_error, r.passed ? "ok" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

int cmd_bench(const std::string& suite_path, const std::string& out, bool parallel, bool exclude_eval, bool plots) {
  lcsb::SuiteConfig suite = lcsb::load_suite_config(suite_path);
  if (parallel) suite.parallel = true;
  if (exclude_eval) suite.exclude_eval = true;
  const lcsb::ComparisonTable table = lcsb::run_suite(suite, fs::path(out));
  std::cout << lcsb::render_table(table);
  if (plots) {
    for (auto kind : {lcsb::PlotKind::loss_curve, lcsb::PlotKind::ratio_sweep, lcsb::PlotKind::strategy_bar}) {
      lcsb::emit_plot_data(table, kind, out);
    }
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& reference) {
  std::vector<lcsb::RunOutcome> outcomes;
  std::vector<std::string> order;
  for (const auto& d : dirs) {
    const lcsb::RunReport report = lcsb::read_run_outputs(d);
    const std::string name = fs::path(d).lexically_normal().filename().string();
    outcomes.push_back(lcsb::outcome_from_report(name.empty() ? d : name, report));
    outcomes.back().run_dir = d;
    order.push_back(outcomes.back().variant);
  }
  const std::string ref = reference.empty() ? order.front() : reference;
  std::cout << lcsb::render_table(lcsb::aggregate_runs(outcomes, order, ref, true));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layer-cyclic selective backpropagation laboratory"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train one configuration");
  train_cmd->add_option("config", train.config, "Run config (JSON)");
  train_cmd->add_option("--set", train.overrides, "Override a field, e.g. schedule.kind=cosine");
  train_cmd->add_option("--out", train.out, "Directory for metrics and summary");
  train_cmd->add_option("--resume", train.resume, "Resume from a checkpoint directory");
  train_cmd->add_option("--save-at", train.save_at, "Write a checkpoint after this step");
  train_cmd->add_option("--checkpoint", train.checkpoint, "Checkpoint directory");
  train_cmd->add_flag("--quiet", train.quiet, "Only print the final line");

  std::string eval_ckpt, eval_corpus;
  std::size_t eval_windows = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  eval_cmd->add_option("checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("corpus", eval_corpus)->required();
  eval_cmd->add_option("--windows", eval_windows, "Cap on eval windows (0 = all)");

  int gc_seeds = 20;
  double gc_tol = 1e-3;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every primitive");
  gc_cmd->add_option("--seeds", gc_seeds);
  gc_cmd->add_option("--tolerance", gc_tol);

  std::string suite_path, bench_out = "runs/bench";
  bool parallel = false, exclude_eval = false, exclusive = false, plots = false;
  auto* bench_cmd = app.add_subcommand("bench", "Run a comparison suite");
  bench_cmd->add_option("suite", suite_path)->required();
  bench_cmd->add_option("--out", bench_out);
  auto* parallel_flag = bench_cmd->add_flag("--parallel", parallel, "Run variants concurrently (losses only)");
  auto* exclusive_flag = bench_cmd->add_flag("--exclusive", exclusive, "Serialize runs for timing (default)");
  parallel_flag->excludes(exclusive_flag);
  bench_cmd->add_flag("--exclude-eval", exclude_eval, "Speedup from wall time without eval");
  bench_cmd->add_flag("--plots", plots, "Write loss_curve, ratio_sweep and strategy_bar CSVs");

  std::vector<std::string> report_dirs;
  std::string report_ref;
  auto* report_cmd = app.add_subcommand("report", "Compare finished run directories");
  report_cmd->add_option("runs", report_dirs)->required();
  report_cmd->add_option("--reference", report_ref, "Run directory name used as reference");

  std::string corpus_out;
  std::size_t corpus_bytes = 256 * 1024;
  std::uint64_t corpus_seed = 7;
  auto* corpus_cmd = app.add_subcommand("corpus", "Write a synthetic byte-level corpus");
  corpus_cmd->add_option("out", corpus_out)->required();
  corpus_cmd->add_option("--bytes", corpus_bytes);
  corpus_cmd->add_option("--seed", corpus_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      if (train.config.empty() && train.resume.empty()) throw lcsb::ConfigError("train needs a config or --resume");
      return cmd_train(train);
    }
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_corpus, eval_windows);
    if (*gc_cmd) return cmd_gradcheck(gc_seeds, gc_tol);
    if (*bench_cmd) return cmd_bench(suite_path, bench_out, parallel && !exclusive, exclude_eval, plots);
    if (*report_cmd) return cmd_report(report_dirs, report_ref);
    if (*corpus_cmd) {
      std::ofstream out(corpus_out, std::ios::binary);
      if (!out) throw lcsb::IngestionError("cannot write '" + corpus_out + "'");
      out << lcsb::generate_corpus(corpus_bytes, corpus_seed);
      return 0;
    }
  } catch (const lcsb::Error& e) {
    std::fprintf(stderr, "lcsb: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "lcsb: unexpected error: %s\n", e.what());
    return 1;
  }
  return 1;
}
