// SPDX-License-Identifier: Apache-2.0
#include "lcsb/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "lcsb/errors.hpp"

namespace lcsb {

using nlohmann::json;

void SuiteConfig::validate() const {
  if (variants.empty()) throw SuiteError("suite has no variants");
  if (repeats < 1) throw SuiteError("repeats must be >= 1");
  bool found = false;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    if (variants[i].name.empty()) throw SuiteError("variant " + std::to_string(i) + " has no name");
    for (std::size_t j = 0; j < i; ++j) {
      if (variants[j].name == variants[i].name) throw SuiteError("duplicate variant '" + variants[i].name + "'");
    }
    if (!variants[i].overrides.is_object()) throw SuiteError("overrides of '" + variants[i].name + "' must be an object");
    found = found || variants[i].name == reference_variant;
  }
  if (!found) throw SuiteError("reference variant '" + reference_variant + "' is not among the variants");
}

TrainConfig SuiteConfig::variant_config(const Variant& variant, int repeat) const {
  json doc = base;
  for (const auto& [path, value] : variant.overrides.items()) apply_override(doc, path + "=" + value.dump());
  TrainConfig config = train_config_from_json(doc);
  config.seed += static_cast<std::uint64_t>(repeat);
  config.validate();
  return config;
}

SuiteConfig suite_config_from_json(const json& doc) {
  SuiteConfig s;
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key != "base" && key != "variants" && key != "repeats" && key != "reference" && key != "exclude_eval" &&
          key != "parallel") {
        throw SuiteError("unknown suite key '" + key + "'");
      }
    }
    s.base = doc.value("base", json::object());
    if (!s.base.is_object()) throw SuiteError("suite base must be a run config object");
    s.repeats = doc.value("repeats", 3);
    s.reference_variant = doc.at("reference").get<std::string>();
    s.exclude_eval = doc.value("exclude_eval", false);
    s.parallel = doc.value("parallel", false);
    for (const auto& v : doc.at("variants")) {
      s.variants.push_back({v.at("name").get<std::string>(), v.value("set", json::object())});
    }
  } catch (const json::exception& e) {
    throw SuiteError(std::string("malformed suite config: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

json read_json_file(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw SuiteError(std::string("cannot open ") + what + " '" + path.string() + "'");
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw SuiteError(std::string(what) + " '" + path.string() + "' is not valid JSON");
  return doc;
}

// A relative corpus_path in a config read from `file` is taken relative to it.
void resolve_corpus(json& config, const std::filesystem::path& file) {
  if (!config.is_object() || !config.contains("corpus_path") || !config["corpus_path"].is_string()) return;
  const std::filesystem::path corpus = config["corpus_path"].get<std::string>();
  if (corpus.is_relative()) config["corpus_path"] = (file.parent_path() / corpus).lexically_normal().string();
}

}  // namespace

SuiteConfig load_suite_config(const std::filesystem::path& path) {
  json doc = read_json_file(path, "suite config");
  if (doc.is_object() && doc.contains("base") && doc["base"].is_string()) {
    // base may name a run config file instead of inlining one.
    const std::filesystem::path base_path = path.parent_path() / doc["base"].get<std::string>();
    json base = read_json_file(base_path, "base config");
    resolve_corpus(base, base_path);
    doc["base"] = std::move(base);
  } else if (doc.is_object() && doc.contains("base")) {
    resolve_corpus(doc["base"], path);
  }
  return suite_config_from_json(doc);
}

RunOutcome outcome_from_report(const std::string& variant, const RunReport& report) {
  RunOutcome o;
  o.variant = variant;
  o.seed = report.config.seed;
  o.diverged = report.diverged;
  o.final_eval_loss = report.final_eval_loss;
  o.time_excluding_eval = report.total_time_excluding_eval;
  o.time_including_eval = report.total_time_including_eval;
  o.backward_share = report.backward_share();
  o.mean_backward_time = report.mean_backward_time();
  double sum = 0.0;
  long count = 0;
  for (const auto& m : report.metrics) {
    if (m.step > report.config.warmup_steps) {
      sum += m.r_used;
      ++count;
    }
  }
  o.mean_ratio = count ? sum / static_cast<double>(count) : 1.0;
  return o;
}

namespace {

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  double sum = 0.0;
  for (double x : xs) sum += x;
  r.mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  r.std = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
  return r;
}

}  // namespace

const VariantRow& ComparisonTable::row(std::string_view name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw SuiteError("no variant '" + std::string(name) + "' in table");
}

ComparisonTable aggregate_runs(const std::vector<RunOutcome>& runs, const std::vector<std::string>& variant_order,
                               const std::string& reference, bool exclude_eval) {
  ComparisonTable table;
  table.reference = reference;
  table.exclude_eval = exclude_eval;
  table.runs = runs;

  for (const auto& name : variant_order) {
    VariantRow row;
    row.name = name;
    std::vector<double> loss, time, time_incl, share, bwd, ratio;
    for (const auto& r : runs) {
      if (r.variant != name) continue;
      ++row.runs;
      if (r.diverged) {
        ++row.diverged;
        continue;
      }
      loss.push_back(r.final_eval_loss);
      time.push_back(r.time_excluding_eval);
      time_incl.push_back(r.time_including_eval);
      share.push_back(r.backward_share);
      bwd.push_back(r.mean_backward_time);
      ratio.push_back(r.mean_ratio);
    }
    if (name == reference && row.diverged > 0) {
      throw SuiteError("reference variant '" + reference + "' diverged in " + std::to_string(row.diverged) +
                       " run(s); speedups are undefined");
    }
    const MeanStd l = mean_std(loss), t = mean_std(time);
    row.loss_mean = l.mean;
    row.loss_std = l.std;
    row.time_mean = t.mean;
    row.time_std = t.std;
    row.time_including_eval_mean = mean_std(time_incl).mean;
    row.backward_share = mean_std(share).mean;
    row.mean_backward_time = mean_std(bwd).mean;
    row.ratio = mean_std(ratio).mean;
    table.rows.push_back(row);
  }

  const auto ref_it = std::find_if(table.rows.begin(), table.rows.end(), [&](const VariantRow& r) { return r.name == reference; });
  if (ref_it == table.rows.end() || ref_it->runs == 0) throw SuiteError("reference variant '" + reference + "' has no runs");
  const VariantRow ref = *ref_it;
  for (auto& row : table.rows) {
    if (row.name == reference) {
      row.speedup = 1.0;
      row.speedup_including_eval = 1.0;
      row.speedup_excluding_eval = 1.0;
      row.loss_gap = 0.0;
      continue;
    }
    row.speedup_including_eval = ref.time_including_eval_mean / row.time_including_eval_mean;
    row.speedup_excluding_eval = ref.time_mean / row.time_mean;
    row.speedup = exclude_eval ? row.speedup_excluding_eval : row.speedup_including_eval;
    row.loss_gap = (row.loss_mean - ref.loss_mean) / ref.loss_mean;
  }

  int note = 0;
  for (const auto& row : table.rows) {
    if (row.diverged == 0) continue;
    std::ostringstream s;
    s << "[" << ++note << "] " << row.name << ": " << row.diverged << " of " << row.runs
      << " runs diverged (loss = inf, excluded from means)";
    table.footnotes.push_back(s.str());
  }
  return table;
}

ComparisonTable run_suite(const SuiteConfig& suite, const std::optional<std::filesystem::path>& out_dir) {
  suite.validate();
  struct Job {
    const Variant* variant;
    TrainConfig config;
    std::filesystem::path dir;
  };
  std::vector<Job> jobs;
  for (int rep = 0; rep < suite.repeats; ++rep) {
    for (const auto& v : suite.variants) {
      TrainConfig config = suite.variant_config(v, rep);
      std::filesystem::path dir;
      if (out_dir) dir = *out_dir / "runs" / v.name / ("seed-" + std::to_string(config.seed));
      jobs.push_back({&v, std::move(config), dir});
    }
  }

  auto run_job = [](const Job& job) {
    const RunReport report = train(job.config);
    RunOutcome outcome = outcome_from_report(job.variant->name, report);
    if (!job.dir.empty()) {
      write_run_outputs(report, job.dir);
      outcome.run_dir = job.dir;
    }
    return outcome;
  };

  std::vector<RunOutcome> outcomes;
  if (suite.parallel) {
    const std::size_t width = std::max(1u, std::thread::hardware_concurrency());
    for (std::size_t first = 0; first < jobs.size(); first += width) {
      std::vector<std::future<RunOutcome>> batch;
      for (std::size_t i = first; i < std::min(jobs.size(), first + width); ++i) {
        batch.push_back(std::async(std::launch::async, run_job, std::cref(jobs[i])));
      }
      for (auto& f : batch) outcomes.push_back(f.get());
    }
  } else {
    for (const auto& job : jobs) outcomes.push_back(run_job(job));
  }

  std::vector<std::string> order;
  for (const auto& v : suite.variants) order.push_back(v.name);
  ComparisonTable table = aggregate_runs(outcomes, order, suite.reference_variant, suite.exclude_eval);
  if (out_dir) write_table(table, *out_dir);
  return table;
}

namespace {

json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

}  // namespace

json to_json(const ComparisonTable& table) {
  json rows = json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"name", r.name},
                    {"runs", r.runs},
                    {"diverged", r.diverged},
                    {"loss_mean", number_or_null(r.loss_mean)},
                    {"loss_std", number_or_null(r.loss_std)},
                    {"time_mean", number_or_null(r.time_mean)},
                    {"time_std", number_or_null(r.time_std)},
                    {"time_including_eval_mean", number_or_null(r.time_including_eval_mean)},
                    {"backward_share", number_or_null(r.backward_share)},
                    {"mean_backward_time", number_or_null(r.mean_backward_time)},
                    {"ratio", number_or_null(r.ratio)},
                    {"speedup", number_or_null(r.speedup)},
                    {"speedup_including_eval", number_or_null(r.speedup_including_eval)},
                    {"speedup_excluding_eval", number_or_null(r.speedup_excluding_eval)},
                    {"loss_gap", number_or_null(r.loss_gap)}});
  }
  json runs = json::array();
  for (const auto& r : table.runs) {
    runs.push_back({{"variant", r.variant},
                    {"seed", r.seed},
                    {"diverged", r.diverged},
                    {"final_eval_loss", r.diverged ? json("inf") : number_or_null(r.final_eval_loss)},
                    {"time_excluding_eval", r.time_excluding_eval},
                    {"time_including_eval", r.time_including_eval},
                    {"backward_share", r.backward_share},
                    {"mean_backward_time", r.mean_backward_time},
                    {"mean_ratio", r.mean_ratio},
                    {"run_dir", r.run_dir.string()}});
  }
  return {{"reference", table.reference},
          {"speedup_basis", table.exclude_eval ? "excluding_eval" : "including_eval"},
          {"rows", rows},
          {"runs", runs},
          {"footnotes", table.footnotes}};
}

std::string render_table(const ComparisonTable& table) {
  std::vector<std::vector<std::string>> cells = {
      {"variant", "runs", "eval loss", "time (s)", "speedup", "loss gap", "bwd share"}};
  auto fixed = [](double x, int digits) {
    if (!std::isfinite(x)) return std::string("n/a");
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << x;
    return s.str();
  };
  for (const auto& r : table.rows) {
    std::string runs = std::to_string(r.runs);
    if (r.diverged) runs += " (" + std::to_string(r.diverged) + " div)";
    const double time = table.exclude_eval ? r.time_mean : r.time_including_eval_mean;
    cells.push_back({r.name, runs, fixed(r.loss_mean, 4) + " ± " + fixed(r.loss_std, 4), fixed(time, 2),
                     fixed(r.speedup, 2) + "x", (r.loss_gap >= 0 ? "+" : "") + fixed(100.0 * r.loss_gap, 2) + "%",
                     fixed(100.0 * r.backward_share, 1) + "%"});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  // Display width in columns: UTF-8 continuation bytes take none.
  auto display = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char ch) { return (ch & 0xC0) != 0x80; }));
  };
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], display(row[c]));
  }
  std::ostringstream out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      const std::string& s = cells[i][c];
      const std::string pad(width[c] - display(s), ' ');
      out << (c == 0 ? s + pad : "  " + pad + s);
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (std::size_t w : width) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  out << "reference: " << table.reference << "; speedup from wall time "
      << (table.exclude_eval ? "excluding" : "including") << " eval\n";
  for (const auto& f : table.footnotes) out << f << '\n';
  return out.str();
}

void write_table(const ComparisonTable& table, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream j(dir / "table.json");
  std::ofstream t(dir / "table.txt");
  if (!j || !t) throw ReportingError("cannot write table into '" + dir.string() + "'");
  j << to_json(table).dump(2) << '\n';
  t << render_table(table);
}

std::string_view to_string(PlotKind kind) {
  switch (kind) {
    case PlotKind::loss_curve: return "loss_curve";
    case PlotKind::ratio_sweep: return "ratio_sweep";
    case PlotKind::strategy_bar: return "strategy_bar";
  }
  return "unknown";
}

PlotKind parse_plot_kind(std::string_view name) {
  for (auto k : {PlotKind::loss_curve, PlotKind::ratio_sweep, PlotKind::strategy_bar}) {
    if (to_string(k) == name) return k;
  }
  throw ReportingError("unknown plot kind '" + std::string(name) + "'");
}

std::filesystem::path emit_plot_data(const ComparisonTable& table, PlotKind kind, const std::filesystem::path& dir) {
  if (table.rows.empty() || table.runs.empty()) throw ReportingError("cannot emit plot data for an empty suite");
  std::filesystem::create_directories(dir);
  const std::filesystem::path path = dir / (std::string(to_string(kind)) + ".csv");
  std::ostringstream csv;
  csv << std::setprecision(10);

  switch (kind) {
    case PlotKind::loss_curve: {
      // variant -> step -> (sum, count) over non-divergent runs.
      std::map<std::string, std::map<long, std::pair<double, int>>> curves;
      long max_step = 0;
      for (const auto& run : table.runs) {
        if (run.run_dir.empty() || !std::filesystem::exists(run.run_dir / "metrics.jsonl")) {
          throw ReportingError("run " + run.variant + "/seed-" + std::to_string(run.seed) + " has no metrics.jsonl trace");
        }
        if (run.diverged) continue;
        const RunReport report = read_run_outputs(run.run_dir);
        for (const auto& m : report.metrics) {
          auto& cell = curves[run.variant][m.step];
          cell.first += m.train_loss;
          cell.second += 1;
          max_step = std::max(max_step, m.step);
        }
      }
      csv << "step";
      for (const auto& row : table.rows) csv << ',' << row.name;
      csv << '\n';
      for (long s = 1; s <= max_step; ++s) {
        csv << s;
        for (const auto& row : table.rows) {
          csv << ',';
          const auto v = curves.find(row.name);
          if (v == curves.end()) continue;
          const auto c = v->second.find(s);
          if (c != v->second.end()) csv << c->second.first / c->second.second;
        }
        csv << '\n';
      }
      break;
    }
    case PlotKind::ratio_sweep: {
      csv << "r,loss_mean,loss_std,speedup,variant\n";
      std::vector<VariantRow> rows = table.rows;
      std::stable_sort(rows.begin(), rows.end(), [](const VariantRow& a, const VariantRow& b) { return a.ratio < b.ratio; });
      for (const auto& r : rows) {
        csv << r.ratio << ',' << r.loss_mean << ',' << r.loss_std << ',' << r.speedup << ',' << r.name << '\n';
      }
      break;
    }
    case PlotKind::strategy_bar: {
      csv << "variant,loss_mean,loss_std,time_mean,speedup,loss_gap,diverged\n";
      for (const auto& r : table.rows) {
        csv << r.name << ',' << r.loss_mean << ',' << r.loss_std << ',' << r.time_mean << ',' << r.speedup << ','
            << r.loss_gap << ',' << r.diverged << '\n';
      }
      break;
    }
  }
  std::ofstream out(path);
  if (!out) throw ReportingError("cannot write '" + path.string() + "'");
  out << csv.str();
  return path;
}

}  // namespace lcsb
