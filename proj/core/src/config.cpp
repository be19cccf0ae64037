// SPDX-License-Identifier: Apache-2.0
#include "lcsb/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "lcsb/errors.hpp"

namespace lcsb {

using nlohmann::json;

std::string_view to_string(Method method) {
  switch (method) {
    case Method::lcsb: return "lcsb";
    case Method::full_backprop: return "full_backprop";
    case Method::stochastic_depth: return "stochastic_depth";
    case Method::freeze: return "freeze";
    case Method::mezo: return "mezo";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::lcsb, Method::full_backprop, Method::stochastic_depth, Method::freeze, Method::mezo}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(AblationMode mode) { return mode == AblationMode::none ? "none" : "cached_fill"; }

AblationMode parse_ablation_mode(std::string_view name) {
  if (name == "none") return AblationMode::none;
  if (name == "cached_fill") return AblationMode::cached_fill;
  throw ConfigError("unknown ablation_mode '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  model.validate();
  strategy.validate();
  schedule.validate();
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (warmup_steps >= total_steps) throw ConfigError("warmup_steps must be smaller than total_steps");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) throw ConfigError("eval_fraction must lie in (0, 1)");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (!(divergence_threshold > 0.0)) throw ConfigError("divergence_threshold must be positive");
  if (!(optimizer.lr > 0.0f)) throw ConfigError("optimizer.lr must be positive");
  if (!(zero_order.perturb_scale > 0.0f)) throw ConfigError("zero_order.perturb_scale must be positive");
  if (corpus_path.empty()) throw ConfigError("corpus_path is required");
}

namespace {

// Reads optional keys of one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(where("") + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  std::string where(const char* key) const {
    if (path_.empty()) return *key ? std::string(key) : std::string("config");
    return *key ? path_ + "." + key : path_;
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config key '" + where(key.c_str()) + "'");
    }
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Enum, class Parse>
void get_enum(ObjectReader& r, const char* key, Enum& out, Parse parse) {
  std::string name;
  bool present = false;
  if (const json* j = r.child(key)) {
    if (!j->is_string()) throw ConfigError(r.where(key) + " must be a string");
    name = j->get<std::string>();
    present = true;
  }
  if (present) out = parse(name);
}

}  // namespace

json to_json(const ModelConfig& c) {
  json targets = json::array();
  for (auto site : kAllSites) {
    if (c.lora_targets.contains(site)) targets.push_back(std::string(to_string(site)));
  }
  return {{"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},
          {"seq_len", c.seq_len},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"lora_targets", targets},
          {"quantize_base", c.quantize_base},
          {"quant_group_size", c.quant_group_size},
          {"init_std", c.init_std},
          {"norm_eps", c.norm_eps}};
}

namespace {

ModelConfig read_model(const json& doc, const std::string& path) {
  ModelConfig c;
  ObjectReader r(doc, path);
  r.get("n_layers", c.n_layers);
  r.get("d_model", c.d_model);
  r.get("n_heads", c.n_heads);
  r.get("d_ff", c.d_ff);
  r.get("vocab_size", c.vocab_size);
  r.get("seq_len", c.seq_len);
  r.get("lora_rank", c.lora_rank);
  r.get("lora_alpha", c.lora_alpha);
  std::vector<std::string> targets;
  bool has_targets = false;
  if (r.child("lora_targets")) {
    r.get("lora_targets", targets);
    has_targets = true;
  }
  if (has_targets) {
    c.lora_targets.clear();
    for (const auto& t : targets) c.lora_targets.insert(parse_projection_site(t));
  }
  r.get("quantize_base", c.quantize_base);
  r.get("quant_group_size", c.quant_group_size);
  r.get("init_std", c.init_std);
  r.get("norm_eps", c.norm_eps);
  r.finish();
  return c;
}

}  // namespace

ModelConfig model_config_from_json(const json& doc) { return read_model(doc, "model"); }

json to_json(const TrainConfig& c) {
  json boundaries = json::array();
  for (const auto& [step, r] : c.schedule.boundaries) boundaries.push_back({step, r});
  return {
      {"model", to_json(c.model)},
      {"strategy",
       {{"kind", to_string(c.strategy.kind)},
        {"freeze_fraction", c.strategy.freeze_fraction},
        {"ema_alpha", c.strategy.ema_alpha},
        {"temperature", c.strategy.temperature}}},
      {"schedule",
       {{"kind", to_string(c.schedule.kind)},
        {"r_start", c.schedule.r_start},
        {"r_end", c.schedule.r_end},
        {"boundaries", boundaries}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay},
        {"bias_correction", c.optimizer.bias_correction}}},
      {"zero_order", {{"lr", c.zero_order.lr}, {"perturb_scale", c.zero_order.perturb_scale}}},
      {"warmup_steps", c.warmup_steps},
      {"total_steps", c.total_steps},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"corpus_path", c.corpus_path},
      {"eval_fraction", c.eval_fraction},
      {"eval_every", c.eval_every},
      {"eval_windows", c.eval_windows},
      {"divergence_threshold", c.divergence_threshold},
      {"ablation_mode", to_string(c.ablation_mode)},
      {"method", to_string(c.method)},
  };
}

TrainConfig train_config_from_json(const json& doc) {
  TrainConfig c;
  ObjectReader r(doc, "");
  if (const json* m = r.child("model")) c.model = read_model(*m, "model");
  if (const json* s = r.child("strategy")) {
    ObjectReader sr(*s, "strategy");
    get_enum(sr, "kind", c.strategy.kind, parse_strategy_kind);
    sr.get("freeze_fraction", c.strategy.freeze_fraction);
    sr.get("ema_alpha", c.strategy.ema_alpha);
    sr.get("temperature", c.strategy.temperature);
    sr.finish();
  }
  if (const json* s = r.child("schedule")) {
    ObjectReader sr(*s, "schedule");
    get_enum(sr, "kind", c.schedule.kind, parse_schedule_kind);
    sr.get("r_start", c.schedule.r_start);
    sr.get("r_end", c.schedule.r_end);
    sr.get("boundaries", c.schedule.boundaries);
    sr.finish();
  }
  if (const json* o = r.child("optimizer")) {
    ObjectReader orr(*o, "optimizer");
    orr.get("lr", c.optimizer.lr);
    orr.get("beta1", c.optimizer.beta1);
    orr.get("beta2", c.optimizer.beta2);
    orr.get("eps", c.optimizer.eps);
    orr.get("weight_decay", c.optimizer.weight_decay);
    orr.get("bias_correction", c.optimizer.bias_correction);
    orr.finish();
  }
  if (const json* z = r.child("zero_order")) {
    ObjectReader zr(*z, "zero_order");
    zr.get("lr", c.zero_order.lr);
    zr.get("perturb_scale", c.zero_order.perturb_scale);
    zr.finish();
  }
  r.get("warmup_steps", c.warmup_steps);
  r.get("total_steps", c.total_steps);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("corpus_path", c.corpus_path);
  r.get("eval_fraction", c.eval_fraction);
  r.get("eval_every", c.eval_every);
  r.get("eval_windows", c.eval_windows);
  r.get("divergence_threshold", c.divergence_threshold);
  get_enum(r, "ablation_mode", c.ablation_mode, parse_ablation_mode);
  get_enum(r, "method", c.method, parse_method);
  r.finish();
  return c;
}

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must look like key.path=value");
  }
  const std::string path(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override path '" + path + "' walks into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

TrainConfig load_train_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  TrainConfig config = train_config_from_json(doc);
  if (const char* env = std::getenv("LCSB_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      config.seed = std::stoull(env, &used);
      if (used != std::string_view(env).size()) throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("LCSB_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  // A relative corpus path is taken relative to the config file.
  if (!config.corpus_path.empty() && std::filesystem::path(config.corpus_path).is_relative()) {
    config.corpus_path = (path.parent_path() / config.corpus_path).lexically_normal().string();
  }
  config.validate();
  return config;
}

}  // namespace lcsb
