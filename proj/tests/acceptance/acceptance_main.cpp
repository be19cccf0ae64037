// SPDX-License-Identifier: Apache-2.0
// Acceptance checks on the toy model. Prints one PASS/FAIL line per
// criterion; `--only N` runs a single criterion.

#include <CLI11.hpp>

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "lcsb/bench.hpp"
#include "lcsb/config.hpp"
#include "lcsb/corpus.hpp"
#include "lcsb/model.hpp"
#include "lcsb/optim.hpp"
#include "lcsb/random.hpp"
#include "lcsb/selection.hpp"
#include "lcsb/tape.hpp"
#include "lcsb/train.hpp"

namespace fs = std::filesystem;
using namespace lcsb;

namespace {

// Pinned tolerances.
constexpr int kForwardPlans = 20;
constexpr double kGradOracleTolerance = 1e-3;
constexpr int kGradOracleSeeds = 10;
constexpr double kNonzeroFraction = 0.99;
constexpr int kMomentStates = 100;
constexpr std::uint32_t kMaxUlp = 1;
constexpr double kGapHalf = 0.05;
constexpr double kGapThird = 0.08;
constexpr double kBackwardReduction = 0.15;
constexpr double kSigmaBound = 5.0;
constexpr long kSelectionSteps = 2000;
const std::vector<std::uint64_t> kSeeds{42, 43, 44};

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("lcsb_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const fs::path& corpus_path() {
  static const fs::path path = [] {
    const fs::path p = work_dir() / "corpus.txt";
    std::ofstream(p, std::ios::binary) << generate_corpus(256 * 1024, 7);
    return p;
  }();
  return path;
}

TrainConfig toy_config() {
  TrainConfig c = load_train_config(LCSB_TOY_CONFIG, {});
  c.corpus_path = corpus_path().string();
  return c;
}

TrainConfig with_ratio(TrainConfig c, double r) {
  c.method = Method::lcsb;
  c.schedule.kind = ScheduleKind::fixed;
  c.schedule.r_start = c.schedule.r_end = r;
  return c;
}

RunReport run(const TrainConfig& c) {
  Trainer trainer(c);
  trainer.run_until(c.total_steps);
  return trainer.finish();
}

std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = static_cast<std::int32_t>(rng.uniform_index(vocab));
  return out;
}

void randomize_lora_b(Model& model, std::uint64_t seed, double std) {
  Rng rng(seed);
  for (auto& p : model.trainable_parameters()) {
    if (p.name.ends_with("lora_b")) {
      for (float& v : p.tensor->data) v = static_cast<float>(std * rng.normal());
    }
  }
}

// --- double-precision reference forward --------------------------------

using Mat = std::vector<double>;  // row-major

struct RefProjection {
  Mat w, a, b;
  std::size_t d_out = 0, d_in = 0, rank = 0;
  double scaling = 0.0;
};

struct RefModel {
  ModelConfig c;
  Mat embedding, positions, final_norm;
  struct Block {
    Mat attn_norm, mlp_norm;
    std::vector<RefProjection> proj;
  };
  std::vector<Block> blocks;
};

Mat to_double(const Tensor& t) { return Mat(t.data.begin(), t.data.end()); }

RefModel reference_of(const Model& m) {
  RefModel r;
  r.c = m.config();
  r.embedding = to_double(m.embedding);
  r.positions = to_double(m.positions);
  r.final_norm = to_double(m.final_norm);
  for (const auto& blk : m.blocks) {
    RefModel::Block b;
    b.attn_norm = to_double(blk.attn_norm);
    b.mlp_norm = to_double(blk.mlp_norm);
    for (ProjectionSite s : kAllSites) {
      const Projection& p = blk.at(s);
      RefProjection rp;
      rp.w = to_double(p.weight);
      rp.d_out = p.weight.shape[0];
      rp.d_in = p.weight.shape[1];
      if (p.lora) {
        rp.a = to_double(p.lora->a);
        rp.b = to_double(p.lora->b);
        rp.rank = p.lora->rank;
        rp.scaling = p.lora->scaling();
      }
      b.proj.push_back(std::move(rp));
    }
    r.blocks.push_back(std::move(b));
  }
  return r;
}

Mat rms(const Mat& x, std::size_t rows, std::size_t cols, const Mat& gain, double eps) {
  Mat y(x.size());
  for (std::size_t i = 0; i < rows; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ss += x[i * cols + j] * x[i * cols + j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(cols) + eps);
    for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] = x[i * cols + j] * inv * gain[j];
  }
  return y;
}

// y = x W^T + s (x A^T) B^T
Mat apply(const RefProjection& p, const Mat& x, std::size_t rows) {
  Mat y(rows * p.d_out, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = &x[i * p.d_in];
    std::vector<double> low(p.rank, 0.0);
    for (std::size_t r = 0; r < p.rank; ++r) {
      for (std::size_t k = 0; k < p.d_in; ++k) low[r] += xi[k] * p.a[r * p.d_in + k];
    }
    for (std::size_t o = 0; o < p.d_out; ++o) {
      double acc = 0.0;
      for (std::size_t k = 0; k < p.d_in; ++k) acc += xi[k] * p.w[o * p.d_in + k];
      double lora = 0.0;
      for (std::size_t r = 0; r < p.rank; ++r) lora += low[r] * p.b[o * p.rank + r];
      y[i * p.d_out + o] = acc + p.scaling * lora;
    }
  }
  return y;
}

double reference_loss(const RefModel& m, const std::vector<std::int32_t>& in, const std::vector<std::int32_t>& tgt) {
  const ModelConfig& c = m.c;
  const std::size_t n = in.size(), d = c.d_model, hd = d / c.n_heads;
  Mat h(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) h[i * d + j] = m.embedding[in[i] * d + j] + m.positions[i * d + j];
  }
  auto proj = [&](const RefModel::Block& b, ProjectionSite s) -> const RefProjection& {
    return b.proj[static_cast<std::size_t>(s)];
  };
  for (const auto& b : m.blocks) {
    const Mat x = rms(h, n, d, b.attn_norm, c.norm_eps);
    const Mat q = apply(proj(b, ProjectionSite::q), x, n);
    const Mat k = apply(proj(b, ProjectionSite::k), x, n);
    const Mat v = apply(proj(b, ProjectionSite::v), x, n);
    Mat merged(n * d, 0.0);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      const std::size_t off = head * hd;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < hd; ++e) dot += q[i * d + off + e] * k[j * d + off + e];
          s[j] = dot * inv_sqrt;
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (double& sj : s) z += (sj = std::exp(sj - mx));
        for (std::size_t j = 0; j <= i; ++j) {
          for (std::size_t e = 0; e < hd; ++e) merged[i * d + off + e] += s[j] / z * v[j * d + off + e];
        }
      }
    }
    const Mat attn = apply(proj(b, ProjectionSite::o), merged, n);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += attn[i];
    const Mat x2 = rms(h, n, d, b.mlp_norm, c.norm_eps);
    const Mat gate = apply(proj(b, ProjectionSite::gate), x2, n);
    const Mat up = apply(proj(b, ProjectionSite::up), x2, n);
    Mat act(gate.size());
    for (std::size_t i = 0; i < act.size(); ++i) act[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
    const Mat down = apply(proj(b, ProjectionSite::down), act, n);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += down[i];
  }
  const Mat hf = rms(h, n, d, m.final_norm, c.norm_eps);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(c.vocab_size, 0.0);
    double mx = -1e300;
    for (std::size_t t = 0; t < c.vocab_size; ++t) {
      for (std::size_t j = 0; j < d; ++j) logits[t] += hf[i * d + j] * m.embedding[t * d + j];
      mx = std::max(mx, logits[t]);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total += mx + std::log(z) - logits[tgt[i]];
  }
  return total / static_cast<double>(n);
}

// --- criteria -----------------------------------------------------------

Verdict forward_identity() {
  const TrainConfig c = toy_config();
  Model model = init_model(c.model, 42);
  randomize_lora_b(model, 5, 0.05);
  Rng rng(2024);
  const auto tokens = random_tokens(rng, c.model.seq_len, c.model.vocab_size);
  auto logits = [&](const SelectionPlan& plan) {
    Tape tape;
    return model_forward(tape, model, tokens, plan).value();
  };
  const Tensor reference = logits(SelectionPlan::all(c.model.n_layers));
  int mismatches = 0;
  for (int p = 0; p < kForwardPlans; ++p) {
    SelectionPlan plan = SelectionPlan::all(c.model.n_layers);
    for (auto& m : plan.modes) m = rng.uniform01() < 0.5 ? BlockMode::attached : BlockMode::detached;
    plan.modes[rng.uniform_index(plan.modes.size())] = BlockMode::detached;
    if (!bit_equal(logits(plan), reference)) ++mismatches;
  }
  return {mismatches == 0, fmt("%d random plans, %d with logits differing from all-attached", kForwardPlans,
                               mismatches)};
}

Verdict gradient_oracle() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.vocab_size = 32;
  c.seq_len = 8;
  c.lora_rank = 4;
  c.lora_alpha = 8.0f;
  c.init_std = 0.2f;
  double worst = 0.0, worst_forward = 0.0;
  for (int seed = 0; seed < kGradOracleSeeds; ++seed) {
    Model model = init_model(c, 100 + seed);
    randomize_lora_b(model, 200 + seed, 0.1);
    Rng rng(300 + seed);
    const auto tokens = random_tokens(rng, c.seq_len + 1, c.vocab_size);
    const std::vector<std::int32_t> in(tokens.begin(), tokens.end() - 1), tgt(tokens.begin() + 1, tokens.end());

    Tape tape;
    Var loss = sequence_loss(tape, model, in, tgt, SelectionPlan::all(c.n_layers));
    const GradientMap grads = tape.backward(loss);

    RefModel ref = reference_of(model);
    const double ref_loss = reference_loss(ref, in, tgt);
    worst_forward = std::max(worst_forward, std::abs(ref_loss - loss.value().data[0]) / ref_loss);

    const double h = 1e-5;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (ProjectionSite s : kAllSites) {
        const Projection& p = model.blocks[l].at(s);
        RefProjection& rp = ref.blocks[l].proj[static_cast<std::size_t>(s)];
        for (auto [tensor, values] : {std::pair{&p.lora->a, &rp.a}, std::pair{&p.lora->b, &rp.b}}) {
          const Tensor& g = grads.at(tensor);
          double scale = 0.0, err = 0.0;
          std::vector<double> fd(values->size());
          for (std::size_t i = 0; i < values->size(); ++i) {
            const double keep = (*values)[i];
            (*values)[i] = keep + h;
            const double up = reference_loss(ref, in, tgt);
            (*values)[i] = keep - h;
            const double down = reference_loss(ref, in, tgt);
            (*values)[i] = keep;
            fd[i] = (up - down) / (2 * h);
            scale = std::max(scale, std::abs(fd[i]));
          }
          for (std::size_t i = 0; i < fd.size(); ++i) err = std::max(err, std::abs(g.data[i] - fd[i]));
          if (scale > 0.0) worst = std::max(worst, err / scale);
        }
      }
    }
  }
  return {worst < kGradOracleTolerance && worst_forward < 1e-5,
          fmt("%d seeds, max relative error %.2e (limit %.0e); reference forward agrees to %.1e", kGradOracleSeeds,
              worst, kGradOracleTolerance, worst_forward)};
}

Verdict gradient_partition() {
  const TrainConfig c = toy_config();
  Model model = init_model(c.model, 42);
  randomize_lora_b(model, 6, 0.05);
  Rng rng(77);
  const auto params = model.trainable_parameters();
  std::size_t attached_total = 0, attached_nonzero = 0, detached_nonzero = 0, upstream_zero_layers = 0;
  for (int trial = 0; trial < 5; ++trial) {
    SelectionPlan plan = SelectionPlan::all(c.model.n_layers, BlockMode::detached);
    // Attached layers strictly below a detached one exercise the residual path.
    for (std::size_t l = 0; l < c.model.n_layers; ++l) {
      if (rng.uniform01() < 0.5) plan.modes[l] = BlockMode::attached;
    }
    plan.modes[0] = BlockMode::attached;
    plan.modes[c.model.n_layers - 1] = BlockMode::detached;
    const auto tokens = random_tokens(rng, c.model.seq_len + 1, c.model.vocab_size);
    const std::vector<std::int32_t> in(tokens.begin(), tokens.end() - 1), tgt(tokens.begin() + 1, tokens.end());
    Tape tape;
    const GradientMap grads = tape.backward(sequence_loss(tape, model, in, tgt, plan));
    std::vector<double> layer_norm(c.model.n_layers, 0.0);
    for (const auto& p : params) {
      const bool attached = plan.modes[p.layer] == BlockMode::attached;
      if (!grads.contains(p.tensor)) continue;
      for (float g : grads.at(p.tensor).data) {
        layer_norm[p.layer] += std::abs(g);
        if (attached) {
          ++attached_total;
          attached_nonzero += g != 0.0f;
        } else {
          detached_nonzero += g != 0.0f;
        }
      }
    }
    for (std::size_t l = 0; l < c.model.n_layers; ++l) {
      if (plan.modes[l] == BlockMode::attached && layer_norm[l] == 0.0) ++upstream_zero_layers;
    }
  }
  const double frac = static_cast<double>(attached_nonzero) / static_cast<double>(attached_total);
  return {detached_nonzero == 0 && frac >= kNonzeroFraction && upstream_zero_layers == 0,
          fmt("detached nonzero entries %zu, attached nonzero fraction %.4f (floor %.2f), attached layers below a "
              "detached layer with zero gradient %zu",
              detached_nonzero, frac, kNonzeroFraction, upstream_zero_layers)};
}

std::uint32_t ulp_distance(float a, float b) {
  auto ordered = [](float f) {
    const auto u = std::bit_cast<std::int32_t>(f);
    return u < 0 ? static_cast<std::int64_t>(INT32_MIN) - u : static_cast<std::int64_t>(u);
  };
  return static_cast<std::uint32_t>(std::min<std::int64_t>(std::llabs(ordered(a) - ordered(b)), UINT32_MAX));
}

Verdict momentum_implicit_update() {
  Rng rng(11);
  std::uint32_t worst = 0;
  for (int s = 0; s < kMomentStates; ++s) {
    OptimizerState state;
    state.hyper.lr = static_cast<float>(1e-4 * std::pow(10.0, 2.0 * rng.uniform01()));
    state.hyper.weight_decay = 0.0f;
    state.hyper.bias_correction = false;
    state.t = 1 + static_cast<long>(rng.uniform_index(1000));
    // theta = 0 makes the observed delta exactly the updated parameter.
    Tensor theta = Tensor::zeros({64});
    Moments mv;
    mv.m.resize(64);
    mv.v.resize(64);
    for (std::size_t i = 0; i < 64; ++i) {
      mv.m[i] = static_cast<float>(1e-2 * rng.normal());
      mv.v[i] = static_cast<float>(std::pow(10.0, -8.0 + 6.0 * rng.uniform01()));
    }
    state.moments = {mv};
    const Tensor before = theta;
    std::vector<Tensor*> params{&theta};
    GradientMap zeros;
    zeros.set(&theta, Tensor::zeros({64}));
    adamw_step(state, params, zeros);
    const double b1 = state.hyper.beta1, b2 = state.hyper.beta2, eps = state.hyper.eps, lr = state.hyper.lr;
    for (std::size_t i = 0; i < 64; ++i) {
      const double delta = -lr * b1 * mv.m[i] / (std::sqrt(b2 * mv.v[i]) + eps);
      worst = std::max(worst, ulp_distance(theta.data[i] - before.data[i], static_cast<float>(delta)));
    }
  }
  return {worst <= kMaxUlp, fmt("%d random (m, v) states, worst deviation %u ulp (limit %u)", kMomentStates, worst,
                                kMaxUlp)};
}

bool same_trace(const std::vector<StepMetrics>& a, const std::vector<StepMetrics>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].step != b[i].step || a[i].train_loss != b[i].train_loss || a[i].r_used != b[i].r_used ||
        a[i].selected_layers != b[i].selected_layers || a[i].eval_loss != b[i].eval_loss) {
      return false;
    }
  }
  return true;
}

Verdict degenerate_equivalence() {
  TrainConfig c = toy_config();
  c.total_steps = 100;
  const RunReport lcsb = run(with_ratio(c, 1.0));
  c.method = Method::full_backprop;
  const RunReport fo = run(c);
  const bool same = same_trace(lcsb.metrics, fo.metrics) && lcsb.final_eval_loss == fo.final_eval_loss;
  return {same, fmt("%zu steps, traces %s, final eval %.6f vs %.6f", fo.metrics.size(),
                    same ? "bit-identical" : "differ", lcsb.final_eval_loss, fo.final_eval_loss)};
}

Verdict convergence_gap() {
  const TrainConfig base = toy_config();
  double fo = 0, half = 0, third = 0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    TrainConfig c = base;
    c.seed = seed;
    c.method = Method::full_backprop;
    const double f = run(c).final_eval_loss;
    const double h = run(with_ratio(c, 0.5)).final_eval_loss;
    const double t = run(with_ratio(c, 0.3)).final_eval_loss;
    fo += f;
    half += h;
    third += t;
    per_seed += fmt(" [seed %llu: %.4f/%.4f/%.4f]", static_cast<unsigned long long>(seed), f, h, t);
  }
  const double gap_half = (half - fo) / fo, gap_third = (third - fo) / fo;
  return {gap_half <= kGapHalf && gap_third <= kGapThird,
          fmt("r=0.5 %+.2f%% (limit +%.0f%%), r=0.3 %+.2f%% (limit +%.0f%%); FO/r0.5/r0.3", 100 * gap_half,
              100 * kGapHalf, 100 * gap_third, 100 * kGapThird) +
              per_seed};
}

Verdict backward_reduction() {
  TrainConfig c = toy_config();
  c.total_steps = 200;
  c.eval_every = 200;
  const double full = run(with_ratio(c, 1.0)).mean_backward_time();
  const double third = run(with_ratio(c, 0.3)).mean_backward_time();
  const double reduction = 1.0 - third / full;
  return {reduction >= kBackwardReduction,
          fmt("mean backward %.4fs at r=1.0, %.4fs at r=0.3: %.1f%% lower (floor %.0f%%)", full, third,
              100 * reduction, 100 * kBackwardReduction)};
}

double max_loss_increase(const RunReport& r) {
  double worst = -INFINITY;
  for (std::size_t i = 1; i < r.metrics.size(); ++i) {
    worst = std::max(worst, r.metrics[i].train_loss - r.metrics[i - 1].train_loss);
  }
  return worst;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Verdict warmup_necessity() {
  TrainConfig c = with_ratio(toy_config(), 0.5);
  c.optimizer.lr = 5e-4f;
  c.total_steps = 100;
  c.eval_every = 100;
  std::vector<double> cold, warm;
  for (std::uint64_t seed : {1, 2, 3}) {
    c.seed = seed;
    c.warmup_steps = 0;
    cold.push_back(max_loss_increase(run(c)));
    c.warmup_steps = 50;
    warm.push_back(max_loss_increase(run(c)));
  }
  const double mc = median(cold), mw = median(warm);
  return {mc > mw, fmt("median max step-to-step loss increase W=0 %.4f vs W=50 %.4f (seeds 1-3, lr 5e-4, r=0.5)",
                       mc, mw)};
}

Verdict stale_cache() {
  TrainConfig c = with_ratio(toy_config(), 0.3);
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    c.seed = seed;
    c.ablation_mode = AblationMode::none;
    const double zero = run(c).final_eval_loss;
    c.ablation_mode = AblationMode::cached_fill;
    const double cached = run(c).final_eval_loss;
    wins += cached > zero;
    per_seed += fmt(" [seed %llu: cached %.4f, zero %.4f]", static_cast<unsigned long long>(seed), cached, zero);
  }
  return {wins == 3, fmt("cached_fill worse on %d/3 seeds;", wins) + per_seed};
}

Verdict zeroth_order() {
  const TrainConfig base = toy_config();
  int ok = 0;
  std::string per_seed;
  for (std::uint64_t seed : kSeeds) {
    TrainConfig fo = base;
    fo.seed = seed;
    fo.method = Method::full_backprop;
    fo.total_steps = 100;
    fo.eval_every = 100;
    TrainConfig zo = fo;
    zo.method = Method::mezo;
    zo.total_steps = 1000;
    zo.eval_every = 1000;
    const RunReport a = run(fo), b = run(zo);
    const double zl = b.diverged ? INFINITY : b.final_eval_loss;
    ok += zl >= a.final_eval_loss;
    per_seed += fmt(" [seed %llu: FO %.4f, MeZO %.4f]", static_cast<unsigned long long>(seed), a.final_eval_loss, zl);
  }
  return {ok == 3, fmt("MeZO (1000 steps) >= FO (100 steps) on %d/3 seeds;", ok) + per_seed};
}

Verdict selection_statistics() {
  const std::size_t n = 8;
  SelectionStrategy uniform;
  const ImportanceState imp = ImportanceState::ones(n);
  double worst_sigma = 0.0;
  for (double r : {0.3, 0.5}) {
    const std::size_t k = layers_for_ratio(n, r);
    Rng rng(99);
    std::vector<long> counts(n, 0);
    for (long t = 1; t <= kSelectionSteps; ++t) {
      for (std::size_t l : select_layers(uniform, imp, 50 + t, 50, n, r, &rng).attached_layers()) ++counts[l];
    }
    const double p = static_cast<double>(k) / n, mean = kSelectionSteps * p;
    const double sigma = std::sqrt(kSelectionSteps * p * (1 - p));
    for (long cnt : counts) worst_sigma = std::max(worst_sigma, std::abs(cnt - mean) / sigma);
  }
  SelectionStrategy rr;
  rr.kind = StrategyKind::round_robin;
  int unbalanced = 0;
  for (auto [nn, r] : {std::pair<std::size_t, double>{8, 0.3}, {8, 0.5}, {24, 0.3}, {10, 0.4}}) {
    const std::size_t k = layers_for_ratio(nn, r);
    const long cycle = static_cast<long>(nn / std::gcd(nn, k));
    const long expected = cycle * static_cast<long>(k) / static_cast<long>(nn);
    for (long start = 1; start + cycle - 1 <= kSelectionSteps; start += cycle) {
      std::vector<long> counts(nn, 0);
      for (long t = start; t < start + cycle; ++t) {
        for (std::size_t l : select_layers(rr, ImportanceState::ones(nn), 50 + t, 50, nn, r, nullptr).attached_layers()) {
          ++counts[l];
        }
      }
      for (long cnt : counts) unbalanced += cnt != expected;
    }
  }
  return {worst_sigma < kSigmaBound && unbalanced == 0,
          fmt("uniform worst deviation %.2f sigma over %ld steps (bound %.0f); round-robin unbalanced counts %d",
              worst_sigma, kSelectionSteps, kSigmaBound, unbalanced)};
}

Verdict quantized_stability() {
  TrainConfig c = with_ratio(toy_config(), 0.5);
  c.model.quantize_base = true;
  const RunReport r = run(c);
  const bool ok = !r.diverged && r.final_eval_loss < r.initial_eval_loss;
  return {ok, fmt("%ld steps, diverged %s, eval loss %.4f -> %.4f", static_cast<long>(r.metrics.size()),
                  r.diverged ? "yes" : "no", r.initial_eval_loss, r.final_eval_loss)};
}

Verdict checkpoint_fidelity() {
  const TrainConfig c = with_ratio(toy_config(), 0.5);
  const RunReport straight = run(c);
  const fs::path dir = work_dir() / "checkpoint";
  {
    Trainer first(c);
    first.run_until(c.total_steps / 2);
    first.save(dir);
  }
  Trainer resumed = Trainer::resume(dir);
  resumed.run_until(c.total_steps);
  const RunReport r = resumed.finish();
  const bool ok = r.final_eval_loss == straight.final_eval_loss && same_trace(r.metrics, straight.metrics);
  return {ok, fmt("resumed at step %ld: final eval %.9f vs uninterrupted %.9f, trace %s", c.total_steps / 2,
                  r.final_eval_loss, straight.final_eval_loss,
                  same_trace(r.metrics, straight.metrics) ? "identical" : "differs")};
}

Verdict suite_self_consistency() {
  TrainConfig base = toy_config();
  base.total_steps = 60;
  base.warmup_steps = 10;
  base.eval_every = 30;
  SuiteConfig s;
  s.base = to_json(base);
  s.variants = {{"fo", {{"method", "full_backprop"}}},
                {"lcsb", {{"schedule.r_start", 0.5}, {"schedule.r_end", 0.5}}},
                {"fragile", {{"divergence_threshold", 1.0}}}};
  s.reference_variant = "fo";
  s.repeats = 2;
  const ComparisonTable t = run_suite(s, work_dir() / "suite");
  const std::string text = render_table(t);
  const VariantRow& ref = t.row("fo");
  const bool footnoted = t.row("fragile").diverged == 2 && t.footnotes.size() == 1 &&
                         t.footnotes[0].find("2 of 2") != std::string::npos &&
                         text.find(t.footnotes[0]) != std::string::npos;
  const bool ok = ref.speedup == 1.0 && ref.loss_gap == 0.0 && text.find("1.00") != std::string::npos &&
                  text.find("0.00%") != std::string::npos && footnoted;
  return {ok, fmt("reference speedup %.2f gap %.2f%%; footnote: %s", ref.speedup, 100 * ref.loss_gap,
                  t.footnotes.empty() ? "(none)" : t.footnotes[0].c_str())};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict()> check;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  int only = 0;
  app.add_option("--only", only, "Run a single criterion (1-14)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "forward identity", forward_identity},
      {2, "gradient oracle", gradient_oracle},
      {3, "gradient partition", gradient_partition},
      {4, "momentum implicit update", momentum_implicit_update},
      {5, "degenerate equivalence", degenerate_equivalence},
      {6, "convergence gap", convergence_gap},
      {7, "backward-time reduction", backward_reduction},
      {8, "warmup necessity", warmup_necessity},
      {9, "stale-cache ablation", stale_cache},
      {10, "zeroth-order inferiority", zeroth_order},
      {11, "selection statistics", selection_statistics},
      {12, "quantized stability", quantized_stability},
      {13, "checkpoint fidelity", checkpoint_fidelity},
      {14, "suite self-consistency", suite_self_consistency},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (only != 0 && c.id != only) continue;
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s criterion %2d (%s): %s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str());
    std::fflush(stdout);
    failed += !v.pass;
  }
  fs::remove_all(work_dir());
  return failed == 0 ? 0 : 1;
}
