// SPDX-License-Identifier: Apache-2.0
#include "lcsb/model.hpp"

#include <cmath>
#include <string>

#include "lcsb/errors.hpp"
#include "lcsb/random.hpp"

namespace lcsb {

std::string_view to_string(BlockMode mode) {
  switch (mode) {
    case BlockMode::attached: return "attached";
    case BlockMode::detached: return "detached";
    case BlockMode::dropped: return "dropped";
  }
  return "unknown";
}

SelectionPlan SelectionPlan::all(std::size_t n_layers, BlockMode mode) {
  SelectionPlan plan;
  plan.modes.assign(n_layers, mode);
  plan.k_used = mode == BlockMode::attached ? n_layers : 0;
  plan.r_used = 1.0;
  return plan;
}

std::vector<std::size_t> SelectionPlan::attached_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < modes.size(); ++i) {
    if (modes[i] == BlockMode::attached) out.push_back(i);
  }
  return out;
}

std::size_t SelectionPlan::attached_count() const { return attached_layers().size(); }

std::string_view to_string(ProjectionSite site) {
  switch (site) {
    case ProjectionSite::q: return "q";
    case ProjectionSite::k: return "k";
    case ProjectionSite::v: return "v";
    case ProjectionSite::o: return "o";
    case ProjectionSite::gate: return "gate";
    case ProjectionSite::up: return "up";
    case ProjectionSite::down: return "down";
  }
  return "unknown";
}

ProjectionSite parse_projection_site(std::string_view name) {
  for (ProjectionSite s : kAllSites) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown LoRA target '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(seq_len, "seq_len");
  positive(lora_rank, "lora_rank");
  positive(quant_group_size, "quant_group_size");
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model mod n_heads must be 0 (d_model=" + std::to_string(d_model) +
                      ", n_heads=" + std::to_string(n_heads) + ")");
  }
  if (lora_rank > d_model) {
    throw ConfigError("lora_rank must not exceed d_model (lora_rank=" + std::to_string(lora_rank) +
                      ", d_model=" + std::to_string(d_model) + ")");
  }
  if (!(lora_alpha > 0.0f)) throw ConfigError("lora_alpha must be positive");
  if (!(init_std > 0.0f)) throw ConfigError("init_std must be positive");
  if (quantize_base && (d_model % quant_group_size != 0 || d_ff % quant_group_size != 0)) {
    throw ConfigError("quant_group_size must divide d_model and d_ff");
  }
}

Tensor LoraAdapter::delta() const {
  const std::size_t d_out = b.shape[0], d_in = a.shape[1];
  Tensor out = Tensor::zeros({d_out, d_in});
  gemm(b.data, a.data, out.data, d_out, rank, d_in);
  for (float& v : out.data) v *= scaling();
  return out;
}

namespace {

struct SiteDims {
  std::size_t d_out;
  std::size_t d_in;
};

SiteDims site_dims(const ModelConfig& c, ProjectionSite site) {
  switch (site) {
    case ProjectionSite::gate:
    case ProjectionSite::up: return {c.d_ff, c.d_model};
    case ProjectionSite::down: return {c.d_model, c.d_ff};
    default: return {c.d_model, c.d_model};
  }
}

void fill_normal(Tensor& t, Rng& rng, double std) {
  for (float& v : t.data) v = static_cast<float>(std * rng.normal());
}

Var linear(Tape& tape, Var x, const Projection& p) {
  Var y = ops::matmul(x, tape.leaf(p.weight), true);
  if (!p.lora) return y;
  Var low = ops::matmul(x, tape.leaf(p.lora->a), true);
  Var up = ops::matmul(low, tape.leaf(p.lora->b), true);
  return ops::add(y, ops::scale(up, p.lora->scaling()));
}

Var attention(Tape& tape, const Model& model, const TransformerBlock& block, Var x) {
  const ModelConfig& c = model.config();
  const std::size_t head_dim = c.d_model / c.n_heads;
  Var q = linear(tape, x, block.at(ProjectionSite::q));
  Var k = linear(tape, x, block.at(ProjectionSite::k));
  Var v = linear(tape, x, block.at(ProjectionSite::v));
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head_dim));
  std::vector<Var> heads;
  heads.reserve(c.n_heads);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    Var qh = ops::slice(q, 1, h * head_dim, head_dim);
    Var kh = ops::slice(k, 1, h * head_dim, head_dim);
    Var vh = ops::slice(v, 1, h * head_dim, head_dim);
    Var scores = ops::scale(ops::matmul(qh, kh, true), inv_sqrt);
    heads.push_back(ops::matmul(ops::softmax(scores, true), vh));
  }
  Var merged = c.n_heads == 1 ? heads[0] : ops::concat(heads, 1);
  return linear(tape, merged, block.at(ProjectionSite::o));
}

Var mlp(Tape& tape, const TransformerBlock& block, Var x) {
  Var gate = linear(tape, x, block.at(ProjectionSite::gate));
  Var up = linear(tape, x, block.at(ProjectionSite::up));
  return linear(tape, ops::mul(ops::silu(gate), up), block.at(ProjectionSite::down));
}

Var residual_block(Tape& tape, const Model& model, const TransformerBlock& block, Var h) {
  const float eps = model.config().norm_eps;
  Var h1 = ops::add(h, attention(tape, model, block, ops::rms_norm(h, tape.leaf(block.attn_norm), eps)));
  return ops::add(h1, mlp(tape, block, ops::rms_norm(h1, tape.leaf(block.mlp_norm), eps)));
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;
  embedding = Tensor::zeros({c.vocab_size, c.d_model});
  positions = Tensor::zeros({c.seq_len, c.d_model});
  final_norm = Tensor::filled({c.d_model}, 1.0f);
  blocks.resize(c.n_layers);
  for (auto& block : blocks) {
    block.attn_norm = Tensor::filled({c.d_model}, 1.0f);
    block.mlp_norm = Tensor::filled({c.d_model}, 1.0f);
    for (ProjectionSite site : kAllSites) {
      const auto [d_out, d_in] = site_dims(c, site);
      Projection& p = block.at(site);
      p.weight = Tensor::zeros({d_out, d_in});
      if (c.lora_targets.count(site)) {
        p.lora = LoraAdapter{Tensor::zeros({c.lora_rank, d_in}, true), Tensor::zeros({d_out, c.lora_rank}, true),
                             c.lora_alpha, c.lora_rank};
      }
    }
  }
}

std::vector<NamedParameter> Model::trainable_parameters() {
  std::vector<NamedParameter> out;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    for (ProjectionSite site : kAllSites) {
      Projection& p = blocks[l].at(site);
      if (!p.lora) continue;
      const std::string prefix = "layers." + std::to_string(l) + "." + std::string(to_string(site));
      out.push_back({prefix + ".lora_a", &p.lora->a, l});
      out.push_back({prefix + ".lora_b", &p.lora->b, l});
    }
  }
  return out;
}

std::vector<NamedTensor> Model::named_tensors() const {
  std::vector<NamedTensor> out{{"embedding", &embedding}, {"positions", &positions}, {"final_norm", &final_norm}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string layer = "layers." + std::to_string(l) + ".";
    out.push_back({layer + "attn_norm", &blocks[l].attn_norm});
    out.push_back({layer + "mlp_norm", &blocks[l].mlp_norm});
    for (ProjectionSite site : kAllSites) {
      const Projection& p = blocks[l].at(site);
      const std::string prefix = layer + std::string(to_string(site));
      out.push_back({prefix + ".weight", &p.weight});
      if (p.lora) {
        out.push_back({prefix + ".lora_a", &p.lora->a});
        out.push_back({prefix + ".lora_b", &p.lora->b});
      }
    }
  }
  return out;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  Model model(config);
  const ModelConfig& c = model.config();
  // Separate streams keep the base weights independent of the LoRA target
  // set, so a model with and without adapters shares its frozen weights.
  Rng base_rng = Rng::derive(seed, 1);
  Rng lora_rng = Rng::derive(seed, 2);
  fill_normal(model.embedding, base_rng, c.init_std);
  fill_normal(model.positions, base_rng, c.init_std);
  const double lora_std = 1.0 / static_cast<double>(c.lora_rank);
  for (auto& block : model.blocks) {
    for (ProjectionSite site : kAllSites) {
      Projection& p = block.at(site);
      fill_normal(p.weight, base_rng, c.init_std);
      if (c.quantize_base) {
        p.quantized = quantize_weights(p.weight, c.quant_group_size);
        p.weight = p.quantized->dequantize();
      }
    }
    for (ProjectionSite site : kAllSites) {
      Projection& p = block.at(site);
      if (p.lora) fill_normal(p.lora->a, lora_rng, lora_std);
    }
  }
  return model;
}

Var block_forward(Tape& tape, const Model& model, Var h, std::size_t layer, BlockMode mode) {
  if (layer >= model.blocks.size()) {
    throw PlanError("layer index " + std::to_string(layer) + " out of range for " +
                    std::to_string(model.blocks.size()) + " layers");
  }
  const TransformerBlock& block = model.blocks[layer];
  switch (mode) {
    case BlockMode::attached: return residual_block(tape, model, block, h);
    case BlockMode::detached: {
      Var out;
      {
        Tape::Pause pause(tape);
        out = residual_block(tape, model, block, h);
      }
      return ops::detached_residual(h, out);
    }
    case BlockMode::dropped: return h;
  }
  throw PlanError("unknown block mode");
}

Var model_forward(Tape& tape, const Model& model, std::span<const std::int32_t> tokens, const SelectionPlan& plan) {
  const ModelConfig& c = model.config();
  if (plan.modes.size() != c.n_layers) {
    throw PlanError("plan covers " + std::to_string(plan.modes.size()) + " layers, model has " +
                    std::to_string(c.n_layers));
  }
  if (tokens.empty() || tokens.size() > c.seq_len) {
    throw DimensionError("sequence of " + std::to_string(tokens.size()) + " tokens; expected 1.." +
                         std::to_string(c.seq_len));
  }
  Var embed = tape.leaf(model.embedding);
  Var h = ops::add(ops::embedding_lookup(embed, tokens),
                   ops::slice(tape.leaf(model.positions), 0, 0, tokens.size()));
  for (std::size_t l = 0; l < c.n_layers; ++l) h = block_forward(tape, model, h, l, plan.modes[l]);
  Var normed = ops::rms_norm(h, tape.leaf(model.final_norm), c.norm_eps);
  return ops::matmul(normed, embed, true);
}

Var sequence_loss(Tape& tape, const Model& model, std::span<const std::int32_t> inputs,
                  std::span<const std::int32_t> targets, const SelectionPlan& plan) {
  return ops::cross_entropy_logits(model_forward(tape, model, inputs, plan), targets);
}

std::vector<double> layer_lora_grad_norms(Model& model, const GradientMap& grads) {
  std::vector<double> norms(model.blocks.size(), 0.0);
  for (const auto& p : model.trainable_parameters()) {
    if (!grads.contains(p.tensor)) continue;
    for (float g : grads.at(p.tensor).data) norms[p.layer] += static_cast<double>(g) * g;
  }
  for (double& n : norms) n = std::sqrt(n);
  return norms;
}

}  // namespace lcsb
