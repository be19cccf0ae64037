// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lcsb/plan.hpp"
#include "lcsb/quant.hpp"
#include "lcsb/tape.hpp"
#include "lcsb/tensor.hpp"

namespace lcsb {

/// The seven per-layer projection sites that may carry LoRA adapters.
enum class ProjectionSite { q, k, v, o, gate, up, down };

inline constexpr std::array<ProjectionSite, 7> kAllSites = {
    ProjectionSite::q,    ProjectionSite::k,  ProjectionSite::v,   ProjectionSite::o,
    ProjectionSite::gate, ProjectionSite::up, ProjectionSite::down};

std::string_view to_string(ProjectionSite site);
ProjectionSite parse_projection_site(std::string_view name);

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 256;
  std::size_t seq_len = 128;
  std::size_t lora_rank = 16;
  float lora_alpha = 32.0f;
  std::set<ProjectionSite> lora_targets{kAllSites.begin(), kAllSites.end()};
  bool quantize_base = false;
  std::size_t quant_group_size = 32;
  float init_std = 0.02f;
  float norm_eps = 1e-6f;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
};

/// delta = (alpha / rank) * B * A, with A: rank x d_in and B: d_out x rank.
struct LoraAdapter {
  Tensor a;
  Tensor b;
  float alpha = 0.0f;
  std::size_t rank = 0;

  float scaling() const { return alpha / static_cast<float>(rank); }
  Tensor delta() const;
};

/// Frozen base projection (d_out x d_in) with an optional adapter. When the
/// base is quantized, `weight` holds the dequantized codes and is the only
/// form of the base weights that enters a matmul.
struct Projection {
  Tensor weight;
  std::optional<QuantizedLinear> quantized;
  std::optional<LoraAdapter> lora;
};

struct TransformerBlock {
  Tensor attn_norm;
  Tensor mlp_norm;
  std::array<Projection, 7> projections;

  Projection& at(ProjectionSite site) { return projections[static_cast<std::size_t>(site)]; }
  const Projection& at(ProjectionSite site) const { return projections[static_cast<std::size_t>(site)]; }
};

struct NamedParameter {
  std::string name;
  Tensor* tensor = nullptr;
  std::size_t layer = 0;
};

struct NamedTensor {
  std::string name;
  const Tensor* tensor = nullptr;
};

/// Decoder-only transformer: learned token + position embeddings, pre-norm
/// blocks (causal multi-head attention, SwiGLU MLP), final RMSNorm and a
/// head tied to the token embedding. Only LoRA tensors require grad.
class Model {
 public:
  Model() = default;
  explicit Model(ModelConfig config);

  const ModelConfig& config() const noexcept { return config_; }

  Tensor embedding;
  Tensor positions;
  Tensor final_norm;
  std::vector<TransformerBlock> blocks;

  /// LoRA tensors in layer order; pointers stay valid while the model is
  /// not moved.
  std::vector<NamedParameter> trainable_parameters();
  /// Every float tensor (frozen and trainable) by stable name.
  std::vector<NamedTensor> named_tensors() const;

 private:
  ModelConfig config_;
};

/// Deterministic from seed. Base weights ~ N(0, init_std); LoRA A ~
/// N(0, 1/rank) (standard deviation), LoRA B = 0.
Model init_model(const ModelConfig& config, std::uint64_t seed);

/// One residual block in the given mode. h has shape (seq, d_model).
Var block_forward(Tape& tape, const Model& model, Var h, std::size_t layer, BlockMode mode);

/// Embeds tokens, applies every block in its planned mode, final norm and
/// the tied head. Returns logits of shape (tokens, vocab).
Var model_forward(Tape& tape, const Model& model, std::span<const std::int32_t> tokens, const SelectionPlan& plan);

/// Mean next-token cross-entropy of one sequence.
Var sequence_loss(Tape& tape, const Model& model, std::span<const std::int32_t> inputs,
                  std::span<const std::int32_t> targets, const SelectionPlan& plan);

/// sqrt of the summed squared gradient over each layer's LoRA tensors.
std::vector<double> layer_lora_grad_norms(Model& model, const GradientMap& grads);

}  // namespace lcsb
