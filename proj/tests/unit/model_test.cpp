// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "lcsb/errors.hpp"
#include "lcsb/model.hpp"
#include "lcsb/quant.hpp"
#include "lcsb/random.hpp"

using namespace lcsb;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.vocab_size = 64;
  c.seq_len = 16;
  c.lora_rank = 4;
  c.lora_alpha = 8.0f;
  c.quant_group_size = 16;
  return c;
}

std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = static_cast<std::int32_t>(rng.uniform_index(vocab));
  return out;
}

// Gives every adapter a nonzero B so LoRA gradients do not vanish.
void randomize_lora_b(Model& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : model.trainable_parameters()) {
    if (p.name.ends_with("lora_b")) {
      for (float& v : p.tensor->data) v = static_cast<float>(0.05 * rng.normal());
    }
  }
}

}  // namespace

TEST(ModelConfigTest, RejectsHeadsNotDividingWidth) {
  ModelConfig c = small_config();
  c.d_model = 6;
  c.n_heads = 4;
  c.lora_rank = 2;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("n_heads"), std::string::npos);
  }
}

TEST(ModelConfigTest, RejectsRankAboveWidth) {
  ModelConfig c = small_config();
  c.lora_rank = 33;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelTest, InitIsDeterministic) {
  Model a = init_model(small_config(), 7);
  Model b = init_model(small_config(), 7);
  const auto ta = a.named_tensors();
  const auto tb = b.named_tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(bit_equal(*ta[i].tensor, *tb[i].tensor)) << ta[i].name;
}

TEST(ModelTest, OnlyLoraRequiresGrad) {
  Model m = init_model(small_config(), 1);
  for (const auto& t : m.named_tensors()) {
    const bool is_lora = t.name.find("lora_") != std::string::npos;
    EXPECT_EQ(t.tensor->requires_grad, is_lora) << t.name;
  }
  EXPECT_EQ(m.trainable_parameters().size(), 4u * 7u * 2u);
}

TEST(ModelTest, LoraStartsWithZeroDelta) {
  Model m = init_model(small_config(), 3);
  for (const auto& block : m.blocks) {
    for (const auto& p : block.projections) {
      ASSERT_TRUE(p.lora);
      for (float v : p.lora->delta().data) EXPECT_EQ(v, 0.0f);
      EXPECT_EQ(p.lora->delta().shape, p.weight.shape);
    }
  }
}

TEST(ModelTest, FreshForwardMatchesBaseOnlyForward) {
  ModelConfig with = small_config();
  ModelConfig without = small_config();
  without.lora_targets.clear();
  Model a = init_model(with, 5);
  Model b = init_model(without, 5);
  Rng rng(1);
  const auto tokens = random_tokens(rng, 16, 64);
  Tape ta, tb;
  const Tensor la = model_forward(ta, a, tokens, SelectionPlan::all(4)).value();
  const Tensor lb = model_forward(tb, b, tokens, SelectionPlan::all(4)).value();
  ASSERT_EQ(la.shape, lb.shape);
  for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_EQ(la.data[i], lb.data[i]);
}

TEST(ModelTest, LogitsShape) {
  Model m = init_model(small_config(), 2);
  Rng rng(2);
  const auto tokens = random_tokens(rng, 16, 64);
  Tape tape;
  EXPECT_EQ(model_forward(tape, m, tokens, SelectionPlan::all(4)).value().shape, (Shape{16, 64}));
}

TEST(ModelTest, PlanLengthMismatchIsPlanError) {
  Model m = init_model(small_config(), 2);
  std::vector<std::int32_t> tokens{1, 2, 3};
  Tape tape;
  EXPECT_THROW(model_forward(tape, m, tokens, SelectionPlan::all(3)), PlanError);
}

TEST(BlockForwardTest, DetachedMatchesAttachedBitExactly) {
  Model m = init_model(small_config(), 4);
  randomize_lora_b(m, 9);
  Rng rng(4);
  const auto tokens = random_tokens(rng, 16, 64);
  Tape tape;
  Var h = ops::embedding_lookup(tape.leaf(m.embedding), tokens);
  const Tensor attached = block_forward(tape, m, h, 1, BlockMode::attached).value();
  const Tensor detached = block_forward(tape, m, h, 1, BlockMode::detached).value();
  EXPECT_TRUE(bit_equal(attached, detached));
}

TEST(BlockForwardTest, DroppedReturnsInput) {
  Model m = init_model(small_config(), 4);
  Rng rng(4);
  const auto tokens = random_tokens(rng, 16, 64);
  Tape tape;
  Var h = ops::embedding_lookup(tape.leaf(m.embedding), tokens);
  EXPECT_TRUE(bit_equal(block_forward(tape, m, h, 2, BlockMode::dropped).value(), h.value()));
}

TEST(BlockForwardTest, DetachedLayerGetsZeroGradButInputGetsGradient) {
  Model m = init_model(small_config(), 6);
  randomize_lora_b(m, 10);
  Rng rng(6);
  const auto tokens = random_tokens(rng, 16, 64);
  Tape tape;
  // Make the block input depend on layer 0 so its gradient is observable.
  Var h0 = ops::embedding_lookup(tape.leaf(m.embedding), tokens);
  Var h = block_forward(tape, m, h0, 0, BlockMode::attached);
  Var out = block_forward(tape, m, h, 1, BlockMode::detached);
  const GradientMap grads = tape.backward(ops::sum(ops::mul(out, out)));
  for (const auto& p : m.trainable_parameters()) {
    if (p.layer != 1 || !grads.contains(p.tensor)) continue;
    for (float g : grads.at(p.tensor).data) EXPECT_EQ(g, 0.0f) << p.name;
  }
  const Tensor gh = tape.grad(h);
  bool any_nonzero = false;
  for (float g : gh.data) any_nonzero = any_nonzero || g != 0.0f;
  EXPECT_TRUE(any_nonzero);
}

TEST(ModelForwardTest, MixedPlansGiveIdenticalLogits) {
  Model m = init_model(small_config(), 8);
  randomize_lora_b(m, 11);
  Rng rng(8);
  const auto tokens = random_tokens(rng, 16, 64);
  Tape base_tape;
  const Tensor reference = model_forward(base_tape, m, tokens, SelectionPlan::all(4)).value();
  SelectionPlan half = SelectionPlan::all(4);
  half.modes[0] = half.modes[2] = BlockMode::detached;
  Tape tape;
  EXPECT_TRUE(bit_equal(model_forward(tape, m, tokens, half).value(), reference));
}

TEST(ModelForwardTest, AllDroppedIsHeadOfNormOfEmbedding) {
  Model m = init_model(small_config(), 8);
  Rng rng(8);
  const auto tokens = random_tokens(rng, 10, 64);
  Tape tape;
  const Tensor logits = model_forward(tape, m, tokens, SelectionPlan::all(4, BlockMode::dropped)).value();
  Tape ref;
  Var e = ref.leaf(m.embedding);
  Var h = ops::add(ops::embedding_lookup(e, tokens), ops::slice(ref.leaf(m.positions), 0, 0, 10));
  Var expected = ops::matmul(ops::rms_norm(h, ref.leaf(m.final_norm), m.config().norm_eps), e, true);
  EXPECT_TRUE(bit_equal(logits, expected.value()));
}

TEST(ModelForwardTest, UpstreamOfDetachedLayerStillLearns) {
  Model m = init_model(small_config(), 12);
  randomize_lora_b(m, 12);
  Rng rng(12);
  const auto tokens = random_tokens(rng, 16, 64);
  const auto targets = random_tokens(rng, 16, 64);
  SelectionPlan plan = SelectionPlan::all(4);
  plan.modes[2] = BlockMode::detached;
  Tape tape;
  const GradientMap grads = tape.backward(sequence_loss(tape, m, tokens, targets, plan));
  const auto norms = layer_lora_grad_norms(m, grads);
  EXPECT_GT(norms[0], 0.0);
  EXPECT_GT(norms[1], 0.0);
  EXPECT_EQ(norms[2], 0.0);
  EXPECT_GT(norms[3], 0.0);
}

TEST(ModelForwardTest, QuantizedBaseWeightsAreDequantizedCodes) {
  ModelConfig c = small_config();
  c.quantize_base = true;
  Model m = init_model(c, 13);
  for (const auto& block : m.blocks) {
    for (const auto& p : block.projections) {
      ASSERT_TRUE(p.quantized);
      EXPECT_TRUE(bit_equal(p.weight, p.quantized->dequantize()));
      EXPECT_FALSE(p.weight.requires_grad);
    }
  }
}

TEST(QuantizeTest, ZeroMatrixRoundTripsToZero) {
  const QuantizedLinear q = quantize_weights(Tensor::zeros({2, 8}), 4);
  for (float s : q.scales()) EXPECT_EQ(s, 1.0f);
  for (float v : q.dequantize().data) EXPECT_EQ(v, 0.0f);
}

TEST(QuantizeTest, LinspaceHandValues) {
  Tensor w({1, 7}, {-0.7f, -0.4666667f, -0.2333333f, 0.0f, 0.2333333f, 0.4666667f, 0.7f});
  const QuantizedLinear q = quantize_weights(w, 7);
  EXPECT_NEAR(q.scales()[0], 0.1f, 1e-7);
  const std::vector<int> expected{-7, -5, -2, 0, 2, 5, 7};
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(q.codes()[i], expected[i]);
  const Tensor back = q.dequantize();
  for (std::size_t i = 0; i < 7; ++i) EXPECT_LE(std::abs(back.data[i] - w.data[i]), 0.05f);
}

TEST(QuantizeTest, RoundTripWithinHalfScale) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor w = Tensor::zeros({6, 32});
    for (float& v : w.data) v = static_cast<float>(rng.normal());
    const QuantizedLinear q = quantize_weights(w, 8);
    const Tensor back = q.dequantize();
    for (std::size_t r = 0; r < 6; ++r) {
      for (std::size_t c = 0; c < 32; ++c) {
        const float scale = q.scales()[r * 4 + c / 8];
        EXPECT_LE(std::abs(back.at(r, c) - w.at(r, c)), scale / 2 * (1 + 1e-6f));
      }
    }
    for (std::int8_t code : q.codes()) {
      EXPECT_GE(code, -8);
      EXPECT_LE(code, 7);
    }
  }
}

TEST(QuantizeTest, GroupMustDivideRow) {
  EXPECT_THROW(quantize_weights(Tensor::zeros({2, 10}), 4), DimensionError);
}
