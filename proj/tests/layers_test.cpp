// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dropin/error.hpp"
#include "dropin/layers.hpp"
#include "families.hpp"
#include "test_support.hpp"

using namespace dropin;
using namespace testing_support;

namespace {

DenseLayer dense(std::string name, std::vector<std::size_t> segs, std::vector<std::size_t> in,
                 Activation act = Activation::kNone) {
  DenseLayer l;
  l.name = std::move(name);
  l.segments = std::move(segs);
  l.in_segments = std::move(in);
  l.activation = act;
  return l;
}

ParamStore params_for(const std::map<ParamId, Shape>& shapes, std::uint64_t seed) {
  Rng rng(seed);
  ParamStore p;
  for (const auto& [id, s] : shapes) p.add(id, random_tensor(s, rng));
  return p;
}

}  // namespace

// --- dense -----------------------------------------------------------------

TEST(DenseForward, IdentityWeightPassesInputThrough) {
  ParamStore p;
  Tensor eye({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
  p.add("fc.weight", eye);
  p.add("fc.bias", Tensor({3}, 0.0));
  Rng rng(1);
  const Tensor x = random_tensor({4, 3}, rng);
  EXPECT_TRUE(dense_forward(dense("fc", {3}, {}), p, x) == x);
}

TEST(DenseForward, ZeroWeightGivesBias) {
  ParamStore p;
  p.add("fc.weight", Tensor({2, 3}, 0.0));
  p.add("fc.bias", Tensor({2}, std::vector<double>{0.25, -1.0}));
  Rng rng(2);
  const Tensor y = dense_forward(dense("fc", {2}, {}), p, random_tensor({3, 3}, rng));
  for (std::size_t b = 0; b < 3; ++b) {
    EXPECT_EQ(y.at({b, 0}), 0.25);
    EXPECT_EQ(y.at({b, 1}), -1.0);
  }
}

TEST(DenseForward, MatchesTripleLoopIncludingBlocks) {
  for (const auto& [rows, cols] : std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>{
           {{5}, {4}}, {{5, 2}, {4}}, {{5, 2, 3}, {4, 1}}}) {
    ModelGraph holder("m", InputKind::kImage, {total_width(cols), 1, 1},
                      {make_flatten("flat"), make_dense("fc", 1, Activation::kRelu)});
    DenseLayer l = dense("fc", rows, cols, Activation::kRelu);
    std::map<ParamId, Shape> shapes;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (std::size_t c = 0; c < cols.size(); ++c) shapes[block_id("fc.weight", r, c)] = {rows[r], cols[c]};
      shapes[segment_id("fc.bias", r)] = {rows[r]};
    }
    const ParamStore p = params_for(shapes, 3);
    Rng rng(4);
    const Tensor x = random_tensor({6, total_width(cols)}, rng);
    const Tensor y = dense_forward(l, p, x);
    const auto ref = ref_dense(assemble(p, "fc.weight", rows, cols), assemble_vector(p, "fc.bias", rows), x.data(), 6,
                               total_width(cols), total_width(rows), true);
    EXPECT_LT(max_abs_diff(y.data(), ref), 1e-13);
  }
}

TEST(DenseForward, DimensionMismatchIsAnError) {
  ParamStore p;
  p.add("fc.weight", Tensor({2, 3}, 0.0));
  p.add("fc.bias", Tensor({2}, 0.0));
  EXPECT_THROW(dense_forward(dense("fc", {2}, {3}), p, Tensor({1, 4}, 0.0)), Error);
}

// --- conv2d ----------------------------------------------------------------

Conv2dLayer conv(std::vector<std::size_t> segs, std::vector<std::size_t> in, std::size_t k, std::size_t stride,
                 std::size_t pad, Activation act = Activation::kNone) {
  Conv2dLayer l;
  l.name = "conv";
  l.segments = std::move(segs);
  l.in_segments = std::move(in);
  l.kernel_h = l.kernel_w = k;
  l.stride = stride;
  l.padding = pad;
  l.activation = act;
  return l;
}

TEST(Conv2dForward, UnitKernelIsIdentity) {
  ParamStore p;
  p.add("conv.weight", Tensor({1, 1, 1, 1}, 1.0));
  p.add("conv.bias", Tensor({1}, 0.0));
  Rng rng(5);
  const Tensor x = random_tensor({2, 1, 4, 3}, rng);
  EXPECT_TRUE(conv2d_forward(conv({1}, {}, 1, 1, 0), p, x) == x);
}

TEST(Conv2dForward, ZeroFiltersGiveZeroMaps) {
  ParamStore p;
  p.add("conv.weight", Tensor({3, 2, 3, 3}, 0.0));
  p.add("conv.bias", Tensor({3}, 0.0));
  Rng rng(6);
  const Tensor y = conv2d_forward(conv({3}, {}, 3, 1, 1), p, random_tensor({1, 2, 5, 5}, rng));
  ASSERT_EQ(y.shape(), (Shape{1, 3, 5, 5}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dForward, MatchesSlidingWindowOracle) {
  struct Case {
    std::vector<std::size_t> rows, cols;
    std::size_t stride, pad;
  };
  for (const Case& c : {Case{{3}, {2}, 1, 0}, Case{{3}, {2}, 1, 1}, Case{{2, 2}, {2, 1}, 2, 1}}) {
    std::map<ParamId, Shape> shapes;
    for (std::size_t r = 0; r < c.rows.size(); ++r) {
      for (std::size_t k = 0; k < c.cols.size(); ++k) shapes[block_id("conv.weight", r, k)] = {c.rows[r], c.cols[k], 3, 3};
      shapes[segment_id("conv.bias", r)] = {c.rows[r]};
    }
    const ParamStore p = params_for(shapes, 7);
    Rng rng(8);
    const std::size_t cin = total_width(c.cols), cout = total_width(c.rows);
    const Tensor x = random_tensor({2, cin, 5, 5}, rng);
    const Tensor y = conv2d_forward(conv(c.rows, c.cols, 3, c.stride, c.pad, Activation::kRelu), p, x);
    const ConvDims d{2, cin, 5, 5, cout, 3, 3, c.stride, c.pad};
    ASSERT_EQ(y.shape(), (Shape{2, cout, d.oh(), d.ow()}));
    const auto ref = ref_conv(x.data(), assemble(p, "conv.weight", c.rows, c.cols),
                              assemble_vector(p, "conv.bias", c.rows), d, true);
    EXPECT_LT(max_abs_diff(y.data(), ref), 1e-13);
  }
}

TEST(Conv2dForward, ChannelMismatchIsAnError) {
  ParamStore p;
  p.add("conv.weight", Tensor({1, 2, 3, 3}, 0.0));
  p.add("conv.bias", Tensor({1}, 0.0));
  EXPECT_THROW(conv2d_forward(conv({1}, {2}, 3, 1, 1), p, Tensor({1, 3, 4, 4}, 0.0)), Error);
}

// --- GRU -------------------------------------------------------------------

GruLayer gru(std::vector<std::size_t> segs, std::vector<std::size_t> in, bool seq = false) {
  GruLayer l;
  l.name = "gru";
  l.segments = std::move(segs);
  l.in_segments = std::move(in);
  l.return_sequences = seq;
  return l;
}

std::map<ParamId, Shape> gru_shapes(const GruLayer& l) {
  ModelGraph m("m", InputKind::kSequence, {2, total_width(l.in_segments)}, {make_gru("gru", 1)});
  std::map<ParamId, Shape> shapes;
  for (const char* g : {"z", "r", "h"}) {
    for (std::size_t r = 0; r < l.segments.size(); ++r) {
      for (std::size_t c = 0; c < l.in_segments.size(); ++c)
        shapes[block_id(std::string("gru.w_") + g, r, c)] = {l.segments[r], l.in_segments[c]};
      for (std::size_t c = 0; c < l.segments.size(); ++c)
        shapes[block_id(std::string("gru.u_") + g, r, c)] = {l.segments[r], l.segments[c]};
      shapes[segment_id(std::string("gru.b_") + g, r)] = {l.segments[r]};
    }
  }
  return shapes;
}

TEST(GruForward, ZeroWeightsStayAtZero) {
  const GruLayer l = gru({3}, {2}, true);
  ParamStore p;
  for (const auto& [id, s] : gru_shapes(l)) p.add(id, Tensor(s, 0.0));
  Rng rng(9);
  const Tensor y = gru_forward(l, p, random_tensor({2, 5, 2}, rng));
  ASSERT_EQ(y.shape(), (Shape{2, 5, 3}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(GruForward, SingleStepClosedForm) {
  // One input, one hidden unit: h1 = z * tanh(w_h x + b_h), z = sigmoid(w_z x + b_z).
  const GruLayer l = gru({1}, {1});
  ParamStore p;
  for (const auto& [id, s] : gru_shapes(l)) p.add(id, Tensor(s, 0.0));
  p.replace("gru.w_z", Tensor({1, 1}, 0.7));
  p.replace("gru.b_z", Tensor({1}, -0.2));
  p.replace("gru.w_h", Tensor({1, 1}, 1.3));
  p.replace("gru.b_h", Tensor({1}, 0.1));
  p.replace("gru.w_r", Tensor({1, 1}, 5.0));  // irrelevant with a zero state
  const double x = 0.9;
  const double z = 1.0 / (1.0 + std::exp(-(0.7 * x - 0.2)));
  const double expected = z * std::tanh(1.3 * x + 0.1);
  const Tensor y = gru_forward(l, p, Tensor({1, 1, 1}, x));
  EXPECT_NEAR(y[0], expected, 1e-15);
}

TEST(GruForward, MatchesScalarRecurrence) {
  for (const auto& [rows, cols] : std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>>{
           {{4}, {3}}, {{4, 2}, {3}}, {{2, 2, 1}, {2, 1}}}) {
    const GruLayer l = gru(rows, cols, true);
    const ParamStore p = params_for(gru_shapes(l), 10);
    Rng rng(11);
    const std::size_t in = total_width(cols), hidden = total_width(rows);
    const Tensor x = random_tensor({2, 3, in}, rng);
    const Tensor y = gru_forward(l, p, x);
    const auto ref = ref_gru(gather_gru(p, l), x.data(), 2, 3, in, hidden);
    EXPECT_LT(max_abs_diff(y.data(), ref), 1e-13);

    const Tensor last = gru_forward(gru(rows, cols, false), p, x);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < hidden; ++j) EXPECT_EQ(last.at({b, j}), y.at({b, 2, j}));
  }
}

TEST(GruForward, FeatureMismatchIsAnError) {
  const GruLayer l = gru({2}, {3});
  ParamStore p;
  for (const auto& [id, s] : gru_shapes(l)) p.add(id, Tensor(s, 0.0));
  EXPECT_THROW(gru_forward(l, p, Tensor({1, 2, 4}, 0.0)), Error);
}

// --- attention ---------------------------------------------------------------

AttentionBlock attention(std::vector<std::size_t> segs, std::size_t d, std::size_t heads, ScaleMode mode) {
  AttentionBlock b;
  b.name = "attn";
  b.segments = std::move(segs);
  b.model_dim = d;
  b.num_heads = heads;
  b.ffn_dim = 5;
  b.scale_mode = mode;
  return b;
}

std::map<ParamId, Shape> attention_shapes(const AttentionBlock& b) {
  std::map<ParamId, Shape> s;
  for (std::size_t h = 0; h < b.num_heads; ++h) {
    const std::string hp = "attn.h" + std::to_string(h);
    for (std::size_t k = 0; k < b.segments.size(); ++k) {
      s[segment_id(hp + ".query", k)] = {b.segments[k], b.model_dim};
      s[segment_id(hp + ".key", k)] = {b.segments[k], b.model_dim};
      s[segment_id(hp + ".value", k)] = {b.segments[k], b.model_dim};
      s[segment_id(hp + ".out", k)] = {b.model_dim, b.segments[k]};
    }
  }
  s["attn.ffn1.weight"] = {b.ffn_dim, b.model_dim};
  s["attn.ffn1.bias"] = {b.ffn_dim};
  s["attn.ffn2.weight"] = {b.model_dim, b.ffn_dim};
  s["attn.ffn2.bias"] = {b.model_dim};
  return s;
}

void zero_ffn(ParamStore& p) {
  for (const char* id : {"attn.ffn1.weight", "attn.ffn1.bias", "attn.ffn2.weight", "attn.ffn2.bias"}) {
    p.replace(id, Tensor(p.get(id).shape(), 0.0));
  }
}

TEST(AttentionForward, SingleTokenAttendsToItself) {
  const AttentionBlock b = attention({3}, 4, 1, ScaleMode::kExpanded);
  ParamStore p = params_for(attention_shapes(b), 12);
  zero_ffn(p);
  Rng rng(13);
  const Tensor x = random_tensor({2, 1, 4}, rng);
  const Tensor w = attention_weights(b, p, x, 0);
  for (double v : w.values()) EXPECT_EQ(v, 1.0);

  const Tensor y = attention_forward(b, p, x);
  const auto& wv = p.get("attn.h0.value");
  const auto& wo = p.get("attn.h0.out");
  for (std::size_t s = 0; s < 2; ++s) {
    double v[3] = {0, 0, 0};
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t i = 0; i < 4; ++i) v[j] += wv[j * 4 + i] * x[s * 4 + i];
    for (std::size_t r = 0; r < 4; ++r) {
      double acc = x[s * 4 + r];
      for (std::size_t j = 0; j < 3; ++j) acc += wo[r * 3 + j] * v[j];
      EXPECT_NEAR(y[s * 4 + r], acc, 1e-14);
    }
  }
}

TEST(AttentionForward, ZeroQueryKeyGivesUniformWeights) {
  const AttentionBlock b = attention({3}, 4, 2, ScaleMode::kExpanded);
  ParamStore p = params_for(attention_shapes(b), 14);
  for (const char* id : {"attn.h1.query", "attn.h1.key"}) p.replace(id, Tensor(p.get(id).shape(), 0.0));
  Rng rng(15);
  const Tensor w = attention_weights(b, p, random_tensor({2, 5, 4}, rng), 1);
  for (double v : w.values()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(AttentionForward, MatchesPerHeadLoopOracle) {
  for (ScaleMode mode : {ScaleMode::kExpanded, ScaleMode::kOriginal}) {
    for (const auto& segs : std::vector<std::vector<std::size_t>>{{3}, {3, 2}, {2, 1, 2}}) {
      const AttentionBlock b = attention(segs, 6, 2, mode);
      const ParamStore p = params_for(attention_shapes(b), 16);
      Rng rng(17);
      const Tensor x = random_tensor({2, 4, 6}, rng);
      const Tensor y = attention_forward(b, p, x);
      EXPECT_LT(max_abs_diff(y.data(), ref_attention(p, b, x.data(), 2, 4)), 1e-12);
    }
  }
}

TEST(AttentionForward, SoftmaxRowsSumToOne) {
  const AttentionBlock b = attention({4, 2}, 5, 2, ScaleMode::kExpanded);
  const ParamStore p = params_for(attention_shapes(b), 18);
  Rng rng(19);
  const Tensor x = random_tensor({3, 6, 5}, rng, 3.0);
  for (std::size_t h = 0; h < 2; ++h) {
    const Tensor w = attention_weights(b, p, x, h);
    for (std::size_t row = 0; row < 3 * 6; ++row) {
      double s = 0.0;
      for (std::size_t u = 0; u < 6; ++u) s += w[row * 6 + u];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(AttentionForward, DimensionMismatchIsAnError) {
  const AttentionBlock b = attention({3}, 4, 1, ScaleMode::kExpanded);
  const ParamStore p = params_for(attention_shapes(b), 20);
  EXPECT_THROW(attention_forward(b, p, Tensor({1, 2, 5}, 0.0)), Error);
}

// --- model -------------------------------------------------------------------

TEST(ModelForward, ZeroDenseModelReturnsHeadBias) {
  ModelGraph m("m", InputKind::kImage, {1, 2, 2}, {make_flatten("flat"), make_dense("fc", 3)});
  ParamStore p;
  for (const auto& [id, s] : m.param_shapes()) p.add(id, Tensor(s, 0.0));
  p.replace("head.bias", Tensor({2}, std::vector<double>{0.5, -0.25}));
  Rng rng(21);
  const Tensor logits = model_forward(m, p, random_tensor({4, 1, 2, 2}, rng));
  ASSERT_EQ(logits.shape(), (Shape{4, 2}));
  for (std::size_t b = 0; b < 4; ++b) {
    EXPECT_EQ(logits.at({b, 0}), 0.5);
    EXPECT_EQ(logits.at({b, 1}), -0.25);
  }
}

TEST(ModelForward, ConvStackOnZeroInputGivesZeroLogits) {
  ModelGraph m = family_model("conv2d");
  ParamStore p = init_params(m, 42);
  const Tensor logits = model_forward(m, p, Tensor(batch_shape(m, 3), 0.0));
  for (double v : logits.values()) EXPECT_EQ(v, 0.0);
}

TEST(ModelForward, SeededModelReproducesRecordedValue) {
  ModelGraph m = family_model("conv2d");
  const ParamStore p = init_params(m, 42);
  Rng rng(42);
  const Tensor logits = model_forward(m, p, random_tensor(batch_shape(m, 2), rng));
  const std::vector<double> golden = {0.32800925177994839, 0.59429883306460896, 0.20070085054347775,
                                      0.37796261652128715};
  ASSERT_EQ(logits.size(), golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) EXPECT_NEAR(logits[i], golden[i], 1e-12) << i;
}

TEST(ModelGraph, RejectsIncompatibleStacks) {
  EXPECT_THROW(ModelGraph("m", InputKind::kImage, {1, 4, 4}, {make_dense("fc", 3)}), Error);
  EXPECT_THROW(ModelGraph("m", InputKind::kSequence, {4, 3}, {make_conv2d("c", 2, 3)}), Error);
  EXPECT_THROW(ModelGraph("m", InputKind::kImage, {1, 4, 4}, {make_flatten("a"), make_flatten("a")}), Error);
}

TEST(ModelGraph, ExpandabilityAndConsumers) {
  ModelGraph m("m", InputKind::kSequence, {4, 6},
               {make_gru("enc", 6, true), make_attention("attn", 1, 3, 4), make_gru("gru", 3)});
  EXPECT_FALSE(m.expandable(0));  // feeds the attention residual stream
  EXPECT_TRUE(m.expandable(1));
  EXPECT_TRUE(m.expandable(2));
  EXPECT_EQ(m.consumer_of(2), std::nullopt);
}

TEST(InitParams, DeterministicAndShapeConsistent) {
  for (const auto& family : family_names()) {
    const ModelGraph m = family_model(family);
    const ParamStore a = init_params(m, 7), b = init_params(m, 7), c = init_params(m, 8);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == c);
    EXPECT_NO_THROW(validate_params(m, a));
  }
}

// --- gradients per family ------------------------------------------------------

class FamilyGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(FamilyGradients, MatchCentralDifferences) {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    FamilyCase fc = make_family_case(GetParam(), 500 + trial, trial % 2 == 1);
    EXPECT_LE(family_gradient_error(fc), 1e-5) << GetParam() << " trial " << trial;
  }
}

INSTANTIATE_TEST_SUITE_P(All, FamilyGradients, ::testing::Values("dense", "conv2d", "gru", "attention", "lora"));

TEST(ShapeAlgebra, ExpandedModelsKeepTheirContract) {
  for (const auto& family : family_names()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      FamilyCase fc = make_family_case(family, seed, true, 2);
      const Tensor logits = model_forward(fc.model, fc.params, fc.batch);
      EXPECT_EQ(logits.shape(), (Shape{2, 2}));
      EXPECT_TRUE(logits.all_finite());
    }
  }
}
