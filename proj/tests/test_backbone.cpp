// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <set>

#include "test_util.hpp"

using namespace msft;
using msft::testing::max_abs_diff;
using msft::testing::probe_loss;
using msft::testing::random_tensor;

namespace {

BackboneConfig tiny() {
  BackboneConfig c;
  c.layers = 2;
  c.d_model = 8;
  c.heads = 2;
  c.patch = 4;
  return c;
}

LayerWeights random_layer(Rng& rng, std::size_t d, std::size_t f) {
  LayerWeights w;
  w.norm1_gamma = random_tensor(rng, {d});
  w.norm1_beta = random_tensor(rng, {d});
  w.wq = random_tensor(rng, {d, d}, 0.5);
  w.wk = random_tensor(rng, {d, d}, 0.5);
  w.wv = random_tensor(rng, {d, d}, 0.5);
  w.wo = random_tensor(rng, {d, d}, 0.5);
  w.norm2_gamma = random_tensor(rng, {d});
  w.norm2_beta = random_tensor(rng, {d});
  w.ffn_w1 = random_tensor(rng, {d, f}, 0.5);
  w.ffn_b1 = random_tensor(rng, {f});
  w.ffn_w2 = random_tensor(rng, {f, d}, 0.5);
  w.ffn_b2 = random_tensor(rng, {d});
  return w;
}

Batch make_batch(Rng& rng, std::size_t B, std::size_t C, std::size_t H) {
  Batch b;
  b.context_len = C;
  b.horizon_len = H;
  b.context = msft::testing::random_vector(rng, B * C);
  b.horizon = msft::testing::random_vector(rng, B * H);
  return b;
}

}  // namespace

TEST(BackboneConfig, Validation) {
  BackboneConfig c = tiny();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.heads = 8;  // head width 1 is odd
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.patch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Patchify, Examples) {
  const std::vector<double> c96(96, 1.0), c4{1, 2, 3, 4}, c5{1, 2, 3, 4, 5};
  const auto a = patchify(c96, 96, 16);
  EXPECT_EQ(a.size(), 12u);
  EXPECT_EQ(a.n_context, 6u);
  EXPECT_EQ(a.n_horizon, 6u);

  const auto b = patchify(c4, 4, 4);
  EXPECT_EQ(b.size(), 2u);
  EXPECT_EQ(b.context_pad, 0u);
  EXPECT_EQ(b.horizon_pad, 0u);

  const auto c = patchify(c5, 3, 4, -9.0);
  EXPECT_EQ(c.n_context, 2u);
  EXPECT_EQ(c.context_pad, 3u);
  EXPECT_EQ(c.horizon_pad, 1u);
  const std::vector<double> first(c.tokens.begin(), c.tokens.begin() + 8);
  EXPECT_EQ(first, (std::vector<double>{-9, -9, -9, 1, 2, 3, 4, 5}));
  EXPECT_THROW(patchify(c5, 3, 0, 0.0), ConfigError);
}

TEST(InProject, Examples) {
  const Tensor w = Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}), zb = Tensor::zeros({2});
  EXPECT_EQ(in_project(Tensor::zeros({2, 3}), w, zb).values(), std::vector<double>(4, 0.0));
  EXPECT_EQ(in_project(Tensor::matrix(1, 3, {1, 1, 1}), w, zb).values(), (std::vector<double>{9, 12}));
  EXPECT_THROW(in_project(Tensor::zeros({2, 4}), w, zb), DimensionError);
  Rng rng(1);
  Tensor x = random_tensor(rng, {3, 3}), wr = random_tensor(rng, {3, 2}), br = random_tensor(rng, {2});
  const auto rep = finite_diff_check([&] { return probe_loss(in_project(x, wr, br)); }, {{"x", x}, {"w", wr}, {"b", br}},
                                     1e-5, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.worst();
}

TEST(MaskToken, ReplacesHorizonRowsOnly) {
  Rng rng(2);
  const Tensor h = random_tensor(rng, {12, 4}, 1.0, false);
  const Tensor zero = Tensor::zeros({4});
  const Tensor out = apply_mask_token(h, {6, 12}, zero);
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      if (r < 6) {
        EXPECT_EQ(std::memcmp(&out.data()[r * 4 + c], &h.data()[r * 4 + c], sizeof(double)), 0);
      } else {
        EXPECT_EQ(out.at(r, c), 0.0);
      }
    }
  const Tensor m = Tensor::vector({1, 2, 3, 4});
  const Tensor all = apply_mask_token(h, {0, 12}, m);
  for (std::size_t r = 0; r < 12; ++r) EXPECT_EQ(all.at(r, 2), 3.0);
  EXPECT_THROW(apply_mask_token(h, {6, 6}, m), ContractError);
}

TEST(AttnBlock, SingleTokenAttendsToItself) {
  Rng rng(3);
  const std::size_t d = 8, f = 16;
  const LayerWeights w = random_layer(rng, d, f);
  RopeCache rope(4);
  rope.ensure(4);
  const Tensor h = random_tensor(rng, {1, d}, 1.0, false);
  const std::vector<std::size_t> pos{3};
  AttentionLayout layout{2, {{0}}, nullptr};
  const Tensor out = attn_block(h, layout, pos, w, rope, 1e-5);
  // Oracle: softmax row is [1], so the context equals V.
  const Tensor xn = layer_norm(h, w.norm1_gamma, w.norm1_beta, 1e-5);
  const Tensor h1 = add(h, matmul(matmul(xn, w.wv), w.wo));
  const Tensor x2 = layer_norm(h1, w.norm2_gamma, w.norm2_beta, 1e-5);
  const Tensor want = add(h1, linear(gelu(linear(x2, w.ffn_w1, w.ffn_b1)), w.ffn_w2, w.ffn_b2));
  EXPECT_LT(max_abs_diff(out.data(), want.data()), 1e-12);
}

TEST(AttnBlock, ZeroValueAndFfnOutputIsIdentity) {
  Rng rng(4);
  LayerWeights w = random_layer(rng, 8, 16);
  w.wv = Tensor::zeros({8, 8});
  w.ffn_w2 = Tensor::zeros({16, 8});
  w.ffn_b2 = Tensor::zeros({8});
  RopeCache rope(4);
  rope.ensure(5);
  const Tensor h = random_tensor(rng, {5, 8}, 1.0, false);
  const std::vector<std::size_t> pos{0, 1, 2, 3, 4};
  AttentionLayout layout{2, {{0, 1, 2, 3, 4}}, nullptr};
  const Tensor out = attn_block(h, layout, pos, w, rope, 1e-5);
  EXPECT_EQ(out.values(), h.values());
}

TEST(AttnBlock, RotaryLogitsDependOnlyOnOffset) {
  Rng rng(5);
  RopeCache cache(8);
  cache.ensure(64);
  const Tensor q = random_tensor(rng, {1, 8}, 1.0, false), k = random_tensor(rng, {1, 8}, 1.0, false);
  auto logit = [&](std::size_t p, std::size_t delta) {
    const std::vector<std::size_t> pq{p}, pk{p + delta};
    return dot(reshape(rope(q, pq, cache), {8}), reshape(rope(k, pk, cache), {8})).item();
  };
  for (std::size_t delta : {1u, 4u, 9u}) {
    const double ref = logit(0, delta);
    for (std::size_t p : {5u, 17u}) EXPECT_NEAR(logit(p, delta), ref, 1e-9 * std::max(1.0, std::abs(ref)));
  }
}

TEST(AttnBlock, GradientCheck) {
  Rng rng(6);
  LayerWeights w = random_layer(rng, 8, 16);
  RopeCache rope(4);
  rope.ensure(4);
  Tensor h = random_tensor(rng, {8, 8});
  const std::vector<std::size_t> pos{0, 1, 2, 3, 0, 1, 2, 3};
  auto mask = std::make_shared<BoolMatrix>(4);
  mask->set(0, 3, false);
  AttentionLayout layout{2, {{0, 1, 2, 3}, {4, 5, 6, 7}}, mask};
  const auto rep = finite_diff_check([&] { return probe_loss(attn_block(h, layout, pos, w, rope, 1e-5)); },
                                     {{"h", h},
                                      {"norm1_gamma", w.norm1_gamma},
                                      {"wq", w.wq},
                                      {"wk", w.wk},
                                      {"wv", w.wv},
                                      {"wo", w.wo},
                                      {"norm2_beta", w.norm2_beta},
                                      {"ffn_w1", w.ffn_w1},
                                      {"ffn_b1", w.ffn_b1},
                                      {"ffn_w2", w.ffn_w2}},
                                     1e-5, 1e-6);
  for (const auto& e : rep.entries) EXPECT_TRUE(e.passed) << e.name << " " << e.rel_err;
}

TEST(OutProject, Examples) {
  const Tensor hidden = Tensor::full({4, 3}, 1.0);
  const std::vector<std::size_t> rows{2, 3};
  const Tensor zero = out_project(hidden, rows, Tensor::zeros({3, 4}), Tensor::zeros({4}));
  EXPECT_EQ(zero.values(), std::vector<double>(8, 0.0));

  std::vector<double> steps(8);
  for (std::size_t i = 0; i < 8; ++i) steps[i] = static_cast<double>(i);
  const Tensor f = assemble_forecast(Tensor::matrix(2, 4, steps), 1, 5);
  EXPECT_EQ(f.values(), (std::vector<double>{0, 1, 2, 3, 4}));

  Rng rng(7);
  Tensor h = random_tensor(rng, {4, 3}), w = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4});
  const auto rep = finite_diff_check(
      [&] { return probe_loss(assemble_forecast(out_project(h, rows, w, b), 1, 5)); }, {{"h", h}, {"w", w}, {"b", b}},
      1e-5, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.worst();
}

TEST(ReconstructionLoss, Examples) {
  const Tensor p = Tensor::vector({0, 2});
  EXPECT_EQ(reconstruction_loss(p, std::vector<double>{0, 2}).item(), 0.0);
  EXPECT_DOUBLE_EQ(reconstruction_loss(p, std::vector<double>{1, 1}).item(), 1.0);
  const Tensor q = Tensor::vector({0, 2, 5});
  const std::vector<double> t{1, 1, 0};
  EXPECT_DOUBLE_EQ(reconstruction_loss(q, t, std::vector<std::uint8_t>{1, 1, 0}).item(), 1.0);
  EXPECT_DOUBLE_EQ(reconstruction_loss(q, t, std::vector<std::uint8_t>{1, 1, 1}).item(), 27.0 / 3.0);
  EXPECT_THROW(reconstruction_loss(p, std::vector<double>{1, 1}, std::vector<std::uint8_t>{0, 0}), ContractError);
}

TEST(ParamStore, NamesAreUniqueAndSnapshotsRestore) {
  ParamStore store;
  store.add("a", Tensor::vector({1, 2}, true));
  EXPECT_THROW(store.add("a", Tensor::vector({3})), ConfigError);
  const auto snap = store.snapshot();
  store.get("a").mutable_data()[0] = 7;
  store.restore(snap);
  EXPECT_EQ(store.get("a").data()[0], 1.0);
}

TEST(Backbone, ForwardIsDeterministicAndShaped) {
  ParamStore store;
  Rng rng(8);
  const auto cfg = tiny();
  Backbone bb(cfg, init_backbone(cfg, rng, store));
  Rng data(9);
  const Batch batch = make_batch(data, 3, 10, 6);
  const auto a = bb.forward(batch), b = bb.forward(batch);
  EXPECT_EQ(a.forecast.shape(), (Shape{3, 6}));
  EXPECT_EQ(a.tokens_per_sample, 3u + 2u);
  EXPECT_EQ(a.forecast.values(), b.forecast.values());
  std::set<std::string> names;
  for (const auto& [n, t] : store.entries()) EXPECT_TRUE(names.insert(n).second) << n;
  EXPECT_TRUE(store.contains("backbone.layer1.attn.wq"));
  EXPECT_TRUE(store.contains("backbone.mask_token"));
}

TEST(Backbone, SamplesInABatchAreIndependent) {
  ParamStore store;
  Rng rng(10);
  const auto cfg = tiny();
  Backbone bb(cfg, init_backbone(cfg, rng, store));
  Rng data(11);
  Batch batch = make_batch(data, 2, 8, 8);
  Batch first = batch;
  first.context.resize(8);
  first.horizon.resize(8);
  const auto both = bb.forward(batch).forecast, one = bb.forward(first).forecast;
  for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(both.at(0, t), one.at(0, t), 1e-12);
}

TEST(Backbone, EndToEndGradientCheck) {
  ParamStore store;
  Rng rng(12);
  const auto cfg = tiny();
  Backbone bb(cfg, init_backbone(cfg, rng, store));
  for (auto& [n, t] : store.entries()) t.set_requires_grad(true);
  Rng data(13);
  const Batch batch = make_batch(data, 2, 8, 8);
  const auto rep = finite_diff_check([&] { return masked_mse(bb.forward(batch).forecast, batch.horizon); },
                                     store.trainable(), 1e-5, 1e-5);
  for (const auto& e : rep.entries) EXPECT_TRUE(e.passed) << e.name << " " << e.rel_err;
}

TEST(Lora, StartsAtZeroDelta) {
  ParamStore store;
  Rng rng(14);
  const LoraPair p = make_lora(store, "x", 8, 4, 32, rng);
  EXPECT_DOUBLE_EQ(p.scaling, 8.0);
  const Tensor x = random_tensor(rng, {3, 8}, 1.0, false);
  const Tensor dx = p.delta(x);
  for (double v : dx.data()) EXPECT_EQ(v, 0.0);
  for (double v : p.down.data()) EXPECT_LE(std::abs(v), 1.0 / std::sqrt(8.0));
  EXPECT_THROW(make_lora(store, "y", 8, 9, 32, rng), ConfigError);
}
