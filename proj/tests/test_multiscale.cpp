// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "test_util.hpp"

using namespace msft;
using msft::testing::random_tensor;

namespace {

std::vector<double> seq(std::size_t n, double start = 1.0) {
  std::vector<double> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}

// Pads explicitly, then averages windows.
std::vector<double> pad_then_mean(std::vector<double> x, std::size_t s, PadSide side) {
  while (x.size() % s) {
    if (side == PadSide::pre) {
      x.insert(x.begin(), x.front());
    } else {
      x.push_back(x.back());
    }
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < x.size(); i += s) {
    double acc = 0;
    for (std::size_t k = 0; k < s; ++k) acc += x[i + k];
    out.push_back(acc / static_cast<double>(s));
  }
  return out;
}

Tensor rows(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::matrix(n, 1, std::move(v));
}

}  // namespace

TEST(AvgDownsample, Examples) {
  EXPECT_EQ(avg_downsample(std::vector<double>{5, 5, 5, 5}, 2, PadSide::pre), (std::vector<double>{5, 5}));
  EXPECT_EQ(avg_downsample(std::vector<double>{1, 2, 3, 4}, 2, PadSide::pre), (std::vector<double>{1.5, 3.5}));
  EXPECT_EQ(avg_downsample(std::vector<double>{1, 2, 3}, 2, PadSide::pre), (std::vector<double>{1, 2.5}));
  EXPECT_EQ(avg_downsample(std::vector<double>{1, 2, 3}, 2, PadSide::post), (std::vector<double>{1.5, 3}));
}

TEST(AvgDownsample, Errors) {
  EXPECT_THROW(avg_downsample(std::vector<double>{1, 2}, 1, PadSide::pre), ConfigError);
  EXPECT_THROW(avg_downsample(std::vector<double>{}, 2, PadSide::pre), ContractError);
}

TEST(AvgDownsample, MatchesPadThenMeanOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40), s = 2 + rng.below(4);
    const auto x = msft::testing::random_vector(rng, n);
    for (auto side : {PadSide::pre, PadSide::post}) {
      const auto got = avg_downsample(x, s, side);
      const auto want = pad_then_mean(x, s, side);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
    }
  }
}

TEST(AvgDownsample, ConstantSeriesIsPreserved) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const double c = rng.uniform(-100, 100);
    const std::vector<double> x(1 + rng.below(64), c);
    for (const double v : avg_downsample(x, 2 + rng.below(3), PadSide::pre)) ASSERT_NEAR(v, c, 1e-12 * std::abs(c) + 1e-15);
  }
}

TEST(Lengths, ChainedAgreesWithDirect) {
  for (std::size_t C = 1; C <= 512; ++C)
    for (std::size_t s : {2u, 3u, 4u})
      for (std::size_t i = 0; i <= 4; ++i) ASSERT_EQ(chained_length(C, s, i), direct_length(C, s, i)) << C << " " << s << " " << i;
}

TEST(MultiScaleSet, Examples) {
  const auto ctx = seq(96), hor = seq(96, 97);
  const auto k0 = build_multiscale_set(ctx, std::span<const double>(hor), 96, {0, 2});
  ASSERT_EQ(k0.size(), 1u);
  EXPECT_EQ(k0[0].context, ctx);
  EXPECT_EQ(k0[0].horizon, hor);

  const auto k2 = build_multiscale_set(ctx, std::span<const double>(hor), 96, {2, 2});
  const std::size_t want[3] = {96, 48, 24};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(k2[i].context.size(), want[i]);
    EXPECT_EQ(k2[i].horizon.size(), want[i]);
    EXPECT_EQ(k2[i].horizon_len, want[i]);
  }
  EXPECT_DOUBLE_EQ(k2[1].context[0], 1.5);
  EXPECT_DOUBLE_EQ(k2[2].context[0], 2.5);

  const auto odd = build_multiscale_set(seq(97), std::nullopt, 96, {2, 2});
  EXPECT_EQ(odd[1].context.size(), 49u);
  EXPECT_EQ(odd[2].context.size(), 25u);
  EXPECT_TRUE(odd[1].horizon.empty());
  EXPECT_EQ(odd[2].horizon_len, 24u);
  EXPECT_EQ(odd[1].context_pad, 1u);
  EXPECT_EQ(odd[2].context_pad, 1u);
  EXPECT_EQ(odd[1].context_start, -98);
  EXPECT_EQ(odd[2].context_start, -100);
}

TEST(MultiScaleSet, ShortContextNamesTheScale) {
  try {
    build_multiscale_set(seq(5), std::nullopt, 4, {3, 2});
    FAIL() << "expected a config error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("scale 3"), std::string::npos) << e.what();
  }
}

TEST(ScaleIndexMap, Examples) {
  const std::vector<TokenCounts> one{{6, 6}};
  const auto m1 = build_scale_index_map(one);
  EXPECT_EQ(m1.scales[0].context.begin, 0u);
  EXPECT_EQ(m1.scales[0].context.end, 6u);
  EXPECT_EQ(m1.scales[0].horizon.begin, 6u);
  EXPECT_EQ(m1.scales[0].horizon.end, 12u);

  const std::vector<TokenCounts> two{{6, 6}, {3, 3}};
  const auto m2 = build_scale_index_map(two);
  EXPECT_EQ(m2.scales[1].context.begin, 12u);
  EXPECT_EQ(m2.scales[1].context.end, 15u);
  EXPECT_EQ(m2.scales[1].horizon.begin, 15u);
  EXPECT_EQ(m2.scales[1].horizon.end, 18u);

  const auto set = build_multiscale_set(seq(96), std::nullopt, 96, {2, 2});
  const auto counts = token_counts(set, 16);
  EXPECT_EQ(build_scale_index_map(counts).total, 22u);
}

TEST(ScaleIndexMap, RangesPartitionTheAxis) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenCounts> counts;
    for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) counts.push_back({1 + rng.below(9), 1 + rng.below(9)});
    const auto map = build_scale_index_map(counts);
    std::vector<int> hits(map.total, 0);
    for (std::size_t i = 0; i < map.scales.size(); ++i) {
      for (std::size_t t = map.scales[i].begin(); t < map.scales[i].end(); ++t) {
        ++hits[t];
        ASSERT_EQ(map.scale_of(t), i);
      }
    }
    for (int h : hits) ASSERT_EQ(h, 1);
  }
}

TEST(Alignment, UniformFanOut) {
  const auto set = build_multiscale_set(seq(96), std::nullopt, 96, {1, 2});
  const auto map = build_alignment_map(set, 16);
  const auto& ctx = map.pairs[0].context;
  EXPECT_EQ(ctx.parent, (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
  EXPECT_EQ(map.pairs[0].horizon.parent, (std::vector<std::size_t>{0, 0, 1, 1, 2, 2}));
}

TEST(Alignment, ContextRightEdgeAndHorizonLeftEdge) {
  // scale 1 has 48 steps -> 3 tokens; scale 2 has 24 steps -> 2 tokens with
  // 8 pad steps. Context: coarse token 0 holds 8 pad + 8 real steps of scale
  // 2, i.e. the oldest 16 steps of scale 1 = fine token 0. Horizon: coarse
  // token 0 covers fine tokens 0-1, token 1 covers fine token 2 plus padding.
  const auto set = build_multiscale_set(seq(96), std::nullopt, 96, {2, 2});
  const auto map = build_alignment_map(set, 16);
  const auto& pair = map.pairs[1];
  EXPECT_EQ(pair.context.parent, (std::vector<std::size_t>{0, 1, 1}));
  EXPECT_EQ(pair.horizon.parent, (std::vector<std::size_t>{0, 0, 1}));
  for (const auto& p : map.pairs) {
    p.context.validate();
    p.horizon.validate();
    EXPECT_LE(p.context.max_fan_out(), 2u);
    EXPECT_LE(p.horizon.max_fan_out(), 2u);
  }
}

TEST(Alignment, FanOutBoundedAcrossShapes) {
  for (std::size_t C : {8u, 17u, 33u, 96u, 97u, 130u})
    for (std::size_t H : {4u, 9u, 24u, 96u})
      for (std::size_t P : {2u, 4u, 16u})
        for (std::size_t s : {2u, 3u}) {
          const ScaleSpec spec{2, s};
          if (C < s * s) continue;
          const auto set = build_multiscale_set(seq(C), std::nullopt, H, spec);
          const auto map = build_alignment_map(set, P);
          for (const auto& p : map.pairs)
            for (const auto* seg : {&p.context, &p.horizon}) {
              seg->validate();
              ASSERT_LE(seg->max_fan_out(), s) << C << " " << H << " " << P << " " << s;
            }
        }
}

TEST(Alignment, PairRowsKeepSegmentsApart) {
  const auto set = build_multiscale_set(seq(96), std::nullopt, 96, {2, 2});
  const auto map = build_alignment_map(set, 16);
  const auto r = pair_rows(map.pairs[1]);
  r.validate();
  const std::size_t nfc = map.pairs[1].context.n_fine, ncc = map.pairs[1].context.n_coarse;
  for (std::size_t f = 0; f < r.n_fine; ++f) EXPECT_EQ(f < nfc, r.parent[f] < ncc);
}

TEST(TokenRepeat, Examples) {
  RowAlignment even{4, 2, {0, 0, 1, 1}, {{0, 1}, {2, 3}}};
  const Tensor x = rows({10, 20});
  EXPECT_EQ(token_repeat(x, even).values(), (std::vector<double>{10, 10, 20, 20}));
  RowAlignment ragged{3, 2, {0, 0, 1}, {{0, 1}, {2}}};
  EXPECT_EQ(token_repeat(x, ragged).values(), (std::vector<double>{10, 10, 20}));
  EXPECT_THROW(token_repeat(rows({1, 2, 3}), even), AlignmentError);
}

TEST(TokenRepeat, HorizonRowsNeverReceiveContextRows) {
  PairAlignment pa;
  pa.context = {2, 1, {0, 0}, {{0, 1}}};
  pa.horizon = {2, 1, {0, 0}, {{0, 1}}};
  const auto r = pair_rows(pa);
  const Tensor coarse = rows({-1, +1});  // context, horizon
  const auto out = token_repeat(coarse, r).values();
  EXPECT_EQ(out, (std::vector<double>{-1, -1, 1, 1}));
}

TEST(TokenAvgPool, Examples) {
  RowAlignment even{4, 2, {0, 0, 1, 1}, {{0, 1}, {2, 3}}};
  EXPECT_EQ(token_avgpool(rows({1, 3, 5, 9}), even).values(), (std::vector<double>{2, 7}));
  RowAlignment ragged{3, 2, {0, 0, 1}, {{0, 1}, {2}}};
  EXPECT_EQ(token_avgpool(rows({1, 3, 5}), ragged).values(), (std::vector<double>{2, 5}));
  EXPECT_THROW(token_avgpool(rows({1, 2}), even), AlignmentError);
}

TEST(TokenAvgPool, InvertsRepeatUnderUniformFanOut) {
  Rng rng(4);
  for (std::size_t s : {2u, 3u}) {
    RowAlignment a;
    a.n_coarse = 5;
    a.n_fine = 5 * s;
    a.children.resize(5);
    for (std::size_t f = 0; f < a.n_fine; ++f) {
      a.parent.push_back(f / s);
      a.children[f / s].push_back(f);
    }
    const Tensor x = random_tensor(rng, {5, 3}, 1.0, false);
    const Tensor back = token_avgpool(token_repeat(x, a), a);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back.data()[i], x.data()[i], 1e-15);
  }
}

TEST(TokenAvgPool, AdjointIdentity) {
  RowAlignment a{4, 2, {0, 0, 1, 1}, {{0, 1}, {2, 3}}};
  const Tensor x = rows({1, 2}), y = rows({1, 1, 1, 1});
  EXPECT_DOUBLE_EQ(dot(reshape(token_repeat(x, a), {4}), reshape(y, {4})).item(), 6.0);
  EXPECT_DOUBLE_EQ(2.0 * dot(reshape(x, {2}), reshape(token_avgpool(y, a), {2})).item(), 6.0);

  // Ragged groups: <Repeat(x), y> = sum_g |g| * mean_g(y) * x_g.
  Rng rng(5);
  const auto set = build_multiscale_set(seq(97), std::nullopt, 40, {2, 2});
  const auto r = pair_rows(build_alignment_map(set, 16).pairs[1]);
  const Tensor xc = random_tensor(rng, {r.n_coarse, 1}, 1.0, false), yf = random_tensor(rng, {r.n_fine, 1}, 1.0, false);
  const double lhs = dot(reshape(token_repeat(xc, r), {r.n_fine}), reshape(yf, {r.n_fine})).item();
  const Tensor pooled = token_avgpool(yf, r);
  double rhs = 0;
  for (std::size_t c = 0; c < r.n_coarse; ++c)
    rhs += static_cast<double>(r.children[c].size()) * pooled.data()[c] * xc.data()[c];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Upsample, Examples) {
  const std::vector<double> p{2, 4};
  EXPECT_EQ(upsample_prediction(p, 2, 0, 2), p);
  EXPECT_EQ(upsample_prediction(p, 2, 1, 4), (std::vector<double>{2, 2, 4, 4}));
  EXPECT_EQ(upsample_prediction(p, 2, 1, 3), (std::vector<double>{2, 2, 4}));
  EXPECT_THROW(upsample_prediction(p, 2, 1, 5), ContractError);
}

TEST(Upsample, PreservesBlockMeans) {
  Rng rng(6);
  const auto y = msft::testing::random_vector(rng, 16);
  const auto down = avg_downsample(avg_downsample(y, 2, PadSide::post), 2, PadSide::post);
  const auto up = upsample_prediction(down, 2, 2, 16);
  for (std::size_t b = 0; b < 4; ++b) {
    double my = 0, mu = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      my += y[4 * b + k] / 4;
      mu += up[4 * b + k] / 4;
    }
    EXPECT_NEAR(my, mu, 1e-12);
  }
}
