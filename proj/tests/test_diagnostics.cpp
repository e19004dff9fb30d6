// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"

using namespace msft;

namespace {

double oracle_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// Residuals of an ordinary least-squares fit of v on [1, z].
std::vector<double> residuals(const std::vector<double>& v, const std::vector<double>& z) {
  const double n = static_cast<double>(v.size());
  double mz = 0, mv = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    mz += z[i] / n;
    mv += v[i] / n;
  }
  double szz = 0, szv = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    szz += (z[i] - mz) * (z[i] - mz);
    szv += (z[i] - mz) * (v[i] - mv);
  }
  const double slope = szv / szz, icpt = mv - slope * mz;
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) r[i] = v[i] - icpt - slope * z[i];
  return r;
}

// Two-sided standard normal tail by composite Simpson integration of the density.
double simpson_tail(double z) {
  const double a = std::abs(z), b = a + 14.0;
  const int n = 40000;
  const double h = (b - a) / n;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); };
  double s = pdf(a) + pdf(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(a + i * h);
  return 2.0 * s * h / 3.0;
}

ModelConfig small_msft() {
  ModelConfig c;
  c.backbone.layers = 2;
  c.backbone.d_model = 8;
  c.backbone.heads = 2;
  c.backbone.patch = 4;
  c.mode = Mode::msft;
  c.msft.scales = {2, 2};
  return c;
}

Batch periodic_window(std::size_t C, std::size_t H) {
  Batch b;
  b.context_len = C;
  b.horizon_len = H;
  for (std::size_t t = 0; t < C; ++t) b.context.push_back(std::sin(2.0 * std::numbers::pi * t / 8.0));
  return b;
}

}  // namespace

TEST(Pearson, IdentitiesAndAffineInvariance) {
  Rng rng(1);
  const auto x = msft::testing::random_vector(rng, 50);
  std::vector<double> neg(x.size()), aff(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    neg[i] = -x[i];
    aff[i] = 3.5 * x[i] - 2.0;
  }
  EXPECT_NEAR(pearson(x, x), 1.0, 1e-12);
  EXPECT_NEAR(pearson(x, neg), -1.0, 1e-12);
  const auto y = msft::testing::random_vector(rng, 50);
  EXPECT_NEAR(pearson(aff, y), pearson(x, y), 1e-12);
  EXPECT_THROW(pearson(x, std::vector<double>(50, 1.0)), NumericError);
  EXPECT_THROW(pearson(x, std::span<const double>(y).subspan(0, 10)), DimensionError);
}

TEST(Pearson, MatchesOracleOnRandomVectors) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 4 + rng.below(200);
    const auto x = msft::testing::random_vector(rng, n), y = msft::testing::random_vector(rng, n);
    const double r = oracle_pearson(x, y);
    EXPECT_NEAR(pearson(x, y), r, 1e-9 * std::max(1.0, std::abs(r)));
  }
}

TEST(PartialCorrelation, MatchesResidualOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 8 + rng.below(200);
    std::vector<double> x(n), y(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = rng.normal();
      x[i] = 0.7 * z[i] + rng.normal();
      y[i] = -0.4 * z[i] + 0.3 * x[i] + rng.normal();
    }
    const double oracle = oracle_pearson(residuals(x, z), residuals(y, z));
    EXPECT_NEAR(partial_correlation(x, y, z), oracle, 1e-9);
  }
}

TEST(PartialCorrelation, UncorrelatedConditionerLeavesRawCorrelation) {
  // z is exactly orthogonal to both centred x and y.
  const std::vector<double> x{1, 2, 3, 4, 5, 6}, y{2, 1, 4, 3, 6, 5}, z{1, -1, 0, 0, -1, 1};
  ASSERT_NEAR(pearson(x, z), 0.0, 1e-15);
  ASSERT_NEAR(pearson(y, z), 0.0, 1e-15);
  EXPECT_NEAR(partial_correlation(x, y, z), pearson(x, y), 1e-12);
}

TEST(PartialCorrelation, RemovesSharedCause) {
  Rng rng(4);
  const std::size_t n = 20000;
  std::vector<double> x(n), y(n), z(n);
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = rng.normal();
    x[i] = z[i] + 0.1 * rng.normal();
    y[i] = z[i] + rng.normal();
  }
  EXPECT_GT(pearson(x, y), 0.6);
  // Population value is 0; the sampling sd is about 1/sqrt(n).
  EXPECT_LT(std::abs(partial_correlation(x, y, z)), 4.0 / std::sqrt(static_cast<double>(n)));
}

TEST(PartialCorrelation, CollinearConditionerIsAnError) {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 1, 4, 3, 5};
  EXPECT_THROW(partial_correlation(x, y, x), NumericError);
  EXPECT_THROW(partial_correlation(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2},
                                   std::vector<double>{3, 1, 2}),
               ContractError);
}

TEST(FisherZ, MatchesNormalTailReference) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const double r = rng.uniform(-0.6, 0.6);
    const std::size_t n = 10 + rng.below(300);
    const auto f = fisher_z(r, n, 1);
    EXPECT_NEAR(f.z, std::atanh(r) * std::sqrt(static_cast<double>(n - 4)), 1e-12);
    const double ref = simpson_tail(f.z);
    EXPECT_NEAR(f.p, ref, 1e-9 * std::max(ref, 1e-3));
  }
  EXPECT_DOUBLE_EQ(fisher_z(0.0, 10).p, 1.0);
  EXPECT_THROW(fisher_z(1.0, 10), NumericError);
  EXPECT_THROW(fisher_z(0.1, 4), ContractError);
}

TEST(Confounder, PartialBelowRawInSeededTrials) {
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = confounded_sample(seed, 200);
    const auto r = confounder_check(s.x, s.y, s.z);
    wins += std::abs(r.partial) < std::abs(r.raw);
  }
  EXPECT_GE(wins, 95);
}

TEST(Triplets, CountDeterminismAndConstantWindows) {
  ModelConfig c = small_msft();
  c.mode = Mode::zero_shot;
  Forecaster m(c, 3);
  const auto data = make_windows(synth_series({{8, 1.0}}, 0.1, 400, 2), 16, 16, {}, 8);
  const std::vector<std::size_t> w{0, 1, 2};
  const auto a = collect_triplets(m.backbone(), data.test, {2, 2}, 2, 24, w);
  const auto b = collect_triplets(m.backbone(), data.test, {2, 2}, 2, 24, w);
  ASSERT_EQ(a.size(), w.size() * 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].window, w[i / 3]);
    EXPECT_EQ(a[i].scale, i % 3);
    EXPECT_EQ(a[i].acf, b[i].acf);
    EXPECT_EQ(a[i].norm, b[i].norm);
    EXPECT_GT(a[i].norm, 0.0);
  }
  EXPECT_THROW(collect_triplets(m.backbone(), data.test, {2, 2}, 0, 24, w), IndexError);
  EXPECT_THROW(collect_triplets(m.backbone(), data.test, {2, 2}, 3, 24, w), IndexError);

  SeriesTable flat;
  flat.names = {"flat"};
  flat.columns = {std::vector<double>(400, 4.2)};
  const auto fd = make_windows(flat, 16, 16, {}, 8, false);
  for (const auto& t : collect_triplets(m.backbone(), fd.test, {2, 2}, 1, 24, {0})) EXPECT_EQ(t.acf, 0.0);
}

TEST(Heatmap, InScaleHasNoCrossScaleMassAndRowsSumToOne) {
  Forecaster m(small_msft(), 4);
  const Batch b = periodic_window(32, 16);
  for (std::size_t layer = 0; layer < 2; ++layer)
    for (std::size_t head = 0; head < 2; ++head) {
      const auto hm = export_attention(m, b, AttentionView::in_scale, layer, head, {2, 2});
      EXPECT_EQ(hm.cross_scale_mass(), 0.0);
      EXPECT_LT(hm.max_row_sum_error(), 1e-6);
      EXPECT_EQ(hm.row_scale.size(), hm.n);
    }
}

TEST(Heatmap, NaiveAndAlignedSpreadAcrossScales) {
  Forecaster m(small_msft(), 4);
  const Batch b = periodic_window(32, 16);
  for (const auto view : {AttentionView::naive, AttentionView::aligned}) {
    const auto hm = export_attention(m, b, view, 0, 0, {2, 2});
    EXPECT_GT(hm.cross_scale_mass(), 0.0);
    EXPECT_LT(hm.max_row_sum_error(), 1e-6);
    const auto dm = diagonal_mass(hm);
    EXPECT_GT(dm.co_index, 0.0);
    EXPECT_GT(dm.other, 0.0);
  }
}

TEST(Heatmap, ZeroShotModelUsesIdentityAdapters) {
  ModelConfig c = small_msft();
  c.mode = Mode::zero_shot;
  Forecaster m(c, 4);
  const auto hm = export_attention(m, periodic_window(32, 16), AttentionView::in_scale, 1, 1, {2, 2});
  EXPECT_EQ(hm.cross_scale_mass(), 0.0);
  EXPECT_LT(hm.max_row_sum_error(), 1e-6);
}

TEST(Heatmap, RangeErrorsAndCsv) {
  Forecaster m(small_msft(), 4);
  const Batch b = periodic_window(32, 16);
  EXPECT_THROW(export_attention(m, b, AttentionView::naive, 2, 0, {2, 2}), IndexError);
  EXPECT_THROW(export_attention(m, b, AttentionView::naive, 0, 2, {2, 2}), IndexError);
  EXPECT_THROW(parse_attention_view("diagonal"), ConfigError);
  EXPECT_EQ(heatmap_filename("run", AttentionView::aligned, 1, 0), "run_aligned_L1H0.csv");

  const auto hm = export_attention(m, b, AttentionView::in_scale, 0, 1, {2, 2});
  const auto path = std::filesystem::temp_directory_path() / "msft_heatmap_test.csv";
  write_heatmap_csv(path.string(), hm);
  std::ifstream in(path);
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("row_scale,row_token,c0", 0), 0u);
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, hm.n);
  std::filesystem::remove(path);
}
