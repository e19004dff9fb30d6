// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "msft/data.hpp"
#include "msft/model.hpp"
#include "msft/training/metrics.hpp"

namespace msft {

// ---------------------------------------------------------------------------
// Correlation statistics

inline double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DimensionError("pearson: length mismatch");
  if (x.size() < 2) throw ContractError("pearson needs at least two points");
  const double n = static_cast<double>(x.size());
  CompensatedSum sx, sy;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx.add(x[i]);
    sy.add(y[i]);
  }
  const double mx = sx.value() / n, my = sy.value() / n;
  CompensatedSum sxy, sxx, syy;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy.add((x[i] - mx) * (y[i] - my));
    sxx.add((x[i] - mx) * (x[i] - mx));
    syy.add((y[i] - my) * (y[i] - my));
  }
  if (!(sxx.value() > 0.0) || !(syy.value() > 0.0)) throw NumericError("pearson: zero variance");
  const double r = sxy.value() / std::sqrt(sxx.value() * syy.value());
  return std::clamp(r, -1.0, 1.0);
}

/// First-order partial correlation of x and y given z.
inline double partial_correlation(std::span<const double> x, std::span<const double> y, std::span<const double> z) {
  if (x.size() < 4) throw ContractError("partial correlation needs n >= 4");
  const double rxy = pearson(x, y), rxz = pearson(x, z), ryz = pearson(y, z);
  const double den = (1.0 - rxz * rxz) * (1.0 - ryz * ryz);
  if (!(den > 0.0)) throw NumericError("partial correlation: conditioning variable is collinear (|r| = 1)");
  return (rxy - rxz * ryz) / std::sqrt(den);
}

struct FisherZ {
  double z = 0.0;
  double p = 1.0;  // two-sided normal tail
};

/// z = atanh(r) * sqrt(n - k - 3) for a correlation conditioned on k
/// variables; p = erfc(|z| / sqrt 2).
inline FisherZ fisher_z(double r, std::size_t n, std::size_t conditioned = 1) {
  if (n < conditioned + 4) throw ContractError("fisher_z: too few samples");
  if (!(std::abs(r) < 1.0)) throw NumericError("fisher_z: |r| must be < 1");
  FisherZ f;
  f.z = std::atanh(r) * std::sqrt(static_cast<double>(n - conditioned - 3));
  f.p = std::erfc(std::abs(f.z) / std::sqrt(2.0));
  return f;
}

struct ConfounderReport {
  double raw = 0.0;
  double partial = 0.0;
  FisherZ raw_test, partial_test;
  std::size_t n = 0;
};

inline ConfounderReport confounder_check(std::span<const double> x, std::span<const double> y,
                                         std::span<const double> z) {
  ConfounderReport r;
  r.n = x.size();
  r.raw = pearson(x, y);
  r.partial = partial_correlation(x, y, z);
  r.raw_test = fisher_z(r.raw, r.n, 0);
  r.partial_test = fisher_z(r.partial, r.n, 1);
  return r;
}

// ---------------------------------------------------------------------------
// Scale triplets

/// Mean |ACF| over lags 1..min(max_lag, len - 1).
inline double acf_summary(std::span<const double> x, std::size_t max_lag) {
  if (x.size() < 2) return 0.0;
  const std::size_t lags = std::min(max_lag, x.size() - 1);
  if (lags == 0) return 0.0;
  const auto r = acf(x, lags);
  double s = 0.0;
  for (double v : r) s += std::abs(v);
  return s / static_cast<double>(lags);
}

struct ScaleTriplet {
  std::size_t window = 0;
  std::size_t scale = 0;
  double acf = 0.0;   // X
  double norm = 0.0;  // M
};

/// For every listed window and scale 0..K: the scale's context is run alone
/// through the backbone; X is its ACF summary and M the L2 norm of the
/// mean context-token embedding after block `layer` (1-based, L = last).
inline std::vector<ScaleTriplet> collect_triplets(const Backbone& bb, const WindowDataset& ds, const ScaleSpec& spec,
                                                  std::size_t layer, std::size_t max_lag,
                                                  const std::vector<std::size_t>& windows) {
  if (layer == 0 || layer > bb.config().layers) {
    throw IndexError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(bb.config().layers));
  }
  NoGradGuard guard;
  std::vector<ScaleTriplet> out;
  for (std::size_t w : windows) {
    const MultiScaleSet set = build_multiscale_set(ds.context(w), std::nullopt, ds.horizon_len, spec);
    for (std::size_t i = 0; i < set.size(); ++i) {
      Batch b;
      b.context_len = set[i].context.size();
      b.horizon_len = set[i].horizon_len;
      b.context = set[i].context;
      std::vector<Tensor> blocks;
      const auto f = bb.forward(b, nullptr, nullptr, &blocks);
      const Tensor& h = blocks[layer - 1];
      const std::size_t d = h.dim(1);
      std::vector<double> mean(d, 0.0);
      for (std::size_t r = 0; r < f.context_tokens; ++r)
        for (std::size_t j = 0; j < d; ++j) mean[j] += h.at(r, j);
      double sq = 0.0;
      for (double& v : mean) {
        v /= static_cast<double>(f.context_tokens);
        sq += v * v;
      }
      out.push_back({w, i, acf_summary(set[i].context, max_lag), std::sqrt(sq)});
    }
  }
  return out;
}

inline void write_triplets_csv(const std::string& path, const std::vector<ScaleTriplet>& t) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path + "'");
  os.precision(17);
  os << "window,scale,acf,norm\n";
  for (const auto& r : t) os << r.window << ',' << r.scale << ',' << r.acf << ',' << r.norm << '\n';
}

/// One trial of the confounded generator: z (scale) uniform in {0..levels-1}
/// drives x = z + noise and y = -z + noise; x has no effect on y.
struct ConfoundedSample {
  std::vector<double> x, y, z;
};

inline ConfoundedSample confounded_sample(std::uint64_t seed, std::size_t n, std::size_t levels = 4,
                                          double noise = 1.0) {
  Rng rng(seed);
  ConfoundedSample s;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = static_cast<double>(rng.below(levels));
    s.z.push_back(z);
    s.x.push_back(z + noise * rng.normal());
    s.y.push_back(-z + noise * rng.normal());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Attention heatmaps

enum class AttentionView { naive, aligned, in_scale };

inline const char* to_string(AttentionView v) {
  switch (v) {
    case AttentionView::naive: return "naive";
    case AttentionView::aligned: return "aligned";
    case AttentionView::in_scale: return "in_scale";
  }
  return "?";
}
inline AttentionView parse_attention_view(const std::string& s) {
  if (s == "naive") return AttentionView::naive;
  if (s == "aligned") return AttentionView::aligned;
  if (s == "in_scale") return AttentionView::in_scale;
  throw ConfigError("unknown attention mode '" + s + "' (naive|aligned|in_scale)");
}

struct HeatmapExport {
  AttentionView view = AttentionView::in_scale;
  std::size_t layer = 0, head = 0;
  std::size_t n = 0;
  std::vector<double> probs;  // n x n
  std::vector<std::size_t> row_scale, row_token;
  BoolMatrix allowed;

  double at(std::size_t i, std::size_t j) const { return probs[i * n + j]; }

  double cross_scale_mass() const {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (row_scale[i] != row_scale[j]) s += at(i, j);
    return s;
  }
  double max_row_sum_error() const {
    double e = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (allowed(i, j)) s += at(i, j);
      e = std::max(e, std::abs(s - 1.0));
    }
    return e;
  }
};

/// Attention probabilities of one window over the concatenated multi-scale
/// token axis. naive: no mask, raw positions, no aggregation; aligned: no
/// mask, positions on the coarsest grid, no aggregation; in_scale: the
/// block-diagonal mask with the model's aggregators. Finetuned adapters are
/// used when the model has them, identity otherwise.
inline HeatmapExport export_attention(const Forecaster& model, const Batch& sample, AttentionView view,
                                      std::size_t layer, std::size_t head, const ScaleSpec& scales) {
  const auto& cfg = model.config().backbone;
  if (layer >= cfg.layers) throw IndexError("layer " + std::to_string(layer) + " out of range");
  if (head >= cfg.heads) throw IndexError("head " + std::to_string(head) + " out of range");
  if (sample.size() != 1) throw ContractError("export_attention takes a single window");

  MsftOptions opt = model.msft() ? model.msft()->options() : MsftOptions{};
  opt.scales = scales;
  MsftWeights weights;
  ParamStore scratch;
  if (model.msft() && model.msft()->options().scales.K == scales.K) {
    weights = model.msft()->weights();
  } else {
    Rng rng(0);
    opt.mixing = MixingMode::average;
    weights = init_msft(cfg, opt, rng, scratch);
  }
  if (view != AttentionView::in_scale) {
    opt.in_scale_mask = false;
    opt.c2f = opt.f2c = false;
    weights.aggregators.clear();
  } else {
    opt.in_scale_mask = true;
  }
  opt.aligned_positions = view == AttentionView::aligned;
  const MsftModel probe(&model.backbone(), opt, weights);
  NoGradGuard guard;
  std::vector<AttentionCapture> caps;
  const MsftForward f = probe.forward(sample, &caps);

  HeatmapExport hm;
  hm.view = view;
  hm.layer = layer;
  hm.head = head;
  hm.n = caps[layer].seq_len;
  hm.probs = caps[layer].probs.at(head);
  for (std::size_t i = 0; i < f.layout.scales(); ++i)
    for (std::size_t t = 0; t < f.layout.counts[i].total(); ++t) {
      hm.row_scale.push_back(i);
      hm.row_token.push_back(t);
    }
  hm.allowed = f.layout.attn.mask ? *f.layout.attn.mask : BoolMatrix(hm.n, true);
  return hm;
}

/// Mean probability on cross-scale cells whose row and column share a local
/// token index, next to the mean over all other cross-scale cells.
struct DiagonalMass {
  double co_index = 0.0;
  double other = 0.0;
  double ratio() const { return other > 0.0 ? co_index / other : std::numeric_limits<double>::quiet_NaN(); }
};

inline DiagonalMass diagonal_mass(const HeatmapExport& hm) {
  CompensatedSum co, other;
  std::size_t nco = 0, nother = 0;
  for (std::size_t i = 0; i < hm.n; ++i)
    for (std::size_t j = 0; j < hm.n; ++j) {
      if (hm.row_scale[i] == hm.row_scale[j]) continue;
      if (hm.row_token[i] == hm.row_token[j]) {
        co.add(hm.at(i, j));
        ++nco;
      } else {
        other.add(hm.at(i, j));
        ++nother;
      }
    }
  DiagonalMass d;
  d.co_index = nco ? co.value() / static_cast<double>(nco) : 0.0;
  d.other = nother ? other.value() / static_cast<double>(nother) : 0.0;
  return d;
}

inline void write_heatmap_csv(const std::string& path, const HeatmapExport& hm) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path + "'");
  os.precision(17);
  os << "row_scale,row_token";
  for (std::size_t j = 0; j < hm.n; ++j) os << ",c" << j;
  os << '\n';
  for (std::size_t i = 0; i < hm.n; ++i) {
    os << hm.row_scale[i] << ',' << hm.row_token[i];
    for (std::size_t j = 0; j < hm.n; ++j) os << ',' << hm.at(i, j);
    os << '\n';
  }
}

inline std::string heatmap_filename(const std::string& run, AttentionView view, std::size_t layer, std::size_t head) {
  return run + "_" + to_string(view) + "_L" + std::to_string(layer) + "H" + std::to_string(head) + ".csv";
}

}  // namespace msft
