// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "msft/numerics/errors.hpp"

namespace msft {

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0, comp_ = 0.0;
};

/// Point-forecast errors of one window. Percentage terms whose denominator
/// is zero are skipped (and counted); scale-free metrics with a zero
/// denominator are NaN.
struct WindowMetrics {
  double mse = 0, mae = 0, smape = 0, mase = 0, nd = 0, nrmse = 0;
  std::size_t smape_skipped = 0, nd_skipped = 0;
};

inline WindowMetrics window_metrics(std::span<const double> target, std::span<const double> pred,
                                    std::size_t season = 1) {
  if (target.size() != pred.size() || target.empty()) {
    throw ContractError("metrics: target has " + std::to_string(target.size()) + " steps, prediction " +
                        std::to_string(pred.size()));
  }
  const std::size_t H = target.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CompensatedSum se, ae, sm, nd, naive;
  std::size_t sm_n = 0, nd_n = 0;
  double lo = target[0], hi = target[0];
  WindowMetrics m;
  for (std::size_t i = 0; i < H; ++i) {
    const double e = target[i] - pred[i];
    se.add(e * e);
    ae.add(std::abs(e));
    const double den = std::abs(target[i]) + std::abs(pred[i]);
    if (den > 0.0) {
      sm.add(std::abs(e) / den);
      ++sm_n;
    } else {
      ++m.smape_skipped;
    }
    if (target[i] != 0.0) {
      nd.add(std::abs(e / target[i]));
      ++nd_n;
    } else {
      ++m.nd_skipped;
    }
    lo = std::min(lo, target[i]);
    hi = std::max(hi, target[i]);
  }
  const double h = static_cast<double>(H);
  m.mse = se.value() / h;
  m.mae = ae.value() / h;
  m.smape = sm_n ? 200.0 * sm.value() / static_cast<double>(sm_n) : nan;
  m.nd = nd_n ? 100.0 * nd.value() / static_cast<double>(nd_n) : nan;
  m.nrmse = hi > lo ? std::sqrt(m.mse) / (hi - lo) : nan;
  if (season == 0) throw ConfigError("MASE season must be >= 1");
  if (H > season) {
    for (std::size_t j = season; j < H; ++j) naive.add(std::abs(target[j] - target[j - season]));
    const double scale = naive.value() / static_cast<double>(H - season);
    m.mase = scale > 0.0 ? m.mae / scale : nan;
  } else {
    m.mase = nan;
  }
  return m;
}

/// Window-averaged metrics. NaN window values are left out of their
/// metric's mean and counted in `undefined_*`.
struct MetricReport {
  double mse = 0, mae = 0, smape = 0, mase = 0, nd = 0, nrmse = 0;
  std::size_t windows = 0;
  std::size_t smape_skipped = 0, nd_skipped = 0;
  std::size_t undefined_smape = 0, undefined_mase = 0, undefined_nd = 0, undefined_nrmse = 0;
};

class MetricAccumulator {
 public:
  explicit MetricAccumulator(std::size_t season = 1) : season_(season) {}

  void add(std::span<const double> target, std::span<const double> pred) {
    const auto w = window_metrics(target, pred, season_);
    ++n_;
    mse_.add(w.mse);
    mae_.add(w.mae);
    push(smape_, w.smape);
    push(mase_, w.mase);
    push(nd_, w.nd);
    push(nrmse_, w.nrmse);
    smape_skipped_ += w.smape_skipped;
    nd_skipped_ += w.nd_skipped;
  }

  MetricReport report() const {
    if (n_ == 0) throw ContractError("metrics over an empty test set");
    MetricReport r;
    r.windows = n_;
    r.mse = mse_.value() / static_cast<double>(n_);
    r.mae = mae_.value() / static_cast<double>(n_);
    r.smape = smape_.mean();
    r.mase = mase_.mean();
    r.nd = nd_.mean();
    r.nrmse = nrmse_.mean();
    r.undefined_smape = n_ - smape_.n;
    r.undefined_mase = n_ - mase_.n;
    r.undefined_nd = n_ - nd_.n;
    r.undefined_nrmse = n_ - nrmse_.n;
    r.smape_skipped = smape_skipped_;
    r.nd_skipped = nd_skipped_;
    return r;
  }

 private:
  struct Partial {
    CompensatedSum sum;
    std::size_t n = 0;
    double mean() const { return n ? sum.value() / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); }
  };
  static void push(Partial& p, double v) {
    if (std::isnan(v)) return;
    p.sum.add(v);
    ++p.n;
  }

  std::size_t season_;
  std::size_t n_ = 0;
  CompensatedSum mse_, mae_;
  Partial smape_, mase_, nd_, nrmse_;
  std::size_t smape_skipped_ = 0, nd_skipped_ = 0;
};

}  // namespace msft
