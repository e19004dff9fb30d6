// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "msft/numerics/tensor.hpp"

namespace msft {

struct GradCheckEntry {
  std::string name;
  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, abs_floor)
  double rel_err = 0.0;
  double max_abs_diff = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;

  const GradCheckEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.rel_err);
    return w;
  }
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Compares reverse-mode gradients of the scalar `loss_fn` with central
/// differences of step `h` for every listed parameter (which must be leaves
/// with requires_grad set). `loss_fn` is evaluated twice up front; any
/// difference between the two values is reported as a harness error.
/// `abs_floor` keeps parameters whose true gradient is zero from turning
/// difference noise into a large relative error.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<NamedTensor> params,
                                         double h, double tol, double abs_floor = 1e-8) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  for (auto& [name, p] : params) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ContractError("finite_diff_check: '" + name + "' is not a trainable leaf");
    }
    p.zero_grad();
  }
  const Tensor loss = loss_fn();
  const double again = loss_fn().item();
  if (loss.item() != again) throw HarnessError("finite_diff_check: loss function is not deterministic");
  backward(loss);

  GradCheckReport report;
  for (auto& [name, p] : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0, max_abs = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss_fn().item();
      values[i] = orig - h;
      const double down = loss_fn().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double diff = analytic[i] - numeric;
      diff2 += diff * diff;
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      max_abs = std::max(max_abs, std::abs(diff));
    }
    GradCheckEntry e;
    e.name = name;
    e.rel_err = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), abs_floor);
    e.max_abs_diff = max_abs;
    e.passed = e.rel_err < tol;
    report.passed = report.passed && e.passed;
    report.entries.push_back(std::move(e));
  }
  for (auto& [name, p] : params) p.zero_grad();
  return report;
}

}  // namespace msft
