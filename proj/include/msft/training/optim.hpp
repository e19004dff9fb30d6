// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "msft/backbone.hpp"

namespace msft {

struct OptimConfig {
  double lr = 5e-5;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("adam_eps must be positive");
  }
};

/// AdamW with decoupled decay:
///   p <- p * (1 - lr * wd)
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Moments exist only for trainable parameters.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const OptimConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::size_t steps() const { return t_; }
  std::size_t state_size() const { return m_.size(); }
  bool has_state(const std::string& name) const { return m_.count(name) != 0; }

  /// Updates every trainable parameter of `store` from its gradient (a
  /// parameter without a gradient counts as a zero gradient) and clears
  /// gradients. A frozen parameter carrying a gradient is a hard error.
  void step(ParamStore& store) {
    for (const auto& [name, p] : store.entries()) {
      if (!p.requires_grad() && p.has_grad()) {
        throw ContractError("attempt to update frozen parameter '" + name + "'");
      }
      if (p.has_grad()) {
        for (double g : p.grad())
          if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter '" + name + "'");
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : store.entries()) {
      if (!p.requires_grad()) continue;
      auto& m = m_[name];
      auto& v = v_[name];
      auto w = p.mutable_data();
      if (m.empty()) {
        m.assign(w.size(), 0.0);
        v.assign(w.size(), 0.0);
      }
      const auto g = p.grad();
      const bool has = !g.empty();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = has ? g[i] : 0.0;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        if (cfg_.weight_decay != 0.0) w[i] *= 1.0 - cfg_.lr * cfg_.weight_decay;
        w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
      p.zero_grad();
    }
  }

 private:
  OptimConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace msft
