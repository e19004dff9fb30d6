// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "msft/msft.hpp"

namespace msft::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

/// Weighted sum with fixed random coefficients: turns any tensor into a
/// scalar whose gradient exercises every element.
inline Tensor probe_loss(const Tensor& t, std::uint64_t seed = 99) {
  Rng rng(seed);
  std::vector<double> w(t.numel());
  for (auto& x : w) x = rng.normal();
  return dot(reshape(t, {t.numel()}), Tensor::vector(std::move(w)));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace msft::testing
