// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "msft/numerics/tensor.hpp"

namespace msft {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::from_op("add", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::from_op("sub", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (int k = 0; k < 2; ++k) {
      auto& in = self.inputs[k];
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::from_op("mul", a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    auto& an = self.inputs[0];
    auto& bn = self.inputs[1];
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
  return Tensor::from_op("scale", a.shape(), std::move(out), {a.node()}, [c](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

/// x[R x C] + b[C] broadcast over rows (also accepts rank-1 x).
inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  detail::require_rank(b, 1, "add_row_bias");
  if (x.cols() != b.numel()) {
    throw DimensionError("add_row_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t cols = b.numel();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + b.data()[i % cols];
  return Tensor::from_op("add_row_bias", x.shape(), std::move(out), {x.node(), b.node()}, [cols](Node& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % cols] += self.grad[i];
    }
  });
}

inline constexpr double kInvSqrt2 = 0.5 * std::numbers::sqrt2;

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x.data()[i]);
  return Tensor::from_op("gelu", x.shape(), std::move(out), {x.node()}, [](Node& self) {
    auto& in = self.inputs[0];
    auto& g = in->grad_buffer();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::from_op("sum", {}, {s}, {x.node()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return Tensor::from_op("mean", {}, {s * inv}, {x.node()}, [inv](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0] * inv;
  });
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
  return Tensor::from_op("dot", {}, {s}, {a.node(), b.node()}, [](Node& self) {
    auto& an = self.inputs[0];
    auto& bn = self.inputs[1];
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * an->value[i];
    }
  });
}

/// Masked mean squared error against a constant target:
/// sum_i keep_i (pred_i - target_i)^2 / sum_i keep_i.
inline Tensor masked_mse(const Tensor& pred, std::span<const double> target, std::span<const std::uint8_t> keep = {}) {
  if (target.size() != pred.numel()) {
    throw DimensionError("masked_mse: prediction " + shape_str(pred.shape()) + " vs target length " +
                         std::to_string(target.size()));
  }
  if (!keep.empty() && keep.size() != pred.numel()) throw DimensionError("masked_mse: mask length mismatch");
  std::size_t count = 0;
  double s = 0.0;
  std::vector<double> resid(pred.numel(), 0.0);
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    if (!keep.empty() && !keep[i]) continue;
    resid[i] = pred.data()[i] - target[i];
    s += resid[i] * resid[i];
    ++count;
  }
  if (count == 0) throw ContractError("masked_mse: every step is padding");
  const double inv = 1.0 / static_cast<double>(count);
  return Tensor::from_op("masked_mse", {}, {s * inv}, {pred.node()}, [resid = std::move(resid), inv](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * 2.0 * resid[i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  detail::Map(out.data(), m, n).noalias() =
      detail::MapC(a.data().data(), m, k) * detail::MapC(b.data().data(), k, n);
  return Tensor::from_op("matmul", {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](Node& self) {
    auto& an = self.inputs[0];
    auto& bn = self.inputs[1];
    detail::MapC g(self.grad.data(), m, n);
    if (an->requires_grad) {
      detail::Map(an->grad_buffer().data(), m, k).noalias() += g * detail::MapC(bn->value.data(), k, n).transpose();
    }
    if (bn->requires_grad) {
      detail::Map(bn->grad_buffer().data(), k, n).noalias() += detail::MapC(an->value.data(), m, k).transpose() * g;
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  return Tensor::from_op("transpose", {c, r}, std::move(out), {a.node()}, [r, c](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

/// x @ W + b for x[R x in], W[in x out], b[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row_bias(matmul(x, w), b); }

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Per-last-axis normalization (biased variance) followed by gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: empty last axis");
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta length must equal last axis " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      out[r * d + j] = gamma.data()[j] * xhat[r * d + j] + beta.data()[j];
    }
  }
  return Tensor::from_op(
      "layer_norm", x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        auto& xn = self.inputs[0];
        auto& gn = self.inputs[1];
        auto& bn = self.inputs[2];
        const double* dy = self.grad.data();
        if (gn->requires_grad) {
          auto& g = gn->grad_buffer();
          for (std::size_t i = 0; i < rows * d; ++i) g[i % d] += dy[i] * xhat[i];
        }
        if (bn->requires_grad) {
          auto& g = bn->grad_buffer();
          for (std::size_t i = 0; i < rows * d; ++i) g[i % d] += dy[i];
        }
        if (xn->requires_grad) {
          auto& g = xn->grad_buffer();
          std::vector<double> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = dy[r * d + j] * gn->value[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat[r * d + j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              g[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
            }
          }
        }
      });
}

/// Square boolean matrix, row-major. allow(i, j) == true keeps entry (i, j).
struct BoolMatrix {
  std::size_t n = 0;
  std::vector<std::uint8_t> allow;

  BoolMatrix() = default;
  explicit BoolMatrix(std::size_t size, bool value = true) : n(size), allow(size * size, value ? 1 : 0) {}

  bool operator()(std::size_t i, std::size_t j) const { return allow[i * n + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { allow[i * n + j] = v ? 1 : 0; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto a : allow) c += a;
    return c;
  }
};

namespace detail {

/// Softmax over allowed entries of one row, max-subtracted. Returns false
/// if the row has no allowed entry.
inline bool masked_softmax_row(const double* scores, const std::uint8_t* allow, std::size_t n, double* out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (!allow || allow[j]) mx = std::max(mx, scores[j]);
  if (mx == -std::numeric_limits<double>::infinity()) return false;
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = (!allow || allow[j]) ? std::exp(scores[j] - mx) : 0.0;
    z += out[j];
  }
  const double inv = 1.0 / z;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  return true;
}

// dS = P * (dP - sum_j P dP); exact zeros where P is zero.
inline void softmax_row_backward(const double* p, const double* dp, std::size_t n, double* ds) {
  double dotp = 0.0;
  for (std::size_t j = 0; j < n; ++j) dotp += p[j] * dp[j];
  for (std::size_t j = 0; j < n; ++j) ds[j] = p[j] == 0.0 ? 0.0 : p[j] * (dp[j] - dotp);
}

}  // namespace detail

/// Softmax over the last axis of scores[... x N x N], with entries where
/// mask(i, j) is false forced to probability exactly 0.
inline Tensor masked_softmax(const Tensor& scores, const BoolMatrix& mask) {
  if (scores.rank() < 2) throw DimensionError("masked_softmax: scores must be at least rank 2");
  const std::size_t n = scores.cols();
  if (scores.dim(scores.rank() - 2) != n || mask.n != n) {
    throw DimensionError("masked_softmax: scores " + shape_str(scores.shape()) + " vs mask " +
                         std::to_string(mask.n) + "x" + std::to_string(mask.n));
  }
  const std::size_t rows = scores.numel() / n;
  std::vector<double> out(scores.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t i = r % n;
    if (!detail::masked_softmax_row(scores.data().data() + r * n, mask.allow.data() + i * n, n, out.data() + r * n)) {
      throw ContractError("masked_softmax: row " + std::to_string(i) + " has no allowed entry (degenerate attention row)");
    }
  }
  auto probs = out;
  return Tensor::from_op("masked_softmax", scores.shape(), std::move(out), {scores.node()},
                         [n, rows, probs = std::move(probs)](Node& self) {
                           auto& g = self.inputs[0]->grad_buffer();
                           std::vector<double> ds(n);
                           for (std::size_t r = 0; r < rows; ++r) {
                             detail::softmax_row_backward(probs.data() + r * n, self.grad.data() + r * n, n, ds.data());
                             for (std::size_t j = 0; j < n; ++j) g[r * n + j] += ds[j];
                           }
                         });
}

/// Plain softmax of a rank-1 tensor.
inline Tensor softmax(const Tensor& logits) {
  detail::require_rank(logits, 1, "softmax");
  const std::size_t n = logits.numel();
  std::vector<double> out(n);
  if (!detail::masked_softmax_row(logits.data().data(), nullptr, n, out.data())) {
    throw ContractError("softmax of empty vector");
  }
  auto probs = out;
  return Tensor::from_op("softmax", logits.shape(), std::move(out), {logits.node()},
                         [n, probs = std::move(probs)](Node& self) {
                           auto& g = self.inputs[0]->grad_buffer();
                           std::vector<double> ds(n);
                           detail::softmax_row_backward(probs.data(), self.grad.data(), n, ds.data());
                           for (std::size_t j = 0; j < n; ++j) g[j] += ds[j];
                         });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::from_op("reshape", std::move(shape), std::move(out), {x.node()}, [](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

namespace detail {

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw IndexError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.shape()[i] != ref[i]) {
        throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " + shape_str(ref));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  const auto whole = detail::split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::vector<std::shared_ptr<Node>> inputs;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto sp = detail::split_axis(p.shape(), axis);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.data().data() + o * sp.extent * sp.inner, sp.extent * sp.inner,
                  out.data() + (o * whole.extent + off) * whole.inner);
    }
    offsets.push_back(off);
    off += sp.extent;
    inputs.push_back(p.node());
  }
  return Tensor::from_op("concat", out_shape, std::move(out), std::move(inputs),
                         [axis, whole, offsets = std::move(offsets)](Node& self) {
                           for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                             auto& in = self.inputs[k];
                             if (!in->requires_grad) continue;
                             const auto sp = detail::split_axis(in->shape, axis);
                             auto& g = in->grad_buffer();
                             for (std::size_t o = 0; o < sp.outer; ++o) {
                               const double* src = self.grad.data() + (o * whole.extent + offsets[k]) * whole.inner;
                               double* dst = g.data() + o * sp.extent * sp.inner;
                               for (std::size_t i = 0; i < sp.extent * sp.inner; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) throw IndexError("slice: axis " + std::to_string(axis) + " out of range");
  if (begin > end || end > x.shape()[axis]) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside extent " +
                     std::to_string(x.shape()[axis]));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const auto sp = detail::split_axis(x.shape(), axis);
  const std::size_t len = (end - begin) * sp.inner;
  std::vector<double> out(sp.outer * len);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(x.data().data() + (o * sp.extent + begin) * sp.inner, len, out.data() + o * len);
  }
  return Tensor::from_op("slice", std::move(out_shape), std::move(out), {x.node()}, [sp, begin, len](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = g.data() + (o * sp.extent + begin) * sp.inner;
      const double* src = self.grad.data() + o * len;
      for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
    }
  });
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) { return slice(x, 0, begin, end); }

/// Scalars (or one-element tensors) stacked into a rank-1 tensor.
inline Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  std::vector<Tensor> flat;
  flat.reserve(scalars.size());
  for (const auto& s : scalars) flat.push_back(reshape(s, {1}));
  return concat(flat, 0);
}

/// out[i] = x[indices[i]] row-wise; backward scatter-adds.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t rows = x.dim(0), c = x.dim(1);
  std::vector<double> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw IndexError("gather_rows: row " + std::to_string(indices[i]) + " out of range");
    std::copy_n(x.data().data() + indices[i] * c, c, out.data() + i * c);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return Tensor::from_op("gather_rows", {indices.size(), c}, std::move(out), {x.node()},
                         [c, idx = std::move(idx)](Node& self) {
                           auto& g = self.inputs[0]->grad_buffer();
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
                         });
}

/// out[g] = mean of x rows listed in groups[g].
inline Tensor group_mean_rows(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  detail::require_rank(x, 2, "group_mean_rows");
  const std::size_t rows = x.dim(0), c = x.dim(1);
  std::vector<double> out(groups.size() * c, 0.0);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    if (groups[gi].empty()) throw ContractError("group_mean_rows: empty group " + std::to_string(gi));
    const double inv = 1.0 / static_cast<double>(groups[gi].size());
    for (std::size_t r : groups[gi]) {
      if (r >= rows) throw IndexError("group_mean_rows: row " + std::to_string(r) + " out of range");
      for (std::size_t j = 0; j < c; ++j) out[gi * c + j] += x.data()[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[gi * c + j] *= inv;
  }
  return Tensor::from_op("group_mean_rows", {groups.size(), c}, std::move(out), {x.node()},
                         [c, groups](Node& self) {
                           auto& g = self.inputs[0]->grad_buffer();
                           for (std::size_t gi = 0; gi < groups.size(); ++gi) {
                             const double inv = 1.0 / static_cast<double>(groups[gi].size());
                             for (std::size_t r : groups[gi])
                               for (std::size_t j = 0; j < c; ++j) g[r * c + j] += inv * self.grad[gi * c + j];
                           }
                         });
}

/// Rows flagged in `replace` become a copy of `row` (rank-1, length cols).
inline Tensor replace_rows(const Tensor& x, std::span<const std::uint8_t> replace, const Tensor& row) {
  detail::require_rank(x, 2, "replace_rows");
  const std::size_t rows = x.dim(0), c = x.dim(1);
  if (replace.size() != rows) throw DimensionError("replace_rows: flag count differs from row count");
  if (row.numel() != c) throw DimensionError("replace_rows: replacement width differs from input width");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (replace[r]) std::copy_n(row.data().data(), c, out.data() + r * c);
  }
  std::vector<std::uint8_t> flags(replace.begin(), replace.end());
  return Tensor::from_op("replace_rows", x.shape(), std::move(out), {x.node(), row.node()},
                         [rows, c, flags = std::move(flags)](Node& self) {
                           auto& xn = self.inputs[0];
                           auto& mn = self.inputs[1];
                           for (std::size_t r = 0; r < rows; ++r) {
                             if (flags[r]) {
                               if (mn->requires_grad) {
                                 auto& g = mn->grad_buffer();
                                 for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[r * c + j];
                               }
                             } else if (xn->requires_grad) {
                               auto& g = xn->grad_buffer();
                               for (std::size_t j = 0; j < c; ++j) g[r * c + j] += self.grad[r * c + j];
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Rotary position embedding

/// cos/sin tables for integer positions; rotation pairs are adjacent
/// dimensions (2i, 2i+1) of each head with frequency base^(-2i/head_dim).
class RopeCache {
 public:
  RopeCache(std::size_t head_dim, double base = 10000.0) : head_dim_(head_dim), base_(base) {
    if (head_dim == 0 || head_dim % 2 != 0) throw ConfigError("rotary head width must be even and positive");
  }

  std::size_t head_dim() const { return head_dim_; }
  double base() const { return base_; }

  void ensure(std::size_t positions) {
    const std::size_t half = head_dim_ / 2;
    for (std::size_t p = cos_.size() / half; p < positions; ++p) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base_, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim_));
        const double angle = static_cast<double>(p) * freq;
        cos_.push_back(std::cos(angle));
        sin_.push_back(std::sin(angle));
      }
    }
  }
  std::size_t size() const { return cos_.size() / (head_dim_ / 2); }
  double cos(std::size_t pos, std::size_t i) const { return cos_[pos * (head_dim_ / 2) + i]; }
  double sin(std::size_t pos, std::size_t i) const { return sin_[pos * (head_dim_ / 2) + i]; }

 private:
  std::size_t head_dim_;
  double base_;
  std::vector<double> cos_, sin_;
};

/// Rotates each head slice of x[R x (heads*head_dim)] by its row position.
inline Tensor rope(const Tensor& x, std::span<const std::size_t> positions, const RopeCache& cache) {
  detail::require_rank(x, 2, "rope");
  const std::size_t rows = x.dim(0), width = x.dim(1), dh = cache.head_dim(), half = dh / 2;
  if (width % dh != 0) throw DimensionError("rope: width not a multiple of the head width");
  if (positions.size() != rows) throw DimensionError("rope: one position per row required");
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    if (positions[r] >= cache.size()) throw IndexError("rope: position beyond cache");
    for (std::size_t h = 0; h < width / dh; ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t a = r * width + h * dh + 2 * i;
        const double c = cache.cos(positions[r], i), s = cache.sin(positions[r], i);
        out[a] = x.data()[a] * c - x.data()[a + 1] * s;
        out[a + 1] = x.data()[a] * s + x.data()[a + 1] * c;
      }
    }
  }
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  return Tensor::from_op("rope", x.shape(), std::move(out), {x.node()},
                         [rows, width, dh, half, pos = std::move(pos), cache](Node& self) {
                           auto& g = self.inputs[0]->grad_buffer();
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t h = 0; h < width / dh; ++h)
                               for (std::size_t i = 0; i < half; ++i) {
                                 const std::size_t a = r * width + h * dh + 2 * i;
                                 const double c = cache.cos(pos[r], i), s = cache.sin(pos[r], i);
                                 g[a] += self.grad[a] * c + self.grad[a + 1] * s;
                                 g[a + 1] += -self.grad[a] * s + self.grad[a + 1] * c;
                               }
                         });
}

// ---------------------------------------------------------------------------
// Fused multi-head scaled dot-product attention

/// Attention probabilities recorded during a forward pass, one n x n matrix
/// per (sequence, head), stored at index sequence * heads + head.
struct AttentionCapture {
  std::size_t seq_len = 0;
  std::size_t heads = 0;
  std::vector<std::vector<double>> probs;
};

/// Which rows of the packed [rows x d] activations form each sequence, and
/// the (shared) mask applied inside every sequence.
struct AttentionLayout {
  std::size_t heads = 1;
  std::vector<std::vector<std::size_t>> sequences;
  std::shared_ptr<const BoolMatrix> mask;  // null: every entry allowed
};

/// softmax(Q K^T / sqrt(dh) masked) V per sequence and head. Q/K/V are
/// packed [rows x d]; output has the same layout.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout,
                        AttentionCapture* capture = nullptr) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  detail::require_rank(q, 2, "attention");
  const std::size_t d = q.dim(1), heads = layout.heads;
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by head count");
  const std::size_t dh = d / heads;
  const std::size_t n = layout.sequences.empty() ? 0 : layout.sequences.front().size();
  for (const auto& s : layout.sequences) {
    if (s.size() != n) throw DimensionError("attention: sequences must share one length");
    for (std::size_t r : s)
      if (r >= q.dim(0)) throw IndexError("attention: row index out of range");
  }
  if (layout.mask && layout.mask->n != n) throw DimensionError("attention: mask size differs from sequence length");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::uint8_t* mask = layout.mask ? layout.mask->allow.data() : nullptr;

  std::vector<double> out(q.numel(), 0.0);
  std::vector<double> probs(layout.sequences.size() * heads * n * n);
  std::vector<double> scores(n);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t s = 0; s < layout.sequences.size(); ++s) {
    const auto& rows = layout.sequences[s];
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs.data() + (s * heads + h) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = Q + rows[i] * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          if (mask && !mask[i * n + j]) {
            scores[j] = 0.0;
            continue;
          }
          const double* kj = K + rows[j] * d + h * dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          scores[j] = acc * inv_sqrt;
        }
        if (!detail::masked_softmax_row(scores.data(), mask ? mask + i * n : nullptr, n, P + i * n)) {
          throw ContractError("attention: row " + std::to_string(i) + " has no allowed entry (degenerate attention row)");
        }
        double* oi = out.data() + rows[i] * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          const double p = P[i * n + j];
          if (p == 0.0) continue;
          const double* vj = V + rows[j] * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  if (capture) {
    capture->seq_len = n;
    capture->heads = heads;
    capture->probs.clear();
    for (std::size_t t = 0; t < layout.sequences.size() * heads; ++t) {
      capture->probs.emplace_back(probs.begin() + t * n * n, probs.begin() + (t + 1) * n * n);
    }
  }
  auto sequences = layout.sequences;
  return Tensor::from_op(
      "attention", q.shape(), std::move(out), {q.node(), k.node(), v.node()},
      [d, dh, heads, n, inv_sqrt, sequences = std::move(sequences), probs = std::move(probs)](Node& self) {
        auto& qn = self.inputs[0];
        auto& kn = self.inputs[1];
        auto& vn = self.inputs[2];
        const double* Q = qn->value.data();
        const double* K = kn->value.data();
        const double* V = vn->value.data();
        const double* dO = self.grad.data();
        double* dQ = qn->requires_grad ? qn->grad_buffer().data() : nullptr;
        double* dK = kn->requires_grad ? kn->grad_buffer().data() : nullptr;
        double* dV = vn->requires_grad ? vn->grad_buffer().data() : nullptr;
        std::vector<double> dP(n), dS(n);
        for (std::size_t s = 0; s < sequences.size(); ++s) {
          const auto& rows = sequences[s];
          for (std::size_t h = 0; h < heads; ++h) {
            const double* P = probs.data() + (s * heads + h) * n * n;
            for (std::size_t i = 0; i < n; ++i) {
              const double* doi = dO + rows[i] * d + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                const double p = P[i * n + j];
                if (p == 0.0) {
                  dP[j] = 0.0;
                  continue;
                }
                const double* vj = V + rows[j] * d + h * dh;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                dP[j] = acc;
                if (dV) {
                  double* dvj = dV + rows[j] * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += p * doi[c];
                }
              }
              if (!dQ && !dK) continue;
              detail::softmax_row_backward(P + i * n, dP.data(), n, dS.data());
              const double* qi = Q + rows[i] * d + h * dh;
              for (std::size_t j = 0; j < n; ++j) {
                const double g = dS[j] * inv_sqrt;
                if (g == 0.0) continue;
                if (dQ) {
                  double* dqi = dQ + rows[i] * d + h * dh;
                  const double* kj = K + rows[j] * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += g * kj[c];
                }
                if (dK) {
                  double* dkj = dK + rows[j] * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += g * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace msft
