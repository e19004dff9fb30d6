// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msft/numerics/ops.hpp"

namespace msft {

enum class PadSide { pre, post };

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

inline std::size_t int_pow(std::size_t base, std::size_t exp) {
  std::size_t r = 1;
  while (exp--) r *= base;
  return r;
}

/// Pads `x` with its edge value on `side` up to a multiple of `s`, then takes
/// non-overlapping window means of width `s`.
inline std::vector<double> avg_downsample(std::span<const double> x, std::size_t s, PadSide side) {
  if (s < 2) throw ConfigError("downsampling factor must be >= 2, got " + std::to_string(s));
  if (x.empty()) throw ContractError("avg_downsample of an empty series");
  const std::size_t out_len = ceil_div(x.size(), s);
  const std::size_t pad = out_len * s - x.size();
  std::vector<double> out(out_len);
  for (std::size_t k = 0; k < out_len; ++k) {
    double acc = 0.0;
    for (std::size_t u = k * s; u < (k + 1) * s; ++u) {
      if (side == PadSide::pre) {
        acc += u < pad ? x.front() : x[u - pad];
      } else {
        acc += u < x.size() ? x[u] : x.back();
      }
    }
    out[k] = acc / static_cast<double>(s);
  }
  return out;
}

struct ScaleSpec {
  std::size_t K = 2;  // number of added scales
  std::size_t s = 2;  // factor between adjacent scales

  void validate() const {
    if (s < 2) throw ConfigError("scale factor s must be >= 2, got " + std::to_string(s));
  }
  std::size_t num_scales() const { return K + 1; }
};

/// ceil(ceil(L / s) / s)... applied i times.
inline std::size_t chained_length(std::size_t L, std::size_t s, std::size_t i) {
  for (std::size_t k = 0; k < i; ++k) L = ceil_div(L, s);
  return L;
}

inline std::size_t direct_length(std::size_t L, std::size_t s, std::size_t i) { return ceil_div(L, int_pow(s, i)); }

struct ScaleView {
  std::vector<double> context;
  std::vector<double> horizon;  // empty at inference
  std::size_t horizon_len = 0;
  std::size_t context_pad = 0;  // edge steps pre-padded when pooling from the previous scale
  std::size_t horizon_pad = 0;  // edge steps post-padded when pooling from the previous scale
  std::size_t width = 1;        // original steps per step at this scale (s^i)
  std::int64_t context_start = 0;  // original time where step 0 begins; context ends at time 0
};

struct MultiScaleSet {
  ScaleSpec spec;
  std::vector<ScaleView> scales;

  std::size_t size() const { return scales.size(); }
  const ScaleView& operator[](std::size_t i) const { return scales.at(i); }
};

/// Chained generation: scale i is pooled from scale i-1 (contexts pre-padded,
/// horizons post-padded). The horizon values are optional; only the lengths
/// are needed at inference.
inline MultiScaleSet build_multiscale_set(std::span<const double> context, std::optional<std::span<const double>> horizon,
                                          std::size_t H, const ScaleSpec& spec) {
  spec.validate();
  if (context.empty()) throw ContractError("context must hold at least one step");
  if (H == 0) throw ContractError("horizon length must be >= 1");
  if (horizon && horizon->size() != H) throw ContractError("horizon values do not match horizon length");
  const std::size_t need = int_pow(spec.s, spec.K);
  if (context.size() < need) {
    for (std::size_t i = 1; i <= spec.K; ++i) {
      if (context.size() < int_pow(spec.s, i)) {
        throw ConfigError("context length " + std::to_string(context.size()) + " too short for scale " +
                          std::to_string(i) + " (needs >= " + std::to_string(int_pow(spec.s, i)) + ")");
      }
    }
  }
  MultiScaleSet set;
  set.spec = spec;
  ScaleView base;
  base.context.assign(context.begin(), context.end());
  if (horizon) base.horizon.assign(horizon->begin(), horizon->end());
  base.horizon_len = H;
  base.context_start = -static_cast<std::int64_t>(context.size());
  set.scales.push_back(std::move(base));
  for (std::size_t i = 1; i <= spec.K; ++i) {
    const ScaleView& prev = set.scales.back();
    ScaleView v;
    v.context = avg_downsample(prev.context, spec.s, PadSide::pre);
    v.context_pad = v.context.size() * spec.s - prev.context.size();
    v.horizon_len = ceil_div(prev.horizon_len, spec.s);
    v.horizon_pad = v.horizon_len * spec.s - prev.horizon_len;
    if (horizon) v.horizon = avg_downsample(prev.horizon, spec.s, PadSide::post);
    v.width = prev.width * spec.s;
    v.context_start = prev.context_start - static_cast<std::int64_t>(v.context_pad * prev.width);
    set.scales.push_back(std::move(v));
  }
  return set;
}

// ---------------------------------------------------------------------------
// Token index bookkeeping

struct TokenCounts {
  std::size_t context = 0;
  std::size_t horizon = 0;
  std::size_t total() const { return context + horizon; }
};

struct TokenRange {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
};

struct ScaleSpan {
  TokenRange context;
  TokenRange horizon;
  std::size_t begin() const { return context.begin; }
  std::size_t end() const { return horizon.end; }
  std::size_t size() const { return end() - begin(); }
};

/// Where each scale's context and horizon tokens sit on the concatenated
/// token axis (scale order 0..K, context before horizon).
struct ScaleIndexMap {
  std::vector<ScaleSpan> scales;
  std::size_t total = 0;

  std::size_t scale_of(std::size_t token) const {
    for (std::size_t i = 0; i < scales.size(); ++i)
      if (token >= scales[i].begin() && token < scales[i].end()) return i;
    throw IndexError("token " + std::to_string(token) + " outside the index map");
  }
  std::vector<std::size_t> local_positions() const {
    std::vector<std::size_t> pos(total);
    for (const auto& sc : scales)
      for (std::size_t t = sc.begin(); t < sc.end(); ++t) pos[t] = t - sc.begin();
    return pos;
  }
};

inline ScaleIndexMap build_scale_index_map(std::span<const TokenCounts> counts) {
  ScaleIndexMap map;
  std::size_t off = 0;
  for (const auto& c : counts) {
    if (c.context == 0 || c.horizon == 0) throw ContractError("every scale needs context and horizon tokens");
    ScaleSpan span;
    span.context = {off, off + c.context};
    span.horizon = {off + c.context, off + c.total()};
    off += c.total();
    map.scales.push_back(span);
  }
  map.total = off;
  return map;
}

inline std::vector<TokenCounts> token_counts(const MultiScaleSet& set, std::size_t patch) {
  std::vector<TokenCounts> counts;
  for (const auto& v : set.scales) counts.push_back({ceil_div(v.context.size(), patch), ceil_div(v.horizon_len, patch)});
  return counts;
}

// ---------------------------------------------------------------------------
// Temporal alignment between adjacent scales

/// fine -> coarse correspondence for one block of rows.
struct RowAlignment {
  std::size_t n_fine = 0;
  std::size_t n_coarse = 0;
  std::vector<std::size_t> parent;                 // size n_fine
  std::vector<std::vector<std::size_t>> children;  // size n_coarse

  void validate() const {
    if (parent.size() != n_fine || children.size() != n_coarse) throw AlignmentError("alignment sizes inconsistent");
    std::size_t covered = 0;
    for (std::size_t c = 0; c < n_coarse; ++c) {
      for (std::size_t f : children[c]) {
        if (f >= n_fine || parent[f] != c) throw AlignmentError("alignment parent/children disagree");
      }
      covered += children[c].size();
    }
    if (covered != n_fine) throw AlignmentError("alignment does not cover every fine row exactly once");
  }

  std::size_t max_fan_out() const {
    std::size_t m = 0;
    for (const auto& c : children) m = std::max(m, c.size());
    return m;
  }
};

/// Alignment of one adjacent pair (fine scale i, coarse scale i+1), per segment.
struct PairAlignment {
  RowAlignment context;
  RowAlignment horizon;
};

struct AlignmentMap {
  std::vector<PairAlignment> pairs;  // pairs[i]: scale i (fine) <-> scale i+1 (coarse)
};

struct TimeSpan {
  std::int64_t begin = 0, end = 0;
};

namespace detail {

// Token j covers patch-steps [j*P - pad, (j+1)*P - pad) of its scale; steps
// outside [0, len) are padding and extend the scale's regular time grid.
inline std::vector<TimeSpan> token_spans(std::size_t len, std::size_t patch, std::size_t width, std::int64_t start,
                                         bool pre_pad) {
  const std::size_t n = ceil_div(len, patch);
  const auto pad = static_cast<std::int64_t>(pre_pad ? n * patch - len : 0);
  const auto P = static_cast<std::int64_t>(patch);
  const auto w = static_cast<std::int64_t>(width);
  std::vector<TimeSpan> spans(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::int64_t first = static_cast<std::int64_t>(j) * P - pad;
    spans[j] = {start + first * w, start + (first + P) * w};
  }
  return spans;
}

// Parent = coarse token with the largest overlap; ties go to the earlier token.
inline RowAlignment align_spans(const std::vector<TimeSpan>& fine, const std::vector<TimeSpan>& coarse) {
  RowAlignment a;
  a.n_fine = fine.size();
  a.n_coarse = coarse.size();
  a.parent.resize(fine.size());
  a.children.resize(coarse.size());
  for (std::size_t f = 0; f < fine.size(); ++f) {
    std::int64_t best = -1;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < coarse.size(); ++c) {
      const std::int64_t ov = std::min(fine[f].end, coarse[c].end) - std::max(fine[f].begin, coarse[c].begin);
      if (ov > best) {
        best = ov;
        arg = c;
      }
    }
    if (best <= 0) throw AlignmentError("fine token " + std::to_string(f) + " overlaps no coarse token");
    a.parent[f] = arg;
    a.children[arg].push_back(f);
  }
  return a;
}

}  // namespace detail

/// Token correspondence between adjacent scales from absolute time spans.
/// Contexts end at time 0 (pre-padding extends them to the left); horizons
/// start at time 0 (post-padding extends them to the right).
inline AlignmentMap build_alignment_map(const MultiScaleSet& set, std::size_t patch) {
  AlignmentMap map;
  for (std::size_t i = 0; i + 1 < set.size(); ++i) {
    const auto& f = set[i];
    const auto& c = set[i + 1];
    PairAlignment pa;
    pa.context = detail::align_spans(detail::token_spans(f.context.size(), patch, f.width, f.context_start, true),
                                     detail::token_spans(c.context.size(), patch, c.width, c.context_start, true));
    pa.horizon = detail::align_spans(detail::token_spans(f.horizon_len, patch, f.width, 0, false),
                                     detail::token_spans(c.horizon_len, patch, c.width, 0, false));
    for (const auto* seg : {&pa.context, &pa.horizon}) {
      for (const auto& ch : seg->children)
        if (ch.empty()) throw AlignmentError("coarse token without fine tokens between scales " + std::to_string(i) +
                                             " and " + std::to_string(i + 1));
    }
    map.pairs.push_back(std::move(pa));
  }
  return map;
}

/// Context and horizon segments of a pair as one block: fine rows are
/// [context | horizon] of scale i, coarse rows [context | horizon] of scale
/// i+1. No fine row ever maps across the segment boundary.
inline RowAlignment pair_rows(const PairAlignment& pa) {
  RowAlignment r;
  r.n_fine = pa.context.n_fine + pa.horizon.n_fine;
  r.n_coarse = pa.context.n_coarse + pa.horizon.n_coarse;
  r.parent = pa.context.parent;
  for (std::size_t p : pa.horizon.parent) r.parent.push_back(p + pa.context.n_coarse);
  r.children = pa.context.children;
  for (const auto& ch : pa.horizon.children) {
    std::vector<std::size_t> shifted;
    for (std::size_t f : ch) shifted.push_back(f + pa.context.n_fine);
    r.children.push_back(std::move(shifted));
  }
  return r;
}

/// The same alignment repeated for `copies` consecutive blocks (batching).
inline RowAlignment tile(const RowAlignment& a, std::size_t copies) {
  RowAlignment r;
  r.n_fine = a.n_fine * copies;
  r.n_coarse = a.n_coarse * copies;
  for (std::size_t b = 0; b < copies; ++b) {
    for (std::size_t p : a.parent) r.parent.push_back(p + b * a.n_coarse);
    for (const auto& ch : a.children) {
      std::vector<std::size_t> shifted;
      for (std::size_t f : ch) shifted.push_back(f + b * a.n_fine);
      r.children.push_back(std::move(shifted));
    }
  }
  return r;
}

/// Copies each coarse row onto every fine row it covers.
inline Tensor token_repeat(const Tensor& coarse, const RowAlignment& align) {
  if (coarse.rank() != 2 || coarse.dim(0) != align.n_coarse) {
    throw AlignmentError("token_repeat: " + std::to_string(coarse.rank() == 2 ? coarse.dim(0) : 0) +
                         " coarse rows, alignment expects " + std::to_string(align.n_coarse));
  }
  if (align.parent.size() != align.n_fine) throw AlignmentError("token_repeat: alignment fan-outs do not cover fine rows");
  return gather_rows(coarse, align.parent);
}

/// Each coarse row becomes the mean of the fine rows it covers.
inline Tensor token_avgpool(const Tensor& fine, const RowAlignment& align) {
  if (fine.rank() != 2 || fine.dim(0) != align.n_fine) {
    throw AlignmentError("token_avgpool: " + std::to_string(fine.rank() == 2 ? fine.dim(0) : 0) +
                         " fine rows, alignment expects " + std::to_string(align.n_fine));
  }
  if (align.children.size() != align.n_coarse) throw AlignmentError("token_avgpool: alignment group count mismatch");
  return group_mean_rows(fine, align.children);
}

/// Repeats each step s^i times and truncates to H (drops the post-pad).
inline std::vector<double> upsample_prediction(std::span<const double> pred, std::size_t s, std::size_t i, std::size_t H) {
  const std::size_t factor = int_pow(s, i);
  if (pred.size() != ceil_div(H, factor)) {
    throw ContractError("upsample_prediction: scale " + std::to_string(i) + " prediction has " +
                        std::to_string(pred.size()) + " steps, expected " + std::to_string(ceil_div(H, factor)));
  }
  std::vector<double> out(H);
  for (std::size_t t = 0; t < H; ++t) out[t] = pred[t / factor];
  return out;
}

}  // namespace msft
