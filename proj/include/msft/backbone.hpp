// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msft/multiscale.hpp"
#include "msft/numerics/gradcheck.hpp"
#include "msft/numerics/ops.hpp"
#include "msft/numerics/rng.hpp"

namespace msft {

struct BackboneConfig {
  std::size_t layers = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t patch = 16;
  std::size_t ffn_mult = 2;
  double eps = 1e-5;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t ffn_dim() const { return d_model * ffn_mult; }

  void validate() const {
    if (layers == 0) throw ConfigError("layers must be >= 1");
    if (patch == 0) throw ConfigError("patch must be >= 1");
    if (heads == 0 || d_model == 0 || d_model % heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
    }
    if (head_dim() % 2 != 0) throw ConfigError("head width " + std::to_string(head_dim()) + " must be even");
    if (ffn_mult == 0) throw ConfigError("ffn_mult must be >= 1");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  }

  bool operator==(const BackboneConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter registry

/// Named parameters in registration order. Copies of a Tensor share storage,
/// so handles taken from the store stay valid; loading writes in place.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor& get(const std::string& name) { return const_cast<Tensor&>(std::as_const(*this).get(name)); }

  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<NamedTensor> trainable() const {
    std::vector<NamedTensor> out;
    for (const auto& e : entries_)
      if (e.second.requires_grad()) out.push_back(e);
    return out;
  }
  std::vector<std::string> frozen_names() const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (!e.second.requires_grad()) out.push_back(e.first);
    return out;
  }

  void freeze_all() {
    for (auto& e : entries_) e.second.set_requires_grad(false);
  }
  void set_trainable(const std::string& name, bool on = true) { get(name).set_requires_grad(on); }
  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  /// Deep copy of all values (snapshot for early stopping).
  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> s;
    for (const auto& e : entries_) s.push_back(e.second.values());
    return s;
  }
  void restore(const std::vector<std::vector<double>>& s) {
    if (s.size() != entries_.size()) throw ContractError("snapshot does not match parameter store");
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto dst = entries_[i].second.mutable_data();
      if (dst.size() != s[i].size()) throw ContractError("snapshot extent mismatch for " + entries_[i].first);
      std::copy(s[i].begin(), s[i].end(), dst.begin());
    }
  }

 private:
  std::vector<NamedTensor> entries_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Patching

struct PatchSequence {
  std::vector<double> tokens;  // N x P, row-major
  std::size_t patch = 0;
  std::size_t n_context = 0;
  std::size_t n_horizon = 0;
  std::size_t context_pad = 0;  // steps pre-padded in the first context token
  std::size_t horizon_pad = 0;  // steps post-padded in the last horizon token
  double pad_value = 0.0;

  std::size_t size() const { return n_context + n_horizon; }
  TokenRange horizon_span() const { return {n_context, n_context + n_horizon}; }
};

/// Context right-aligned into ceil(C/P) tokens (the first pre-padded with
/// `pad_value`), followed by ceil(H/P) zero placeholder tokens.
inline PatchSequence patchify(std::span<const double> context, std::size_t H, std::size_t P, double pad_value) {
  if (P == 0) throw ConfigError("patch size must be >= 1");
  if (context.empty()) throw ContractError("patchify: context must hold at least one step");
  if (H == 0) throw ContractError("patchify: horizon length must be >= 1");
  PatchSequence seq;
  seq.patch = P;
  seq.n_context = ceil_div(context.size(), P);
  seq.n_horizon = ceil_div(H, P);
  seq.context_pad = seq.n_context * P - context.size();
  seq.horizon_pad = seq.n_horizon * P - H;
  seq.pad_value = pad_value;
  seq.tokens.assign(seq.size() * P, 0.0);
  for (std::size_t u = 0; u < seq.n_context * P; ++u) {
    seq.tokens[u] = u < seq.context_pad ? pad_value : context[u - seq.context_pad];
  }
  return seq;
}

inline PatchSequence patchify(std::span<const double> context, std::size_t H, std::size_t P) {
  if (context.empty()) throw ContractError("patchify: context must hold at least one step");
  return patchify(context, H, P, context.front());
}

// ---------------------------------------------------------------------------
// Backbone pieces

inline Tensor in_project(const Tensor& tokens, const Tensor& weight, const Tensor& bias) {
  if (tokens.rank() != 2 || tokens.dim(1) != weight.dim(0)) {
    throw DimensionError("in_project: token width " + std::to_string(tokens.cols()) + " vs projection input " +
                         std::to_string(weight.dim(0)));
  }
  return linear(tokens, weight, bias);
}

/// Rows in `span` are replaced by the mask embedding.
inline Tensor apply_mask_token(const Tensor& h, TokenRange span, const Tensor& mask_token) {
  if (span.size() == 0) throw ContractError("apply_mask_token: empty horizon span");
  if (span.end > h.dim(0)) throw IndexError("apply_mask_token: span beyond sequence");
  std::vector<std::uint8_t> flags(h.dim(0), 0);
  for (std::size_t r = span.begin; r < span.end; ++r) flags[r] = 1;
  return replace_rows(h, flags, mask_token);
}

struct LayerWeights {
  Tensor norm1_gamma, norm1_beta;
  Tensor wq, wk, wv, wo;
  Tensor norm2_gamma, norm2_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

enum class Projection { query = 0, key = 1, value = 2 };

/// Extension points of an attention block. `adjust_projection` may modify
/// xn·W for Q/K/V (low-rank deltas); `mix_context` rewrites the attention
/// context before the output projection.
struct BlockHooks {
  std::function<Tensor(const Tensor& xn, Projection which, const Tensor& projected)> adjust_projection;
  std::function<Tensor(const Tensor& context)> mix_context;
};

/// Pre-norm block: h + W_O(attn(LN(h))), then + FFN(LN(.)).
inline Tensor attn_block(const Tensor& h, const AttentionLayout& layout, std::span<const std::size_t> positions,
                         const LayerWeights& w, const RopeCache& rope_cache, double eps, const BlockHooks* hooks = nullptr,
                         AttentionCapture* capture = nullptr) {
  const Tensor xn = layer_norm(h, w.norm1_gamma, w.norm1_beta, eps);
  auto project = [&](const Tensor& weight, Projection which) {
    Tensor p = matmul(xn, weight);
    if (hooks && hooks->adjust_projection) p = hooks->adjust_projection(xn, which, p);
    return p;
  };
  const Tensor q = rope(project(w.wq, Projection::query), positions, rope_cache);
  const Tensor k = rope(project(w.wk, Projection::key), positions, rope_cache);
  const Tensor v = project(w.wv, Projection::value);
  Tensor ctx = attention(q, k, v, layout, capture);
  if (hooks && hooks->mix_context) ctx = hooks->mix_context(ctx);
  const Tensor h1 = add(h, matmul(ctx, w.wo));
  const Tensor x2 = layer_norm(h1, w.norm2_gamma, w.norm2_beta, eps);
  const Tensor f = linear(gelu(linear(x2, w.ffn_w1, w.ffn_b1)), w.ffn_w2, w.ffn_b2);
  return add(h1, f);
}

/// Per-token d -> P map of the rows listed in `horizon_rows`.
inline Tensor out_project(const Tensor& hidden, std::span<const std::size_t> horizon_rows, const Tensor& weight,
                          const Tensor& bias) {
  if (horizon_rows.empty()) throw ContractError("out_project: empty horizon span");
  return linear(gather_rows(hidden, horizon_rows), weight, bias);
}

/// Flattens per-sample patch predictions [B*n_tok x P] into [B x H],
/// dropping the post-pad steps of each sample's last token.
inline Tensor assemble_forecast(const Tensor& patches, std::size_t batch, std::size_t H) {
  const std::size_t P = patches.dim(1);
  const std::size_t n_tok = patches.dim(0) / batch;
  if (n_tok * batch != patches.dim(0) || n_tok * P < H || (n_tok - 1) * P >= H) {
    throw DimensionError("assemble_forecast: " + shape_str(patches.shape()) + " does not hold " +
                         std::to_string(batch) + " horizons of " + std::to_string(H));
  }
  std::vector<std::size_t> keep;
  keep.reserve(batch * H);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < H; ++t) keep.push_back(b * n_tok * P + t);
  const Tensor flat = reshape(patches, {patches.numel(), 1});
  return reshape(gather_rows(flat, keep), {batch, H});
}

inline Tensor reconstruction_loss(const Tensor& pred, std::span<const double> target,
                                  std::span<const std::uint8_t> keep = {}) {
  return masked_mse(pred, target, keep);
}

// ---------------------------------------------------------------------------
// Batches

/// B windows of equal context length C and horizon length H, row-major.
/// `horizon` may be empty at inference.
struct Batch {
  std::size_t context_len = 0;
  std::size_t horizon_len = 0;
  std::vector<double> context;
  std::vector<double> horizon;

  std::size_t size() const { return context_len ? context.size() / context_len : 0; }
  std::span<const double> context_of(std::size_t b) const {
    return std::span<const double>(context).subspan(b * context_len, context_len);
  }
  std::span<const double> horizon_of(std::size_t b) const {
    return std::span<const double>(horizon).subspan(b * horizon_len, horizon_len);
  }
  bool has_targets() const { return horizon.size() == size() * horizon_len && !horizon.empty(); }
};

// ---------------------------------------------------------------------------
// The encoder forecaster

struct BackboneWeights {
  Tensor in_weight, in_bias;
  Tensor mask_token;
  std::vector<LayerWeights> layers;
  Tensor norm_gamma, norm_beta;
  Tensor out_weight, out_bias;
};

namespace detail {

inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> v(rows * cols);
  for (double& x : v) x = stddev * rng.normal();
  return Tensor::matrix(rows, cols, std::move(v));
}

}  // namespace detail

/// Registers every backbone parameter under "backbone.*" in `store`.
/// Projections ~ N(0, 1/fan_in); the residual-branch outputs (W_O and the
/// second FFN layer) are further scaled by 1/sqrt(2L).
inline BackboneWeights init_backbone(const BackboneConfig& cfg, Rng& rng, ParamStore& store) {
  cfg.validate();
  const std::size_t d = cfg.d_model, P = cfg.patch, f = cfg.ffn_dim();
  const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.layers));
  BackboneWeights w;
  w.in_weight = store.add("backbone.in_proj.weight", detail::random_matrix(rng, P, d, 1.0 / std::sqrt(double(P))));
  w.in_bias = store.add("backbone.in_proj.bias", Tensor::zeros({d}));
  w.mask_token = store.add("backbone.mask_token", reshape(detail::random_matrix(rng, 1, d, 0.02), {d}).detach());
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "backbone.layer" + std::to_string(l) + ".";
    const double s_d = 1.0 / std::sqrt(double(d)), s_f = 1.0 / std::sqrt(double(f));
    LayerWeights lw;
    lw.norm1_gamma = store.add(p + "norm1.gamma", Tensor::full({d}, 1.0));
    lw.norm1_beta = store.add(p + "norm1.beta", Tensor::zeros({d}));
    lw.wq = store.add(p + "attn.wq", detail::random_matrix(rng, d, d, s_d));
    lw.wk = store.add(p + "attn.wk", detail::random_matrix(rng, d, d, s_d));
    lw.wv = store.add(p + "attn.wv", detail::random_matrix(rng, d, d, s_d));
    lw.wo = store.add(p + "attn.wo", detail::random_matrix(rng, d, d, s_d * resid));
    lw.norm2_gamma = store.add(p + "norm2.gamma", Tensor::full({d}, 1.0));
    lw.norm2_beta = store.add(p + "norm2.beta", Tensor::zeros({d}));
    lw.ffn_w1 = store.add(p + "ffn.w1", detail::random_matrix(rng, d, f, s_d));
    lw.ffn_b1 = store.add(p + "ffn.b1", Tensor::zeros({f}));
    lw.ffn_w2 = store.add(p + "ffn.w2", detail::random_matrix(rng, f, d, s_f * resid));
    lw.ffn_b2 = store.add(p + "ffn.b2", Tensor::zeros({d}));
    w.layers.push_back(std::move(lw));
  }
  w.norm_gamma = store.add("backbone.norm_f.gamma", Tensor::full({d}, 1.0));
  w.norm_beta = store.add("backbone.norm_f.beta", Tensor::zeros({d}));
  w.out_weight = store.add("backbone.out_proj.weight", detail::random_matrix(rng, d, P, 1.0 / std::sqrt(double(d))));
  w.out_bias = store.add("backbone.out_proj.bias", Tensor::zeros({P}));
  return w;
}

inline bool is_norm_param(const std::string& name) {
  return name.find(".norm1.") != std::string::npos || name.find(".norm2.") != std::string::npos ||
         name.find(".norm_f.") != std::string::npos;
}

inline bool is_head_param(const std::string& name) { return name.rfind("backbone.out_proj.", 0) == 0; }

struct BackboneForward {
  Tensor forecast;      // [B x H]
  Tensor final_hidden;  // [B*N x d] after the final norm
  std::size_t tokens_per_sample = 0;
  std::size_t context_tokens = 0;
};

/// Forecasts a batch of single-scale windows: tokens of each window attend
/// to each other (no mask), positions 0..N-1 in raw token order.
class Backbone {
 public:
  Backbone(BackboneConfig cfg, BackboneWeights weights)
      : cfg_(std::move(cfg)), w_(std::move(weights)), rope_(std::make_shared<RopeCache>(cfg_.head_dim(), cfg_.rope_base)) {}

  const BackboneConfig& config() const { return cfg_; }
  const BackboneWeights& weights() const { return w_; }
  RopeCache& rope() const { return *rope_; }

  /// Patch tokens [B*N x P] of a batch (context pre-padded with each
  /// window's first value, horizon placeholders zero).
  Tensor tokens(const Batch& batch, std::size_t* n_context = nullptr, std::size_t* n_total = nullptr) const {
    std::vector<double> all;
    std::size_t nc = 0, nt = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto seq = patchify(batch.context_of(b), batch.horizon_len, cfg_.patch);
      nc = seq.n_context;
      nt = seq.size();
      all.insert(all.end(), seq.tokens.begin(), seq.tokens.end());
    }
    if (n_context) *n_context = nc;
    if (n_total) *n_total = nt;
    return Tensor::matrix(batch.size() * nt, cfg_.patch, std::move(all));
  }

  /// `block_outputs`, when given, receives the output of every block.
  BackboneForward forward(const Batch& batch, const std::vector<BlockHooks>* hooks = nullptr,
                          std::vector<AttentionCapture>* captures = nullptr,
                          std::vector<Tensor>* block_outputs = nullptr) const {
    if (batch.size() == 0) throw ContractError("backbone forward on an empty batch");
    if (hooks && hooks->size() != cfg_.layers) throw ConfigError("one hook set per layer required");
    std::size_t nc = 0, n = 0;
    const Tensor tok = tokens(batch, &nc, &n);
    const std::size_t B = batch.size();

    std::vector<std::uint8_t> horizon_flags(B * n, 0);
    std::vector<std::size_t> positions(B * n), horizon_rows;
    AttentionLayout layout;
    layout.heads = cfg_.heads;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<std::size_t> rows;
      for (std::size_t t = 0; t < n; ++t) {
        rows.push_back(b * n + t);
        positions[b * n + t] = t;
        if (t >= nc) {
          horizon_flags[b * n + t] = 1;
          horizon_rows.push_back(b * n + t);
        }
      }
      layout.sequences.push_back(std::move(rows));
    }
    rope_->ensure(n);

    Tensor h = replace_rows(in_project(tok, w_.in_weight, w_.in_bias), horizon_flags, w_.mask_token);
    if (captures) captures->assign(cfg_.layers, {});
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      h = attn_block(h, layout, positions, w_.layers[l], *rope_, cfg_.eps, hooks ? &(*hooks)[l] : nullptr,
                     captures ? &(*captures)[l] : nullptr);
      if (block_outputs) block_outputs->push_back(h);
    }
    BackboneForward out;
    out.final_hidden = layer_norm(h, w_.norm_gamma, w_.norm_beta, cfg_.eps);
    out.forecast = assemble_forecast(out_project(out.final_hidden, horizon_rows, w_.out_weight, w_.out_bias), B,
                                     batch.horizon_len);
    out.tokens_per_sample = n;
    out.context_tokens = nc;
    return out;
  }

 private:
  BackboneConfig cfg_;
  BackboneWeights w_;
  std::shared_ptr<RopeCache> rope_;
};

// ---------------------------------------------------------------------------
// Low-rank adaptation

/// x·down·up·(alpha/rank) added to a frozen projection; `down` [d x r] is
/// uniform in ±1/sqrt(d), `up` [r x d] starts at zero.
struct LoraPair {
  Tensor down, up;
  double scaling = 1.0;

  Tensor delta(const Tensor& x) const { return scale(matmul(matmul(x, down), up), scaling); }
};

inline LoraPair make_lora(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t rank, double alpha,
                          Rng& rng) {
  if (rank == 0 || rank > d) {
    throw ConfigError("LoRA rank " + std::to_string(rank) + " must lie in [1, " + std::to_string(d) + "]");
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> a(d * rank);
  for (double& x : a) x = rng.uniform(-bound, bound);
  LoraPair p;
  p.down = store.add(prefix + ".down", Tensor::matrix(d, rank, std::move(a)));
  p.up = store.add(prefix + ".up", Tensor::zeros({rank, d}));
  p.scaling = alpha / static_cast<double>(rank);
  return p;
}

}  // namespace msft
