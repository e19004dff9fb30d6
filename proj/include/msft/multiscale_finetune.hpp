// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msft/backbone.hpp"
#include "msft/multiscale.hpp"

namespace msft {

enum class AdapterMode { specific, shared, frozen };
enum class MixingMode { weighted, average, none };

inline const char* to_string(AdapterMode m) {
  switch (m) {
    case AdapterMode::specific: return "specific";
    case AdapterMode::shared: return "shared";
    case AdapterMode::frozen: return "frozen";
  }
  return "?";
}
inline const char* to_string(MixingMode m) {
  switch (m) {
    case MixingMode::weighted: return "weighted";
    case MixingMode::average: return "average";
    case MixingMode::none: return "none";
  }
  return "?";
}
inline AdapterMode parse_adapter_mode(const std::string& s) {
  if (s == "specific") return AdapterMode::specific;
  if (s == "shared") return AdapterMode::shared;
  if (s == "frozen") return AdapterMode::frozen;
  throw ConfigError("unknown adapter mode '" + s + "' (specific|shared|frozen)");
}
inline MixingMode parse_mixing_mode(const std::string& s) {
  if (s == "weighted") return MixingMode::weighted;
  if (s == "average") return MixingMode::average;
  if (s == "none") return MixingMode::none;
  throw ConfigError("unknown mixing mode '" + s + "' (weighted|average|none)");
}

struct MsftOptions {
  ScaleSpec scales{2, 2};
  AdapterMode in_adapter = AdapterMode::specific;
  AdapterMode attn_adapter = AdapterMode::specific;  // per-scale LoRA on Q/K/V
  bool in_scale_mask = true;
  bool c2f = true;
  bool f2c = true;
  MixingMode mixing = MixingMode::weighted;
  bool aligned_positions = false;
  bool train_mask_token = false;
  std::size_t lora_rank = 0;  // 0 picks min(16, d), or 4 for d <= 64
  double lora_alpha = 32.0;

  std::size_t resolved_rank(std::size_t d) const {
    if (lora_rank) return lora_rank;
    return d <= 64 ? std::min<std::size_t>(4, d) : std::min<std::size_t>(16, d);
  }

  bool operator==(const MsftOptions&) const = default;
};

// ---------------------------------------------------------------------------
// Masks, positions and the packed multi-scale layout

/// allow(i, j) iff tokens i and j belong to the same scale.
inline BoolMatrix build_in_scale_mask(const ScaleIndexMap& map) {
  BoolMatrix m(map.total, false);
  for (const auto& sc : map.scales)
    for (std::size_t i = sc.begin(); i < sc.end(); ++i)
      for (std::size_t j = sc.begin(); j < sc.end(); ++j) m.set(i, j, true);
  return m;
}

/// Rotary positions per scale where every token takes the index of the
/// token it falls in on the coarsest scale's grid (context tokens first,
/// then horizon tokens), so co-temporal tokens share a rotation. The
/// coarsest scale keeps its own positions.
inline std::vector<std::vector<std::size_t>> aligned_positions(const AlignmentMap& align,
                                                               std::span<const TokenCounts> counts) {
  const std::size_t S = counts.size();
  std::vector<std::vector<std::size_t>> pos(S);
  if (S == 0) return pos;
  pos[S - 1].resize(counts[S - 1].total());
  for (std::size_t t = 0; t < pos[S - 1].size(); ++t) pos[S - 1][t] = t;
  for (std::size_t i = S - 1; i-- > 0;) {
    const auto& pa = align.pairs.at(i);
    const std::size_t nc_f = counts[i].context, nc_c = counts[i + 1].context;
    pos[i].resize(counts[i].total());
    for (std::size_t t = 0; t < nc_f; ++t) pos[i][t] = pos[i + 1][pa.context.parent[t]];
    for (std::size_t t = 0; t < counts[i].horizon; ++t) pos[i][nc_f + t] = pos[i + 1][nc_c + pa.horizon.parent[t]];
  }
  return pos;
}

/// Row bookkeeping of a batch packed scale-major: scale block i holds
/// B * N_i rows, sample-major, each sample's context tokens then horizon
/// tokens. Attention runs per sample over its sum_i N_i rows.
struct MultiScaleLayout {
  std::size_t batch = 0;
  std::vector<TokenCounts> counts;
  ScaleIndexMap index;                   // one sample's token axis
  AlignmentMap alignment;                // one sample's adjacent-scale maps
  std::vector<std::size_t> block_begin;  // first packed row of each scale block
  std::vector<std::size_t> block_rows;
  std::vector<RowAlignment> pair_rows;  // pair i over whole blocks (tiled)
  std::vector<std::size_t> positions;   // rotary position per packed row
  std::vector<std::vector<std::size_t>> horizon_rows;  // per scale
  std::vector<std::uint8_t> horizon_flags;             // per packed row
  AttentionLayout attn;
  std::size_t total_rows = 0;

  std::size_t scales() const { return counts.size(); }
  std::size_t row(std::size_t scale, std::size_t sample, std::size_t token) const {
    return block_begin[scale] + sample * counts[scale].total() + token;
  }
};

inline MultiScaleLayout build_layout(const MultiScaleSet& set, std::size_t patch, std::size_t batch, std::size_t heads,
                                     bool in_scale_mask, bool aligned) {
  MultiScaleLayout L;
  L.batch = batch;
  L.counts = token_counts(set, patch);
  L.index = build_scale_index_map(L.counts);
  L.alignment = build_alignment_map(set, patch);
  std::size_t off = 0;
  for (const auto& c : L.counts) {
    L.block_begin.push_back(off);
    L.block_rows.push_back(batch * c.total());
    off += batch * c.total();
  }
  L.total_rows = off;
  for (const auto& pa : L.alignment.pairs) L.pair_rows.push_back(tile(pair_rows(pa), batch));

  std::vector<std::vector<std::size_t>> local(L.scales());
  if (aligned) {
    local = aligned_positions(L.alignment, L.counts);
  } else {
    for (std::size_t i = 0; i < L.scales(); ++i)
      for (std::size_t t = 0; t < L.counts[i].total(); ++t) local[i].push_back(t);
  }
  L.positions.assign(L.total_rows, 0);
  L.horizon_flags.assign(L.total_rows, 0);
  L.horizon_rows.resize(L.scales());
  for (std::size_t i = 0; i < L.scales(); ++i) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < L.counts[i].total(); ++t) {
        const std::size_t r = L.row(i, b, t);
        L.positions[r] = local[i][t];
        if (t >= L.counts[i].context) {
          L.horizon_flags[r] = 1;
          L.horizon_rows[i].push_back(r);
        }
      }
    }
  }
  L.attn.heads = heads;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < L.scales(); ++i)
      for (std::size_t t = 0; t < L.counts[i].total(); ++t) rows.push_back(L.row(i, b, t));
    L.attn.sequences.push_back(std::move(rows));
  }
  if (in_scale_mask) L.attn.mask = std::make_shared<const BoolMatrix>(build_in_scale_mask(L.index));
  return L;
}

// ---------------------------------------------------------------------------
// Cross-scale aggregation

/// phi(h) = h·weight + bias, zero-initialized.
struct LinearMap {
  Tensor weight, bias;
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

/// Maps of one adjacent pair (fine scale i, coarse scale i+1) in one layer.
struct AggregatorPair {
  LinearMap coarse_to_fine;  // applied to the coarse state, repeated onto fine rows
  LinearMap fine_to_coarse;  // applied to the fine state, pooled onto coarse rows
};

/// Coarse-to-fine runs from the coarsest pair down, each step reading the
/// already-updated coarse state; fine-to-coarse runs upward likewise. The
/// result is the average of the two branch states.
inline std::vector<Tensor> cross_scale_aggregate(const std::vector<Tensor>& per_scale,
                                                 const std::vector<RowAlignment>& pairs,
                                                 const std::vector<AggregatorPair>& maps, bool c2f, bool f2c) {
  const std::size_t S = per_scale.size();
  if (pairs.size() + 1 != S && S > 0) throw AlignmentError("cross_scale_aggregate: need one alignment per adjacent pair");
  if (maps.size() + 1 != S && S > 0) throw ConfigError("cross_scale_aggregate: need one map pair per adjacent pair");
  if (!c2f && !f2c) return per_scale;
  std::vector<Tensor> down = per_scale, up = per_scale;
  if (c2f) {
    for (std::size_t i = S - 1; i >= 1; --i) {
      down[i - 1] = add(down[i - 1], token_repeat(maps[i - 1].coarse_to_fine(down[i]), pairs[i - 1]));
    }
  }
  if (f2c) {
    for (std::size_t i = 0; i + 1 < S; ++i) {
      up[i + 1] = add(up[i + 1], token_avgpool(maps[i].fine_to_coarse(up[i]), pairs[i]));
    }
  }
  std::vector<Tensor> out(S);
  for (std::size_t i = 0; i < S; ++i) out[i] = scale(add(down[i], up[i]), 0.5);
  return out;
}

inline std::vector<Tensor> split_blocks(const Tensor& packed, const MultiScaleLayout& L) {
  std::vector<Tensor> parts;
  for (std::size_t i = 0; i < L.scales(); ++i)
    parts.push_back(slice_rows(packed, L.block_begin[i], L.block_begin[i] + L.block_rows[i]));
  return parts;
}

// ---------------------------------------------------------------------------
// Mixing

inline Tensor mixing_weights(const Tensor& logits) { return softmax(logits); }

/// sum_i w_i * MSE_i with per-scale predictions [B x H_i] and flattened
/// targets of matching length.
inline Tensor msft_loss(const std::vector<Tensor>& preds, const std::vector<std::vector<double>>& targets,
                        const Tensor& weights) {
  if (preds.size() != targets.size() || weights.numel() != preds.size()) {
    throw ContractError("msft_loss: " + std::to_string(preds.size()) + " predictions, " +
                        std::to_string(targets.size()) + " targets, " + std::to_string(weights.numel()) + " weights");
  }
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].numel() != targets[i].size()) {
      throw ContractError("msft_loss: scale " + std::to_string(i) + " prediction has " +
                          std::to_string(preds[i].numel()) + " steps, target " + std::to_string(targets[i].size()));
    }
    losses.push_back(masked_mse(preds[i], targets[i]));
  }
  return dot(weights, stack_scalars(losses));
}

struct ForecastBundle {
  std::vector<std::vector<double>> per_scale;
  std::vector<double> weights;
  std::vector<double> mixed;  // length H
};

inline ForecastBundle msft_predict(std::vector<std::vector<double>> per_scale, std::vector<double> weights, std::size_t s,
                                   std::size_t H) {
  if (per_scale.size() != weights.size()) throw ContractError("msft_predict: one weight per scale required");
  ForecastBundle fb;
  fb.mixed.assign(H, 0.0);
  for (std::size_t i = 0; i < per_scale.size(); ++i) {
    const auto up = upsample_prediction(per_scale[i], s, i, H);
    for (std::size_t t = 0; t < H; ++t) fb.mixed[t] += weights[i] * up[t];
  }
  fb.per_scale = std::move(per_scale);
  fb.weights = std::move(weights);
  return fb;
}

// ---------------------------------------------------------------------------
// The finetuning module

struct MsftWeights {
  std::vector<LinearMap> adapters;                         // K+1, one when shared, none when frozen
  std::vector<std::vector<std::array<LoraPair, 3>>> lora;  // [layer][scale], one scale entry when shared
  std::vector<std::vector<AggregatorPair>> aggregators;    // [layer][pair]
  Tensor mix_logits;                                       // [K+1]
};

/// Registers the finetuning parameters under "msft.*": identity adapters,
/// LoRA with zero up-projection, zero aggregator maps, zero mixing logits.
inline MsftWeights init_msft(const BackboneConfig& bb, const MsftOptions& opt, Rng& rng, ParamStore& store) {
  opt.scales.validate();
  const std::size_t d = bb.d_model, S = opt.scales.num_scales();
  MsftWeights w;
  if (opt.in_adapter != AdapterMode::frozen) {
    const std::size_t n = opt.in_adapter == AdapterMode::shared ? 1 : S;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string p = "msft.adapter.s" + std::to_string(i);
      w.adapters.push_back({store.add(p + ".weight", Tensor::identity(d)), store.add(p + ".bias", Tensor::zeros({d}))});
    }
  }
  if (opt.attn_adapter != AdapterMode::frozen) {
    const std::size_t n = opt.attn_adapter == AdapterMode::shared ? 1 : S;
    const std::size_t r = opt.resolved_rank(d);
    static const char* names[3] = {"q", "k", "v"};
    for (std::size_t l = 0; l < bb.layers; ++l) {
      std::vector<std::array<LoraPair, 3>> per_scale;
      for (std::size_t i = 0; i < n; ++i) {
        std::array<LoraPair, 3> trio;
        for (int k = 0; k < 3; ++k) {
          trio[k] = make_lora(store, "msft.lora.layer" + std::to_string(l) + ".s" + std::to_string(i) + "." + names[k], d, r,
                              opt.lora_alpha, rng);
        }
        per_scale.push_back(std::move(trio));
      }
      w.lora.push_back(std::move(per_scale));
    }
  }
  if (opt.c2f || opt.f2c) {
    for (std::size_t l = 0; l < bb.layers; ++l) {
      std::vector<AggregatorPair> pairs;
      for (std::size_t i = 0; i + 1 < S; ++i) {
        const std::string p = "msft.agg.layer" + std::to_string(l) + ".p" + std::to_string(i);
        AggregatorPair ap;
        if (opt.c2f) {
          ap.coarse_to_fine = {store.add(p + ".c2f.weight", Tensor::zeros({d, d})), store.add(p + ".c2f.bias", Tensor::zeros({d}))};
        } else {
          ap.coarse_to_fine = {Tensor::zeros({d, d}), Tensor::zeros({d})};
        }
        if (opt.f2c) {
          ap.fine_to_coarse = {store.add(p + ".f2c.weight", Tensor::zeros({d, d})), store.add(p + ".f2c.bias", Tensor::zeros({d}))};
        } else {
          ap.fine_to_coarse = {Tensor::zeros({d, d}), Tensor::zeros({d})};
        }
        pairs.push_back(std::move(ap));
      }
      w.aggregators.push_back(std::move(pairs));
    }
  }
  if (opt.mixing == MixingMode::weighted) {
    w.mix_logits = store.add("msft.mix_logits", Tensor::zeros({S}));
  } else {
    w.mix_logits = Tensor::zeros({S});
  }
  return w;
}

struct MsftForward {
  std::vector<Tensor> per_scale;               // [B x H_i]
  std::vector<std::vector<double>> targets;    // flattened B x H_i (when the batch has horizons)
  Tensor weights;                              // [K+1]
  Tensor final_hidden;                         // packed [rows x d]
  MultiScaleLayout layout;
};

class MsftModel {
 public:
  MsftModel(const Backbone* backbone, MsftOptions opt, MsftWeights weights)
      : bb_(backbone), opt_(std::move(opt)), w_(std::move(weights)) {}

  const MsftOptions& options() const { return opt_; }
  const MsftWeights& weights() const { return w_; }

  Tensor mixing() const {
    if (opt_.mixing == MixingMode::none) {
      std::vector<double> w(opt_.scales.num_scales(), 0.0);
      w[0] = 1.0;
      return Tensor::vector(std::move(w));
    }
    return mixing_weights(w_.mix_logits);
  }

  /// Embeds each scale through the frozen projection, its adapter and the
  /// shared mask token, then concatenates the blocks in scale order.
  Tensor embed(const std::vector<Tensor>& scale_tokens, const MultiScaleLayout& L) const {
    const auto& bw = bb_->weights();
    std::vector<Tensor> blocks;
    for (std::size_t i = 0; i < scale_tokens.size(); ++i) {
      Tensor h = in_project(scale_tokens[i], bw.in_weight, bw.in_bias);
      if (!w_.adapters.empty()) {
        const auto& a = w_.adapters.size() == 1 ? w_.adapters[0] : w_.adapters.at(i);
        h = a(h);
      }
      std::vector<std::uint8_t> flags(L.horizon_flags.begin() + L.block_begin[i],
                                      L.horizon_flags.begin() + L.block_begin[i] + L.block_rows[i]);
      blocks.push_back(replace_rows(h, flags, bw.mask_token));
    }
    return concat(blocks, 0);
  }

  MsftForward forward(const Batch& batch, std::vector<AttentionCapture>* captures = nullptr) const {
    const auto& cfg = bb_->config();
    const std::size_t B = batch.size();
    if (B == 0) throw ContractError("msft forward on an empty batch");
    const std::size_t S = opt_.scales.num_scales();

    MsftForward out;
    std::vector<std::vector<double>> tok(S);
    std::optional<MultiScaleSet> first;
    if (batch.has_targets()) out.targets.assign(S, {});
    for (std::size_t b = 0; b < B; ++b) {
      std::optional<std::span<const double>> hz;
      if (batch.has_targets()) hz = batch.horizon_of(b);
      MultiScaleSet set = build_multiscale_set(batch.context_of(b), hz, batch.horizon_len, opt_.scales);
      for (std::size_t i = 0; i < S; ++i) {
        const auto seq = patchify(set[i].context, set[i].horizon_len, cfg.patch);
        tok[i].insert(tok[i].end(), seq.tokens.begin(), seq.tokens.end());
        if (batch.has_targets()) out.targets[i].insert(out.targets[i].end(), set[i].horizon.begin(), set[i].horizon.end());
      }
      if (!first) first = std::move(set);
    }
    out.layout = build_layout(*first, cfg.patch, B, cfg.heads, opt_.in_scale_mask, opt_.aligned_positions);
    const auto& L = out.layout;
    std::vector<Tensor> scale_tokens;
    for (std::size_t i = 0; i < S; ++i) scale_tokens.push_back(Tensor::matrix(L.block_rows[i], cfg.patch, std::move(tok[i])));

    std::size_t max_pos = 0;
    for (auto p : L.positions) max_pos = std::max(max_pos, p);
    bb_->rope().ensure(max_pos + 1);

    Tensor h = embed(scale_tokens, L);
    if (captures) captures->assign(cfg.layers, {});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      BlockHooks hooks;
      if (!w_.lora.empty()) {
        const auto& per_scale = w_.lora[l];
        hooks.adjust_projection = [&per_scale, &L](const Tensor& xn, Projection which, const Tensor& projected) {
          const int k = static_cast<int>(which);
          if (per_scale.size() == 1) return add(projected, per_scale[0][k].delta(xn));
          std::vector<Tensor> deltas;
          for (std::size_t i = 0; i < L.scales(); ++i) {
            deltas.push_back(per_scale.at(i)[k].delta(slice_rows(xn, L.block_begin[i], L.block_begin[i] + L.block_rows[i])));
          }
          return add(projected, concat(deltas, 0));
        };
      }
      if (!w_.aggregators.empty() && S > 1) {
        const auto& maps = w_.aggregators[l];
        const bool c2f = opt_.c2f, f2c = opt_.f2c;
        hooks.mix_context = [&maps, &L, c2f, f2c](const Tensor& ctx) {
          return concat(cross_scale_aggregate(split_blocks(ctx, L), L.pair_rows, maps, c2f, f2c), 0);
        };
      }
      h = attn_block(h, L.attn, L.positions, bb_->weights().layers[l], bb_->rope(), cfg.eps, &hooks,
                     captures ? &(*captures)[l] : nullptr);
    }
    const auto& bw = bb_->weights();
    out.final_hidden = layer_norm(h, bw.norm_gamma, bw.norm_beta, cfg.eps);
    for (std::size_t i = 0; i < S; ++i) {
      const std::size_t Hi = (*first)[i].horizon_len;
      out.per_scale.push_back(
          assemble_forecast(out_project(out.final_hidden, L.horizon_rows[i], bw.out_weight, bw.out_bias), B, Hi));
    }
    out.weights = mixing();
    return out;
  }

 private:
  const Backbone* bb_;
  MsftOptions opt_;
  MsftWeights w_;
};

}  // namespace msft
