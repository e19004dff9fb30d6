// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "msft/backbone.hpp"
#include "msft/multiscale_finetune.hpp"

namespace msft {

enum class Mode { zero_shot, full, linear_probe, lora, msft };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::zero_shot: return "zero_shot";
    case Mode::full: return "full";
    case Mode::linear_probe: return "linear_probe";
    case Mode::lora: return "lora";
    case Mode::msft: return "msft";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "zero_shot") return Mode::zero_shot;
  if (s == "full") return Mode::full;
  if (s == "linear_probe") return Mode::linear_probe;
  if (s == "lora") return Mode::lora;
  if (s == "msft") return Mode::msft;
  throw ConfigError("unknown mode '" + s + "' (zero_shot|full|linear_probe|lora|msft)");
}

struct ModelConfig {
  BackboneConfig backbone;
  Mode mode = Mode::zero_shot;
  MsftOptions msft;
  std::size_t lora_rank = 16;  // single-scale LoRA baseline, clamped to d
  double lora_alpha = 32.0;

  void validate() const {
    backbone.validate();
    msft.scales.validate();
    if (lora_rank == 0) throw ConfigError("lora_rank must be >= 1");
    if (mode == Mode::msft && msft.resolved_rank(backbone.d_model) > backbone.d_model) {
      throw ConfigError("msft_lora_rank exceeds d_model");
    }
  }
};

struct ForecastOutput {
  Tensor loss;                                 // training objective (defined when the batch has horizons)
  Tensor mixed;                                // [B x H] final forecast
  std::vector<Tensor> per_scale;               // msft only: [B x H_i]
  std::vector<double> weights;                 // msft only: mixing weights
};

/// The pretrained encoder plus whatever a finetuning mode adds, with the
/// mode's trainable partition applied to the parameter store.
class Forecaster {
 public:
  Forecaster(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng root(seed);
    Rng bb_rng = root.fork(1), ft_rng = root.fork(2);
    backbone_ = std::make_unique<Backbone>(cfg_.backbone, init_backbone(cfg_.backbone, bb_rng, store_));
    if (cfg_.mode == Mode::lora) {
      const std::size_t d = cfg_.backbone.d_model, r = std::min(cfg_.lora_rank, d);
      static const char* names[3] = {"q", "k", "v"};
      for (std::size_t l = 0; l < cfg_.backbone.layers; ++l) {
        std::array<LoraPair, 3> trio;
        for (int k = 0; k < 3; ++k)
          trio[k] = make_lora(store_, "lora.layer" + std::to_string(l) + "." + names[k], d, r, cfg_.lora_alpha, ft_rng);
        lora_.push_back(trio);
      }
    }
    if (cfg_.mode == Mode::msft) {
      msft_ = std::make_unique<MsftModel>(backbone_.get(), cfg_.msft, init_msft(cfg_.backbone, cfg_.msft, ft_rng, store_));
    }
    apply_partition();
  }

  Forecaster(const Forecaster&) = delete;
  Forecaster& operator=(const Forecaster&) = delete;

  const ModelConfig& config() const { return cfg_; }
  Mode mode() const { return cfg_.mode; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Backbone& backbone() const { return *backbone_; }
  const MsftModel* msft() const { return msft_.get(); }

  /// Whether `name` is updated in this model's mode.
  bool trainable_in_mode(const std::string& name) const {
    const bool backbone_param = name.rfind("backbone.", 0) == 0;
    switch (cfg_.mode) {
      case Mode::zero_shot: return false;
      case Mode::full: return backbone_param;
      case Mode::linear_probe: return is_head_param(name);
      case Mode::lora: return !backbone_param || is_head_param(name);
      case Mode::msft:
        if (!backbone_param) return true;
        if (name == "backbone.mask_token") return cfg_.msft.train_mask_token;
        return is_head_param(name) || is_norm_param(name);
    }
    return false;
  }

  void apply_partition() {
    for (auto& [name, t] : store_.entries()) t.set_requires_grad(trainable_in_mode(name));
  }

  ForecastOutput forward(const Batch& batch, std::vector<AttentionCapture>* captures = nullptr) const {
    ForecastOutput out;
    if (cfg_.mode == Mode::msft) {
      MsftForward f = msft_->forward(batch, captures);
      for (double w : f.weights.data()) out.weights.push_back(w);
      std::vector<Tensor> up;
      for (std::size_t i = 0; i < f.per_scale.size(); ++i) {
        up.push_back(scale(upsample_rows(f.per_scale[i], cfg_.msft.scales.s, i, batch.horizon_len),
                           out.weights[i]));
      }
      Tensor mixed = up[0];
      for (std::size_t i = 1; i < up.size(); ++i) mixed = add(mixed, up[i]);
      out.mixed = mixed;
      if (batch.has_targets()) out.loss = msft_loss(f.per_scale, f.targets, f.weights);
      out.per_scale = std::move(f.per_scale);
      return out;
    }
    std::vector<BlockHooks> hooks;
    if (!lora_.empty()) {
      for (const auto& trio : lora_) {
        BlockHooks h;
        h.adjust_projection = [&trio](const Tensor& xn, Projection which, const Tensor& projected) {
          return add(projected, trio[static_cast<int>(which)].delta(xn));
        };
        hooks.push_back(std::move(h));
      }
    }
    BackboneForward f = backbone_->forward(batch, hooks.empty() ? nullptr : &hooks, captures);
    out.mixed = f.forecast;
    if (batch.has_targets()) out.loss = masked_mse(f.forecast, batch.horizon);
    return out;
  }

  /// Mixed forecasts without graph construction, row-major [B x H].
  std::vector<double> predict(const Batch& batch) const {
    NoGradGuard guard;
    return forward(batch).mixed.values();
  }

  /// Per-step column repeat of [B x H_i] predictions onto [B x H].
  static Tensor upsample_rows(const Tensor& pred, std::size_t s, std::size_t i, std::size_t H) {
    const std::size_t B = pred.dim(0), Hi = pred.dim(1), factor = int_pow(s, i);
    if (Hi != ceil_div(H, factor)) throw ContractError("upsample: scale " + std::to_string(i) + " length mismatch");
    if (factor == 1) return pred;
    std::vector<std::size_t> idx;
    idx.reserve(B * H);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < H; ++t) idx.push_back(b * Hi + t / factor);
    return reshape(gather_rows(reshape(pred, {B * Hi, 1}), idx), {B, H});
  }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  std::unique_ptr<Backbone> backbone_;
  std::vector<std::array<LoraPair, 3>> lora_;
  std::unique_ptr<MsftModel> msft_;
};

}  // namespace msft
