// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "msft/training/trainer.hpp"

namespace msft {

/// One named configuration of the finetuning toggles.
struct AblationVariant {
  std::string name;
  std::string description;
  MsftOptions options;
};

/// The ten ablation configurations: adapters frozen or shared (1-4),
/// aggregation branches removed (5-7), plain concatenated attention (8),
/// scale-0-only prediction (9) and averaged mixing (10).
inline std::vector<AblationVariant> standard_ablations(const MsftOptions& base) {
  std::vector<AblationVariant> v;
  auto add = [&](std::string name, std::string desc, auto edit) {
    MsftOptions o = base;
    edit(o);
    v.push_back({std::move(name), std::move(desc), o});
  };
  add("in_adapter_frozen", "input adapters frozen", [](MsftOptions& o) { o.in_adapter = AdapterMode::frozen; });
  add("in_adapter_shared", "one input adapter shared by all scales", [](MsftOptions& o) { o.in_adapter = AdapterMode::shared; });
  add("attn_adapter_frozen", "no LoRA on attention", [](MsftOptions& o) { o.attn_adapter = AdapterMode::frozen; });
  add("attn_adapter_shared", "one LoRA set shared by all scales", [](MsftOptions& o) { o.attn_adapter = AdapterMode::shared; });
  add("no_aggregators", "in-scale mask without cross-scale aggregation", [](MsftOptions& o) { o.c2f = o.f2c = false; });
  add("no_c2f", "fine-to-coarse branch only", [](MsftOptions& o) { o.c2f = false; });
  add("no_f2c", "coarse-to-fine branch only", [](MsftOptions& o) { o.f2c = false; });
  add("naive_attention", "no in-scale mask and no aggregation", [](MsftOptions& o) {
    o.in_scale_mask = false;
    o.c2f = o.f2c = false;
  });
  add("no_mixing", "original scale only", [](MsftOptions& o) { o.mixing = MixingMode::none; });
  add("average_mixing", "uniform scale weights", [](MsftOptions& o) { o.mixing = MixingMode::average; });
  return v;
}

struct AblationResult {
  std::string name;
  MsftOptions options;
  FinetuneResult train;
  EvalResult test;
  std::vector<double> probe;  // forecasts of a fixed probe batch
};

/// Finetunes and evaluates each variant from the same pretrained backbone
/// with the same seed. An empty variant list runs the base configuration.
inline std::vector<AblationResult> ablation_run(const ModelConfig& base, const ParamStore& pretrained,
                                                const SplitDatasets& data, const TrainConfig& train,
                                                std::vector<AblationVariant> variants, std::size_t season = 1,
                                                std::size_t test_stride = 1, std::size_t probe_windows = 4) {
  if (variants.empty()) variants.push_back({"msft", "full configuration", base.msft});
  std::vector<std::size_t> probe_idx;
  for (std::size_t i = 0; i < std::min(probe_windows, data.test.size()); ++i) probe_idx.push_back(i);
  const Batch probe = data.test.batch(probe_idx);
  std::vector<AblationResult> out;
  for (const auto& v : variants) {
    ModelConfig cfg = base;
    cfg.mode = Mode::msft;
    cfg.msft = v.options;
    Forecaster model(cfg, train.seed);
    copy_backbone(pretrained, model.params());
    AblationResult r;
    r.name = v.name;
    r.options = v.options;
    r.train = finetune(model, data.train, data.val, train);
    r.test = evaluate(model, data.test, season, test_stride);
    r.probe = model.predict(probe);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace msft
