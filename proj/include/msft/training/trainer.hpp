// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "msft/data.hpp"
#include "msft/model.hpp"
#include "msft/training/metrics.hpp"
#include "msft/training/optim.hpp"

namespace msft {

struct TrainConfig {
  OptimConfig optim;
  std::size_t batch_size = 16;
  std::size_t max_steps = 2000;  // hard cap on optimizer steps
  std::size_t epochs = 10;
  std::size_t steps_per_epoch = 50;
  std::size_t patience = 3;
  std::uint64_t seed = 0;
  std::size_t eval_stride = 1;  // validation uses every eval_stride-th window
  std::size_t log_every = 10;

  void validate() const {
    optim.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (patience == 0) throw ConfigError("patience must be >= 1");
    if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch must be >= 1");
    if (eval_stride == 0) throw ConfigError("eval_stride must be >= 1");
    if (log_every == 0) throw ConfigError("log_every must be >= 1");
  }
};

struct LogRow {
  std::size_t step = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> weights;
};

inline std::vector<std::size_t> sample_indices(Rng& rng, std::size_t n, std::size_t count) {
  if (n == 0) throw ContractError("cannot sample from an empty dataset");
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
  return idx;
}

/// Mean squared error of the final forecast over the listed windows.
inline double forecast_mse(const Forecaster& model, const WindowDataset& ds, const std::vector<std::size_t>& idx,
                           std::size_t batch_size = 64) {
  if (idx.empty()) throw ContractError("forecast_mse over zero windows");
  CompensatedSum se;
  std::size_t n = 0;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    std::span<const std::size_t> part(idx.data() + b, e - b);
    const Batch batch = ds.batch(part);
    const auto pred = model.predict(batch);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred[i] - batch.horizon[i];
      se.add(d * d);
    }
    n += pred.size();
  }
  return se.value() / static_cast<double>(n);
}

inline double validation_mse(const Forecaster& model, const WindowDataset& ds, std::size_t stride) {
  return forecast_mse(model, ds, ds.strided(stride));
}

inline std::vector<double> current_weights(const Forecaster& model) {
  if (!model.msft()) return {};
  NoGradGuard guard;
  return model.msft()->mixing().values();
}

struct PretrainResult {
  std::vector<LogRow> log;
  double initial_val = 0.0;
  double final_val = 0.0;
  std::size_t steps = 0;
};

/// Masked reconstruction: random windows, horizon tokens replaced by the
/// mask embedding, MSE on the horizon. Trains every parameter that
/// requires a gradient for `max_steps` steps.
inline PretrainResult pretrain(Forecaster& model, const WindowDataset& train, const WindowDataset& val,
                               const TrainConfig& cfg) {
  cfg.validate();
  if (model.params().trainable().empty()) throw ConfigError("pretraining needs trainable parameters (mode=full)");
  Rng rng = Rng(cfg.seed).fork(11);
  AdamW opt(cfg.optim);
  PretrainResult r;
  r.initial_val = validation_mse(model, val, cfg.eval_stride);
  CompensatedSum window_loss;
  std::size_t window_n = 0;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    const auto idx = sample_indices(rng, train.size(), cfg.batch_size);
    const ForecastOutput out = model.forward(train.batch(idx));
    backward(out.loss);
    opt.step(model.params());
    window_loss.add(out.loss.item());
    ++window_n;
    if (step % cfg.log_every == 0 || step == 1 || step == cfg.max_steps) {
      LogRow row;
      row.step = step;
      row.train_loss = window_loss.value() / static_cast<double>(window_n);
      r.log.push_back(row);
      window_loss = {};
      window_n = 0;
    }
  }
  r.steps = cfg.max_steps;
  r.final_val = validation_mse(model, val, cfg.eval_stride);
  if (!r.log.empty()) r.log.back().val_loss = r.final_val;
  return r;
}

struct FinetuneResult {
  std::vector<LogRow> log;
  double epoch0_val = 0.0;
  double best_val = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  bool stopped_early = false;
};

/// Epochs of `steps_per_epoch` random batches, validation after each epoch
/// (and once before training as epoch 0), early stopping after `patience`
/// epochs without improvement, then the best snapshot is restored.
inline FinetuneResult finetune(Forecaster& model, const WindowDataset& train, const WindowDataset& val,
                               const TrainConfig& cfg) {
  cfg.validate();
  FinetuneResult r;
  r.epoch0_val = r.best_val = validation_mse(model, val, cfg.eval_stride);
  LogRow first;
  first.val_loss = r.epoch0_val;
  first.weights = current_weights(model);
  r.log.push_back(first);
  if (model.params().trainable().empty()) return r;

  Rng rng = Rng(cfg.seed).fork(13);
  AdamW opt(cfg.optim);
  auto best = model.params().snapshot();
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && r.steps < cfg.max_steps; ++epoch) {
    CompensatedSum epoch_loss, window_loss;
    std::size_t epoch_n = 0, window_n = 0;
    for (std::size_t k = 0; k < cfg.steps_per_epoch && r.steps < cfg.max_steps; ++k) {
      const auto idx = sample_indices(rng, train.size(), cfg.batch_size);
      const ForecastOutput out = model.forward(train.batch(idx));
      backward(out.loss);
      opt.step(model.params());
      ++r.steps;
      epoch_loss.add(out.loss.item());
      window_loss.add(out.loss.item());
      ++epoch_n;
      ++window_n;
      if (r.steps % cfg.log_every == 0) {
        LogRow row;
        row.step = r.steps;
        row.train_loss = window_loss.value() / static_cast<double>(window_n);
        row.weights = current_weights(model);
        r.log.push_back(row);
        window_loss = {};
        window_n = 0;
      }
    }
    const double v = validation_mse(model, val, cfg.eval_stride);
    LogRow row;
    row.step = r.steps;
    row.train_loss = epoch_loss.value() / static_cast<double>(std::max<std::size_t>(epoch_n, 1));
    row.val_loss = v;
    row.weights = current_weights(model);
    r.log.push_back(row);
    r.epochs_run = epoch;
    if (v < r.best_val) {
      r.best_val = v;
      r.best_epoch = epoch;
      best = model.params().snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      r.stopped_early = true;
      break;
    }
  }
  model.params().restore(best);
  return r;
}

struct EvalResult {
  MetricReport metrics;
  std::vector<double> weights;
};

/// Metrics of the final forecast, averaged over every `stride`-th window.
inline EvalResult evaluate(const Forecaster& model, const WindowDataset& ds, std::size_t season = 1,
                           std::size_t stride = 1, std::size_t batch_size = 64) {
  const auto idx = ds.strided(stride);
  if (idx.empty()) throw ContractError("evaluate on an empty dataset");
  MetricAccumulator acc(season);
  const std::size_t H = ds.horizon_len;
  for (std::size_t b = 0; b < idx.size(); b += batch_size) {
    const std::size_t e = std::min(idx.size(), b + batch_size);
    std::span<const std::size_t> part(idx.data() + b, e - b);
    const Batch batch = ds.batch(part);
    const auto pred = model.predict(batch);
    for (std::size_t w = 0; w < part.size(); ++w) {
      acc.add(std::span<const double>(batch.horizon).subspan(w * H, H), std::span<const double>(pred).subspan(w * H, H));
    }
  }
  return {acc.report(), current_weights(model)};
}

/// Copies every "backbone.*" value of `src` into `dst` by name.
inline void copy_backbone(const ParamStore& src, ParamStore& dst) {
  for (auto& [name, t] : dst.entries()) {
    if (name.rfind("backbone.", 0) != 0) continue;
    const Tensor& s = src.get(name);
    if (s.shape() != t.shape()) throw IncompatibleError("parameter '" + name + "' has a different shape");
    std::copy(s.data().begin(), s.data().end(), t.mutable_data().begin());
  }
}

}  // namespace msft
