// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "msft/data.hpp"
#include "msft/diagnostics.hpp"
#include "msft/io/checkpoint.hpp"
#include "msft/model.hpp"
#include "msft/training/trainer.hpp"

namespace msft {

/// A synthetic sum-of-sines corpus.
struct SynthSpec {
  std::vector<double> periods{8.0, 64.0};
  std::vector<double> amplitudes{1.0, 2.0};
  double noise = 0.1;
  std::size_t length = 20000;
  std::uint64_t seed = 7;

  std::vector<SineComponent> components() const {
    if (periods.size() != amplitudes.size()) throw ConfigError("periods and amplitudes differ in length");
    std::vector<SineComponent> c;
    for (std::size_t i = 0; i < periods.size(); ++i) c.push_back({periods[i], amplitudes[i]});
    return c;
  }
  SeriesTable generate(const std::string& name) const { return synth_series(components(), noise, length, seed, name); }
};

struct RunConfig {
  std::string out = "out";
  std::uint64_t seed = 0;

  // Corpora: a CSV path, or a synthetic spec when the path is empty.
  std::string pretrain_data;
  SynthSpec pretrain_synth;
  std::string data;
  SynthSpec synth{{12.0, 48.0}, {1.5, 1.0}, 0.1, 4000, 11};
  SplitSpec split;
  std::size_t train_stride = 1;
  std::size_t context = 96;
  std::size_t horizon = 96;

  ModelConfig model{};
  TrainConfig pretrain{};
  TrainConfig finetune{};
  std::size_t season = 1;
  std::size_t test_stride = 1;
  StorageType checkpoint_dtype = StorageType::f32;

  std::string ablations = "all";
  std::size_t probe_windows = 4;

  AttentionView attn_view = AttentionView::in_scale;
  std::size_t attn_layer = 0;
  std::size_t attn_head = 0;
  std::size_t attn_window = 0;

  std::size_t diag_layer = 0;  // 1-based block, 0 = last
  std::size_t diag_max_lag = 24;
  std::size_t diag_windows = 64;

  RunConfig() {
    model.mode = Mode::msft;
    pretrain.optim.lr = 1e-3;
    pretrain.optim.weight_decay = 0.1;
    pretrain.max_steps = 2000;
    finetune.optim.lr = 1e-3;
  }

  void validate() const {
    model.validate();
    pretrain.validate();
    finetune.validate();
    split.validate();
    if (context == 0 || horizon == 0) throw ConfigError("C and H must be >= 1");
    if (train_stride == 0) throw ConfigError("train_stride must be >= 1");
    if (test_stride == 0) throw ConfigError("test_stride must be >= 1");
    if (season == 0) throw ConfigError("season must be >= 1");
    if (attn_layer >= model.backbone.layers) throw ConfigError("attn_layer must be < layers");
    if (attn_head >= model.backbone.heads) throw ConfigError("attn_head must be < heads");
    if (diag_layer > model.backbone.layers) throw ConfigError("diag_layer must be in [0, layers]");
  }

  std::size_t resolved_diag_layer() const { return diag_layer == 0 ? model.backbone.layers : diag_layer; }

  SeriesTable pretrain_table() const {
    return pretrain_data.empty() ? pretrain_synth.generate("pretrain") : load_csv(pretrain_data);
  }
  SeriesTable target_table() const { return data.empty() ? synth.generate("target") : load_csv(data); }
};

namespace detail {

struct ConfigKey {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::size_t to_size(const std::string& v) {
  std::size_t pos = 0;
  if (v.empty() || v[0] == '-') throw std::invalid_argument("not a non-negative integer");
  const unsigned long long x = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("trailing characters");
  return static_cast<std::size_t>(x);
}

inline double to_double(const std::string& v) {
  std::size_t pos = 0;
  const double x = std::stod(v, &pos);
  if (pos != v.size() || !std::isfinite(x)) throw std::invalid_argument("not a finite number");
  return x;
}

inline bool to_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw std::invalid_argument("expected true/false");
}

inline std::vector<double> to_list(const std::string& v) {
  std::vector<double> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(to_double(trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

inline std::string from_list(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

template <class Field>
ConfigKey size_key(Field f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = to_size(v); },
          [f](const RunConfig& c) { return std::to_string(f(const_cast<RunConfig&>(c))); }};
}
template <class Field>
ConfigKey double_key(Field f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = to_double(v); },
          [f](const RunConfig& c) { return fmt_double(f(const_cast<RunConfig&>(c))); }};
}
template <class Field>
ConfigKey bool_key(Field f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = to_bool(v); },
          [f](const RunConfig& c) { return std::string(f(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}
template <class Field>
ConfigKey string_key(Field f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = v; },
          [f](const RunConfig& c) { return f(const_cast<RunConfig&>(c)); }};
}
template <class Field>
ConfigKey list_key(Field f) {
  return {[f](RunConfig& c, const std::string& v) { f(c) = to_list(v); },
          [f](const RunConfig& c) { return from_list(f(const_cast<RunConfig&>(c))); }};
}

inline void add_synth_keys(std::map<std::string, ConfigKey>& k, const std::string& prefix,
                           SynthSpec RunConfig::*member) {
  k[prefix + "periods"] = list_key([member](RunConfig& c) -> auto& { return (c.*member).periods; });
  k[prefix + "amplitudes"] = list_key([member](RunConfig& c) -> auto& { return (c.*member).amplitudes; });
  k[prefix + "noise"] = double_key([member](RunConfig& c) -> auto& { return (c.*member).noise; });
  k[prefix + "length"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).length; });
  k[prefix + "seed"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).seed; });
}

inline void add_train_keys(std::map<std::string, ConfigKey>& k, const std::string& prefix,
                           TrainConfig RunConfig::*member) {
  k[prefix + "lr"] = double_key([member](RunConfig& c) -> auto& { return (c.*member).optim.lr; });
  k[prefix + "weight_decay"] = double_key([member](RunConfig& c) -> auto& { return (c.*member).optim.weight_decay; });
  k[prefix + "beta1"] = double_key([member](RunConfig& c) -> auto& { return (c.*member).optim.beta1; });
  k[prefix + "beta2"] = double_key([member](RunConfig& c) -> auto& { return (c.*member).optim.beta2; });
  k[prefix + "adam_eps"] = double_key([member](RunConfig& c) -> auto& { return (c.*member).optim.eps; });
  k[prefix + "batch_size"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).batch_size; });
  k[prefix + "max_steps"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).max_steps; });
  k[prefix + "epochs"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).epochs; });
  k[prefix + "steps_per_epoch"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).steps_per_epoch; });
  k[prefix + "patience"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).patience; });
  k[prefix + "eval_stride"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).eval_stride; });
  k[prefix + "log_every"] = size_key([member](RunConfig& c) -> auto& { return (c.*member).log_every; });
}

inline const std::map<std::string, ConfigKey>& config_keys() {
  static const std::map<std::string, ConfigKey> keys = [] {
    std::map<std::string, ConfigKey> k;
    k["out"] = string_key([](RunConfig& c) -> auto& { return c.out; });
    k["seed"] = size_key([](RunConfig& c) -> auto& { return c.seed; });
    k["pretrain_data"] = string_key([](RunConfig& c) -> auto& { return c.pretrain_data; });
    add_synth_keys(k, "pretrain_synth_", &RunConfig::pretrain_synth);
    k["data"] = string_key([](RunConfig& c) -> auto& { return c.data; });
    add_synth_keys(k, "synth_", &RunConfig::synth);
    k["train_frac"] = double_key([](RunConfig& c) -> auto& { return c.split.train; });
    k["val_frac"] = double_key([](RunConfig& c) -> auto& { return c.split.val; });
    k["test_frac"] = double_key([](RunConfig& c) -> auto& { return c.split.test; });
    k["train_stride"] = size_key([](RunConfig& c) -> auto& { return c.train_stride; });
    k["C"] = size_key([](RunConfig& c) -> auto& { return c.context; });
    k["H"] = size_key([](RunConfig& c) -> auto& { return c.horizon; });

    k["P"] = size_key([](RunConfig& c) -> auto& { return c.model.backbone.patch; });
    k["d_model"] = size_key([](RunConfig& c) -> auto& { return c.model.backbone.d_model; });
    k["layers"] = size_key([](RunConfig& c) -> auto& { return c.model.backbone.layers; });
    k["heads"] = size_key([](RunConfig& c) -> auto& { return c.model.backbone.heads; });
    k["ffn_mult"] = size_key([](RunConfig& c) -> auto& { return c.model.backbone.ffn_mult; });
    k["norm_eps"] = double_key([](RunConfig& c) -> auto& { return c.model.backbone.eps; });
    k["rope_base"] = double_key([](RunConfig& c) -> auto& { return c.model.backbone.rope_base; });

    k["mode"] = {[](RunConfig& c, const std::string& v) { c.model.mode = parse_mode(v); },
                 [](const RunConfig& c) { return std::string(to_string(c.model.mode)); }};
    k["K"] = size_key([](RunConfig& c) -> auto& { return c.model.msft.scales.K; });
    k["s"] = size_key([](RunConfig& c) -> auto& { return c.model.msft.scales.s; });
    k["in_adapter"] = {[](RunConfig& c, const std::string& v) { c.model.msft.in_adapter = parse_adapter_mode(v); },
                       [](const RunConfig& c) { return std::string(to_string(c.model.msft.in_adapter)); }};
    k["attn_adapter"] = {[](RunConfig& c, const std::string& v) { c.model.msft.attn_adapter = parse_adapter_mode(v); },
                         [](const RunConfig& c) { return std::string(to_string(c.model.msft.attn_adapter)); }};
    k["in_scale_mask"] = bool_key([](RunConfig& c) -> auto& { return c.model.msft.in_scale_mask; });
    k["c2f"] = bool_key([](RunConfig& c) -> auto& { return c.model.msft.c2f; });
    k["f2c"] = bool_key([](RunConfig& c) -> auto& { return c.model.msft.f2c; });
    k["mixing"] = {[](RunConfig& c, const std::string& v) { c.model.msft.mixing = parse_mixing_mode(v); },
                   [](const RunConfig& c) { return std::string(to_string(c.model.msft.mixing)); }};
    k["aligned_positions"] = bool_key([](RunConfig& c) -> auto& { return c.model.msft.aligned_positions; });
    k["train_mask_token"] = bool_key([](RunConfig& c) -> auto& { return c.model.msft.train_mask_token; });
    k["msft_lora_rank"] = size_key([](RunConfig& c) -> auto& { return c.model.msft.lora_rank; });
    k["msft_lora_alpha"] = double_key([](RunConfig& c) -> auto& { return c.model.msft.lora_alpha; });
    k["lora_rank"] = size_key([](RunConfig& c) -> auto& { return c.model.lora_rank; });
    k["lora_alpha"] = double_key([](RunConfig& c) -> auto& { return c.model.lora_alpha; });

    add_train_keys(k, "pretrain_", &RunConfig::pretrain);
    add_train_keys(k, "", &RunConfig::finetune);
    k["season"] = size_key([](RunConfig& c) -> auto& { return c.season; });
    k["test_stride"] = size_key([](RunConfig& c) -> auto& { return c.test_stride; });
    k["checkpoint_dtype"] = {[](RunConfig& c, const std::string& v) {
                               if (v == "f32") c.checkpoint_dtype = StorageType::f32;
                               else if (v == "f64") c.checkpoint_dtype = StorageType::f64;
                               else throw std::invalid_argument("expected f32 or f64");
                             },
                             [](const RunConfig& c) {
                               return std::string(c.checkpoint_dtype == StorageType::f32 ? "f32" : "f64");
                             }};
    k["ablations"] = string_key([](RunConfig& c) -> auto& { return c.ablations; });
    k["probe_windows"] = size_key([](RunConfig& c) -> auto& { return c.probe_windows; });
    k["attn_view"] = {[](RunConfig& c, const std::string& v) { c.attn_view = parse_attention_view(v); },
                      [](const RunConfig& c) { return std::string(to_string(c.attn_view)); }};
    k["attn_layer"] = size_key([](RunConfig& c) -> auto& { return c.attn_layer; });
    k["attn_head"] = size_key([](RunConfig& c) -> auto& { return c.attn_head; });
    k["attn_window"] = size_key([](RunConfig& c) -> auto& { return c.attn_window; });
    k["diag_layer"] = size_key([](RunConfig& c) -> auto& { return c.diag_layer; });
    k["diag_max_lag"] = size_key([](RunConfig& c) -> auto& { return c.diag_max_lag; });
    k["diag_windows"] = size_key([](RunConfig& c) -> auto& { return c.diag_windows; });
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Sets one key; the error message names the key.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = detail::config_keys();
  const auto it = keys.find(key);
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError("invalid value for '" + key + "': " + e.what());
  } catch (const std::exception& e) {
    throw ConfigError("invalid value for '" + key + "': '" + value + "' (" + e.what() + ")");
  }
}

/// key=value lines; '#' starts a comment.
inline RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>") {
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + " line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    try {
      set_config_value(cfg, key, detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  return parse_run_config(in, path);
}

/// Every key with its resolved value, one per line in key order.
inline std::string render_run_config(const RunConfig& cfg) {
  std::string s;
  for (const auto& [key, k] : detail::config_keys()) s += key + "=" + k.get(cfg) + "\n";
  return s;
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, std::vector<unsigned char>(text.begin(), text.end()));
}

}  // namespace msft
