// SPDX-License-Identifier: Apache-2.0
// Command-line driver: pretrain, finetune, evaluate, ablate, export-attn, diagnose.
// Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "msft/msft.hpp"

namespace fs = std::filesystem;
using namespace msft;

namespace {

struct Flags {
  std::string config;
  std::string mode;
  std::optional<std::size_t> k;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::string out;
  std::string checkpoint;
  std::string corpus = "target";
  std::string view;
};

class Csv {
 public:
  explicit Csv(const std::vector<std::string>& header) {
    os_.precision(17);
    for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
    os_ << '\n';
  }
  template <class... T>
  void row(const T&... cells) {
    bool first = true;
    ((os_ << (first ? "" : ","), cell(cells), first = false), ...);
    os_ << '\n';
  }
  void row_with(const std::vector<std::string>& lead, const std::vector<double>& tail) {
    for (std::size_t i = 0; i < lead.size(); ++i) os_ << (i ? "," : "") << lead[i];
    for (double v : tail) {
      os_ << ',';
      cell(v);
    }
    os_ << '\n';
  }
  void save(const std::string& path) const { write_text_atomic(path, os_.str()); }

 private:
  void cell(double v) {
    if (!std::isnan(v)) os_ << v;
  }
  template <class T>
  void cell(const T& v) {
    os_ << v;
  }
  std::ostringstream os_;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  if (!std::isnan(v)) os << v;
  return os.str();
}

std::vector<std::string> weight_columns(std::size_t n) {
  std::vector<std::string> c;
  for (std::size_t i = 0; i < n; ++i) c.push_back("w" + std::to_string(i));
  return c;
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

class Runner {
 public:
  Runner(const Flags& flags, const std::string& lr_key) : flags_(flags) {
    cfg_ = flags.config.empty() ? RunConfig{} : load_run_config(flags.config);
    if (!flags.mode.empty()) set_config_value(cfg_, "mode", flags.mode);
    if (flags.k) set_config_value(cfg_, "K", std::to_string(*flags.k));
    if (flags.seed) set_config_value(cfg_, "seed", std::to_string(*flags.seed));
    if (flags.lr) set_config_value(cfg_, lr_key, fmt(*flags.lr));
    if (!flags.out.empty()) set_config_value(cfg_, "out", flags.out);
    if (flags.corpus != "target" && flags.corpus != "pretrain") {
      throw ConfigError("--corpus must be 'target' or 'pretrain', got '" + flags.corpus + "'");
    }
    cfg_.validate();
    fs::create_directories(cfg_.out);
    write_text_atomic(path("config.txt"), render_run_config(cfg_));
  }

  std::string path(const std::string& name) const { return (fs::path(cfg_.out) / name).string(); }

  int pretrain_cmd() {
    const auto data = windows(cfg_.pretrain_table());
    ModelConfig mc = cfg_.model;
    mc.mode = Mode::full;
    Forecaster model(mc, cfg_.seed);
    TrainConfig tc = cfg_.pretrain;
    tc.seed = cfg_.seed;
    const auto r = pretrain(model, data.train, data.val, tc);
    if (cfg_.checkpoint_dtype == StorageType::f32) round_to_f32(model.params());
    const double stored_val = validation_mse(model, data.val, tc.eval_stride);
    save_checkpoint(path("pretrained.ckpt"), model, cfg_.checkpoint_dtype);

    Csv log({"step", "train_loss", "val_loss"});
    for (const auto& row : r.log) log.row(row.step, row.train_loss, row.val_loss);
    log.save(path("pretrain_log.csv"));
    Csv summary({"steps", "initial_val_loss", "final_val_loss", "val_loss"});
    summary.row(r.steps, r.initial_val, r.final_val, stored_val);
    summary.save(path("pretrain_summary.csv"));
    std::cout << "pretrain: " << r.steps << " steps, val_loss " << fmt(r.initial_val) << " -> " << fmt(stored_val)
              << "\n";
    return 0;
  }

  int finetune_cmd() {
    const Checkpoint ck = load_checkpoint(checkpoint_or(path("pretrained.ckpt")));
    Forecaster model(cfg_.model, cfg_.seed);
    apply_checkpoint(ck, cfg_.model.backbone, model.params(), true);
    const auto data = windows(cfg_.target_table());
    TrainConfig tc = cfg_.finetune;
    tc.seed = cfg_.seed;
    const auto r = finetune(model, data.train, data.val, tc);
    save_checkpoint(path("finetuned.ckpt"), model, cfg_.checkpoint_dtype);

    const std::size_t nw = model.msft() ? model.msft()->options().scales.K + 1 : 0;
    Csv log(cat({"step", "train_loss", "val_loss"}, weight_columns(nw)));
    for (const auto& row : r.log)
      log.row_with({std::to_string(row.step), fmt(row.train_loss), fmt(row.val_loss)}, row.weights);
    log.save(path("train_log.csv"));
    Csv summary({"mode", "epoch0_val_loss", "best_val_loss", "best_epoch", "epochs_run", "steps", "stopped_early"});
    summary.row(to_string(model.mode()), r.epoch0_val, r.best_val, r.best_epoch, r.epochs_run, r.steps,
                r.stopped_early ? 1 : 0);
    summary.save(path("finetune_summary.csv"));
    std::cout << "finetune (" << to_string(model.mode()) << "): val_loss " << fmt(r.epoch0_val) << " -> "
              << fmt(r.best_val) << " after " << r.steps << " steps\n";
    return 0;
  }

  int evaluate_cmd() {
    const Checkpoint ck = load_checkpoint(checkpoint_or(default_model_checkpoint()));
    auto model = model_from(ck, !flags_.mode.empty() && cfg_.model.mode == Mode::zero_shot);
    const bool pre = flags_.corpus == "pretrain";
    const auto data = windows(pre ? cfg_.pretrain_table() : cfg_.target_table());
    const std::size_t stride = pre ? cfg_.pretrain.eval_stride : cfg_.finetune.eval_stride;
    const double val = validation_mse(*model, data.val, stride);
    const auto e = evaluate(*model, data.test, cfg_.season, cfg_.test_stride);
    const auto& m = e.metrics;
    Csv out(cat({"corpus", "mode", "windows", "val_loss", "mse", "mae", "smape", "mase", "nd", "nrmse"},
                weight_columns(e.weights.size())));
    out.row_with({flags_.corpus, to_string(model->mode()), std::to_string(m.windows)},
                 cat_values({val, m.mse, m.mae, m.smape, m.mase, m.nd, m.nrmse}, e.weights));
    out.save(path("metrics.csv"));
    std::cout << "evaluate (" << to_string(model->mode()) << ", " << flags_.corpus << "): test mse " << fmt(m.mse)
              << ", val_loss " << fmt(val) << "\n";
    return 0;
  }

  int ablate_cmd() {
    const Checkpoint ck = load_checkpoint(checkpoint_or(path("pretrained.ckpt")));
    ModelConfig base = cfg_.model;
    base.mode = Mode::msft;
    Forecaster pre(backbone_config(base), cfg_.seed);
    apply_checkpoint(ck, base.backbone, pre.params(), true);
    const auto data = windows(cfg_.target_table());
    TrainConfig tc = cfg_.finetune;
    tc.seed = cfg_.seed;

    std::vector<AblationVariant> variants{{"msft", "full configuration", base.msft}};
    for (auto& v : select_ablations(base.msft)) variants.push_back(std::move(v));
    const auto res = ablation_run(base, pre.params(), data, tc, variants, cfg_.season, cfg_.test_stride,
                                  cfg_.probe_windows);
    Csv out({"name", "description", "mse", "mae", "smape", "mase", "nd", "nrmse", "best_val_loss", "steps",
             "probe_max_diff"});
    for (std::size_t i = 0; i < res.size(); ++i) {
      double diff = 0.0;
      for (std::size_t j = 0; j < res[i].probe.size(); ++j)
        diff = std::max(diff, std::abs(res[i].probe[j] - res[0].probe[j]));
      const auto& m = res[i].test.metrics;
      out.row(res[i].name, variants[i].description, m.mse, m.mae, m.smape, m.mase, m.nd, m.nrmse,
              res[i].train.best_val, res[i].train.steps, diff);
      std::cout << "ablate " << res[i].name << ": test mse " << fmt(m.mse) << "\n";
    }
    out.save(path("ablation.csv"));
    return 0;
  }

  int export_attn_cmd() {
    const Checkpoint ck = load_checkpoint(checkpoint_or(default_model_checkpoint()));
    const auto model = model_from(ck, false);
    const auto data = windows(cfg_.target_table());
    if (cfg_.attn_window >= data.test.size()) {
      throw ConfigError("attn_window " + std::to_string(cfg_.attn_window) + " exceeds the " +
                        std::to_string(data.test.size()) + " test windows");
    }
    const std::size_t idx[1] = {cfg_.attn_window};
    const Batch sample = data.test.batch(idx, false);
    std::vector<AttentionView> views;
    if (flags_.view == "all") {
      views = {AttentionView::naive, AttentionView::aligned, AttentionView::in_scale};
    } else {
      views = {flags_.view.empty() ? cfg_.attn_view : parse_attention_view(flags_.view)};
    }
    Csv summary({"view", "layer", "head", "tokens", "cross_scale_mass", "max_row_sum_error", "co_index_mean",
                 "other_mean", "co_index_ratio"});
    for (const auto view : views) {
      const auto hm = export_attention(*model, sample, view, cfg_.attn_layer, cfg_.attn_head, cfg_.model.msft.scales);
      write_heatmap_csv(path(heatmap_filename("attn", view, cfg_.attn_layer, cfg_.attn_head)), hm);
      const auto dm = diagonal_mass(hm);
      summary.row(to_string(view), hm.layer, hm.head, hm.n, hm.cross_scale_mass(), hm.max_row_sum_error(),
                  dm.co_index, dm.other, dm.ratio());
      std::cout << "export-attn " << to_string(view) << ": cross-scale mass " << fmt(hm.cross_scale_mass()) << "\n";
    }
    summary.save(path("attention_summary.csv"));
    return 0;
  }

  int diagnose_cmd() {
    const Checkpoint ck = load_checkpoint(checkpoint_or(path("pretrained.ckpt")));
    const auto model = model_from(ck, true);
    const auto data = windows(cfg_.target_table());
    const std::size_t want = std::max<std::size_t>(cfg_.diag_windows, 1);
    auto idx = data.test.strided(std::max<std::size_t>(data.test.size() / want, 1));
    if (idx.size() > want) idx.resize(want);
    const auto triplets = collect_triplets(model->backbone(), data.test, cfg_.model.msft.scales,
                                           cfg_.resolved_diag_layer(), cfg_.diag_max_lag, idx);
    write_triplets_csv(path("triplets.csv"), triplets);
    std::vector<double> x, y, z;
    for (const auto& t : triplets) {
      x.push_back(t.acf);
      y.push_back(t.norm);
      z.push_back(static_cast<double>(t.scale));
    }
    const auto r = confounder_check(x, y, z);
    Csv out({"n", "raw_r", "raw_z", "raw_p", "partial_r", "partial_z", "partial_p"});
    out.row(r.n, r.raw, r.raw_test.z, r.raw_test.p, r.partial, r.partial_test.z, r.partial_test.p);
    out.save(path("diagnose.csv"));
    std::cout << "diagnose: corr(ACF, norm) " << fmt(r.raw) << ", partial given scale " << fmt(r.partial) << "\n";
    return 0;
  }

 private:
  SplitDatasets windows(const SeriesTable& t) const {
    return make_windows(t, cfg_.context, cfg_.horizon, cfg_.split, cfg_.train_stride);
  }

  std::string checkpoint_or(const std::string& fallback) const {
    return flags_.checkpoint.empty() ? fallback : flags_.checkpoint;
  }
  std::string default_model_checkpoint() const {
    const auto ft = path("finetuned.ckpt");
    return fs::exists(ft) ? ft : path("pretrained.ckpt");
  }

  static ModelConfig backbone_config(ModelConfig c) {
    c.mode = Mode::zero_shot;
    return c;
  }

  /// The checkpoint's own model, or only its backbone as a zero-shot
  /// forecaster.
  std::unique_ptr<Forecaster> model_from(const Checkpoint& ck, bool zero_shot) const {
    ModelConfig mc = checkpoint_config(ck);
    if (zero_shot) mc.mode = Mode::zero_shot;
    auto model = std::make_unique<Forecaster>(mc, cfg_.seed);
    apply_checkpoint(ck, mc.backbone, model->params(), zero_shot);
    return model;
  }

  std::vector<AblationVariant> select_ablations(const MsftOptions& base) const {
    auto all = standard_ablations(base);
    if (cfg_.ablations == "all") return all;
    if (cfg_.ablations == "none" || cfg_.ablations.empty()) return {};
    std::vector<AblationVariant> chosen;
    std::istringstream is(cfg_.ablations);
    std::string name;
    while (std::getline(is, name, ',')) {
      name = detail::trim(name);
      const auto it = std::find_if(all.begin(), all.end(), [&](const auto& v) { return v.name == name; });
      if (it == all.end()) throw ConfigError("invalid value for 'ablations': unknown variant '" + name + "'");
      chosen.push_back(*it);
    }
    return chosen;
  }

  static std::vector<double> cat_values(std::vector<double> a, const std::vector<double>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  Flags flags_;
  RunConfig cfg_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale finetuning of a patch-transformer forecaster"};
  app.require_subcommand(1);
  Flags flags;

  struct Command {
    const char* name;
    const char* help;
    const char* lr_key;
    int (Runner::*run)();
  };
  const Command commands[] = {
      {"pretrain", "masked-reconstruction pretraining of the backbone", "pretrain_lr", &Runner::pretrain_cmd},
      {"finetune", "finetune a pretrained backbone in one mode", "lr", &Runner::finetune_cmd},
      {"evaluate", "test-split metrics of a checkpoint", "lr", &Runner::evaluate_cmd},
      {"ablate", "run the ablation grid from a pretrained backbone", "lr", &Runner::ablate_cmd},
      {"export-attn", "write attention heatmaps of one test window", "lr", &Runner::export_attn_cmd},
      {"diagnose", "ACF / embedding-norm / scale confounder check", "lr", &Runner::diagnose_cmd},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", flags.config, "key=value run configuration")->check(CLI::ExistingFile);
    sub->add_option("--mode", flags.mode, "zero_shot | full | linear_probe | lora | msft");
    sub->add_option("--k", flags.k, "number of extra scales K");
    sub->add_option("--seed", flags.seed, "global seed");
    sub->add_option("--lr", flags.lr, "learning rate of this stage");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--checkpoint", flags.checkpoint, "input checkpoint");
    if (std::string(c.name) == "evaluate") sub->add_option("--corpus", flags.corpus, "target | pretrain");
    if (std::string(c.name) == "export-attn") sub->add_option("--view", flags.view, "naive | aligned | in_scale | all");
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    for (const auto& [sub, cmd] : subs) {
      if (!sub->parsed()) continue;
      Runner runner(flags, cmd->lr_key);
      return (runner.*(cmd->run))();
    }
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
