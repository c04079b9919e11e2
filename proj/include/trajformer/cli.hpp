// Copyright 2026 The Trajformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Command-line front end: synth, train, eval, predict and bench.

#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "trajformer/bench.hpp"
#include "trajformer/checkpoint.hpp"
#include "trajformer/config.hpp"
#include "trajformer/data.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/metrics.hpp"
#include "trajformer/model.hpp"
#include "trajformer/training.hpp"

namespace trajformer::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::string flag_name(const std::string& key) {
  std::string s = key;
  for (char& c : s) {
    if (c == '_') c = '-';
  }
  return "--" + s;
}

inline std::string default_text(const nlohmann::json& v) {
  return v.is_string() ? "\"" + v.get<std::string>() + "\"" : v.dump();
}

/// One subcommand with a flag per config key in its groups.
struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::map<std::string, std::string> raw;
  std::map<std::string, CLI::Option*> options;

  void add_keys(unsigned groups) {
    for (const auto& key : config_keys()) {
      if (!(groups & static_cast<unsigned>(key.group))) continue;
      CLI::Option* opt = app->add_option(flag_name(key.name), raw[key.name], key.help);
      opt->default_str(default_text(key.default_value));
      opt->type_name(key.default_value.is_string() ? "TEXT"
                     : key.default_value.is_boolean() ? "BOOL"
                     : key.default_value.is_number_unsigned() ? "UINT"
                                                                : "FLOAT");
      options[key.name] = opt;
    }
    app->add_option("--config", config_path, "JSON config file; flags override its values");
  }

  bool given(const std::string& key) const {
    auto it = options.find(key);
    return it != options.end() && it->second->count() > 0;
  }

  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg.merge_file(config_path);
    for (const auto& [key, opt] : options) {
      if (opt->count() > 0) cfg.set_from_string(key, raw.at(key));
    }
    return cfg;
  }
};

inline std::string require_path(const RunConfig& cfg, const std::string& key, const std::string& command) {
  std::string p = cfg.path(key);
  if (p.empty()) throw ConfigError(command + ": " + flag_name(key) + " is required");
  return p;
}

inline void log_config(std::ostream& err, const std::string& command, const RunConfig& cfg) {
  err << "trajformer " << command << ": config " << cfg.to_json().dump() << '\n';
}

inline void check_speed_mode(const Dataset& data, const ModelConfig& model, const std::string& data_path) {
  if (data.speed_mode != model.speed_mode) {
    throw ConfigError("speed_mode mismatch: dataset " + data_path + " is " + to_string(data.speed_mode) +
                      " but the model expects " + to_string(model.speed_mode));
  }
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

inline std::filesystem::path sidecar(const std::filesystem::path& file) { return file.string() + ".config.json"; }

// ---------------------------------------------------------------------------

inline int run_synth(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const Dataset data = gen_synthetic(cfg.synthetic_config());
  const std::string path = cfg.path("out");
  if (path.empty()) {
    write_samples(out, data);
    return kExitOk;
  }
  if (std::filesystem::path(path).has_parent_path()) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  }
  save_samples(path, data);
  cfg.save(sidecar(path));
  return kExitOk;
}

/// Seeded split of `data` into train and validation parts.
inline std::pair<Dataset, Dataset> split_validation(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(trajformer::detail::mix_seed(seed, 0x5417));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  std::size_t n_val = static_cast<std::size_t>(fraction * static_cast<double>(order.size()));
  if (n_val >= order.size()) n_val = order.size() - 1;
  Dataset train{data.speed_mode, data.speed_vocab, {}};
  Dataset val{data.speed_mode, data.speed_vocab, {}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_val ? val : train).samples.push_back(data.samples[order[i]]);
  }
  return {std::move(train), std::move(val)};
}

inline int run_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const ModelConfig mcfg = cfg.model_config();
  const TrainConfig tcfg = cfg.train_config();
  const NormalizationConfig norm = cfg.normalization();
  const std::string data_path = require_path(cfg, "data", "train");
  const std::filesystem::path run_dir = require_path(cfg, "out", "train");

  Dataset data = load_samples(data_path, mcfg.t_obs, mcfg.t_pred);
  check_speed_mode(data, mcfg, data_path);
  if (data.samples.empty()) throw DataError("train: dataset " + data_path + " has no samples");
  Dataset train, val;
  const std::string val_path = cfg.path("val_data");
  if (!val_path.empty()) {
    train = std::move(data);
    val = load_samples(val_path, mcfg.t_obs, mcfg.t_pred);
    check_speed_mode(val, mcfg, val_path);
  } else {
    std::tie(train, val) = split_validation(data, cfg.get<double>("val_fraction"), tcfg.seed);
  }
  err << "trajformer train: " << train.samples.size() << " training, " << val.samples.size()
      << " validation samples\n";

  std::filesystem::create_directories(run_dir);
  cfg.save(run_dir / "config.json");

  TrajectoryTransformer model(mcfg, tcfg.seed);
  const auto train_n = normalize_all(train, norm);
  const auto val_n = normalize_all(val, norm);
  const FitResult result = fit(model, train_n, val_n, tcfg, [&](const EpochRecord& r) {
    err << "epoch " << r.epoch << '/' << tcfg.epochs << " train " << r.train_loss << " val " << r.val_loss
        << " lr " << r.lr << '\n';
    return true;
  });

  save_checkpoint(run_dir / "last.ckpt", model, norm, &result.optimizer);
  TrajectoryTransformer best = model.clone();
  restore_parameters(best, result.best_parameters);
  save_checkpoint(run_dir / "best.ckpt", best, norm);
  auto history = open_output(run_dir / "history.csv");
  result.history.write_csv(history);
  out << "best_epoch," << result.best_epoch << "\nbest_loss," << std::setprecision(17) << result.best_loss
      << '\n';
  return kExitOk;
}

inline int run_eval(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const std::string ckpt_path = require_path(cfg, "checkpoint", "eval");
  const std::string data_path = require_path(cfg, "data", "eval");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelConfig& mcfg = ckpt.model.config();
  const Dataset data = load_samples(data_path, mcfg.t_obs, mcfg.t_pred);
  check_speed_mode(data, mcfg, data_path);
  const EvalReport report = evaluate(ckpt.model, data, ckpt.normalization);
  report.write_csv(out);
  const std::string path = cfg.path("out");
  if (!path.empty()) {
    auto file = open_output(path);
    report.write_csv(file);
    cfg.save(sidecar(path));
  }
  return kExitOk;
}

inline void write_predictions(std::ostream& out, const Dataset& data,
                              const std::vector<std::vector<BoundingBox>>& preds) {
  out << "track_id,frame_index,cx,cy,w,h\n" << std::setprecision(17);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::string id = csv_field(data.samples[i].track_id);
    for (std::size_t f = 0; f < preds[i].size(); ++f) {
      const BoundingBox& b = preds[i][f];
      out << id << ',' << f + 1 << ',' << b.cx << ',' << b.cy << ',' << b.w << ',' << b.h << '\n';
    }
  }
}

inline int run_predict(const RunConfig& cfg, std::ostream& out, std::ostream&) {
  const std::string ckpt_path = require_path(cfg, "checkpoint", "predict");
  const std::string data_path = require_path(cfg, "data", "predict");
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelConfig& mcfg = ckpt.model.config();
  const Dataset data = load_samples(data_path, mcfg.t_obs, mcfg.t_pred);
  check_speed_mode(data, mcfg, data_path);
  const auto samples = normalize_all(data, ckpt.normalization);
  const auto preds = predict_dataset(ckpt.model, samples);
  const std::string path = cfg.path("out");
  if (path.empty()) {
    write_predictions(out, data, preds);
    return kExitOk;
  }
  auto file = open_output(path);
  write_predictions(file, data, preds);
  cfg.save(sidecar(path));
  return kExitOk;
}

inline int run_bench(const RunConfig& cfg, const Command& cmd, std::ostream& out, std::ostream&) {
  const std::string ckpt_path = cfg.path("checkpoint");
  std::unique_ptr<TrajectoryTransformer> model;
  NormalizationConfig norm;
  if (ckpt_path.empty()) {
    model = std::make_unique<TrajectoryTransformer>(cfg.model_config(), cfg.get<std::uint64_t>("seed"));
  } else {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    norm = ckpt.normalization;
    const std::size_t horizon = cmd.given("t_pred") ? cfg.get<std::size_t>("t_pred") : ckpt.model.config().t_pred;
    model = std::make_unique<TrajectoryTransformer>(ckpt.model.with_horizon(horizon));
  }
  const ModelConfig& mcfg = model->config();

  // One synthetic input sample; only its observed part is used.
  SyntheticConfig scfg;
  scfg.n_samples = 1;
  scfg.seed = cfg.get<std::uint64_t>("seed");
  scfg.t_obs = mcfg.t_obs;
  scfg.t_pred = mcfg.t_pred;
  scfg.speed_mode = mcfg.speed_mode;
  scfg.speed_vocab = mcfg.speed_vocab;
  const auto sample = normalize_all(gen_synthetic(scfg), norm).front();

  const DecoderComparison cmp =
      compare_decoders(*model, sample, cfg.get<std::size_t>("reps"), cfg.get<std::size_t>("warmup"));
  cmp.write_csv(out);
  cmp.write_summary(out);
  const std::string path = cfg.path("out");
  if (!path.empty()) {
    auto file = open_output(path);
    cmp.write_csv(file);
    cfg.save(sidecar(path));
  }
  return kExitOk;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  using detail::Command;
  using G = KeyGroup;
  CLI::App app{"Pedestrian trajectory transformer with ego-speed context", "trajformer"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");
  app.failure_message(CLI::FailureMessage::help);

  const unsigned common_io = static_cast<unsigned>(G::common);
  struct Spec {
    const char* name;
    const char* help;
    unsigned groups;
  };
  const Spec specs[] = {
      {"synth", "generate a synthetic speed-coupled dataset", common_io | G::window | G::synth | G::image},
      {"train", "train a model and write checkpoints",
       common_io | G::data_path | G::val_path | G::window | G::model | G::train | G::image | G::speed_scale},
      {"eval", "score a checkpoint on a dataset", common_io | G::data_path | G::checkpoint_path},
      {"predict", "write per-frame pixel-space predictions", common_io | G::data_path | G::checkpoint_path},
      {"bench", "time single-pass against autoregressive decoding",
       common_io | G::checkpoint_path | G::window | G::model | G::bench},
  };
  std::map<std::string, Command> commands;
  for (const auto& s : specs) {
    Command& c = commands[s.name];
    c.app = app.add_subcommand(s.name, s.help);
    c.app->failure_message(CLI::FailureMessage::help);
    c.add_keys(s.groups);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  for (auto& [name, cmd] : commands) {
    if (!cmd.app->parsed()) continue;
    try {
      const RunConfig cfg = cmd.resolve();
      detail::log_config(err, name, cfg);
      if (name == "synth") return detail::run_synth(cfg, out, err);
      if (name == "train") return detail::run_train(cfg, out, err);
      if (name == "eval") return detail::run_eval(cfg, out, err);
      if (name == "predict") return detail::run_predict(cfg, out, err);
      return detail::run_bench(cfg, cmd, out, err);
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitFailure;
    }
  }
  return kExitUsage;
}

}  // namespace trajformer::cli
