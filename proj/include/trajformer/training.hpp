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

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <vector>

#include "trajformer/data.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"
#include "trajformer/optim.hpp"
#include "trajformer/random.hpp"

namespace trajformer {

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t epochs = 200;
  double lr0 = 0.0005;
  double lr_gamma = 0.99;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("train config: lr0 must be positive");
    if (!(lr_gamma > 0.0 && lr_gamma <= 1.0)) throw ConfigError("train config: lr_gamma must be in (0, 1]");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
  }

  AdamSettings adam() const { return {adam_beta1, adam_beta2, adam_eps}; }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN when there is no validation set
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  /// CSV with columns epoch,train_loss,val_loss,lr,seconds.
  void write_csv(std::ostream& out) const {
    out << "epoch,train_loss,val_loss,lr,seconds\n";
    std::ostringstream row;
    row << std::setprecision(17);
    for (const auto& e : epochs) {
      row.str("");
      row << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ',' << e.seconds << '\n';
      out << row.str();
    }
  }
};

using ParameterSnapshot = std::vector<std::vector<double>>;

inline ParameterSnapshot snapshot_parameters(const TrajectoryTransformer& model) {
  ParameterSnapshot snap;
  for (const auto& p : model.parameters()) snap.emplace_back(p.values().begin(), p.values().end());
  return snap;
}

inline void restore_parameters(const TrajectoryTransformer& model, const ParameterSnapshot& snap) {
  auto params = model.parameters();
  if (params.size() != snap.size()) throw ContractError("restore_parameters: snapshot does not match model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != snap[i].size()) throw ContractError("restore_parameters: tensor size mismatch");
    std::copy(snap[i].begin(), snap[i].end(), params[i].mutable_values().begin());
  }
}

/// Number of training loops currently running in this process.
inline std::atomic<int>& active_training_runs() {
  static std::atomic<int> count{0};
  return count;
}

class TrainingScope {
 public:
  TrainingScope() { active_training_runs().fetch_add(1); }
  ~TrainingScope() { active_training_runs().fetch_sub(1); }
  TrainingScope(const TrainingScope&) = delete;
  TrainingScope& operator=(const TrainingScope&) = delete;
};

/// Ground-truth offsets of the selected samples as a [B*t_pred, 4] tensor.
inline ad::Tensor make_targets(std::span<const NormalizedSample> samples, std::span<const std::size_t> indices) {
  std::vector<double> values;
  for (std::size_t i : indices) values.insert(values.end(), samples[i].future.begin(), samples[i].future.end());
  const std::size_t rows = values.size() / 4;
  return ad::Tensor({rows, 4}, std::move(values));
}

/// Forward, RMSE loss, backward and one Adam update per call.
class Trainer {
 public:
  Trainer(TrajectoryTransformer& model, TrainConfig config)
      : model_(model),
        config_(std::move(config)),
        params_(model.parameters()),
        optimizer_(OptimizerState::for_parameters(params_)),
        dropout_rng_(detail::mix_seed(config_.seed, 0xD50)) {
    config_.validate();
  }

  struct StepResult {
    double loss = 0.0;
    double grad_norm = 0.0;
  };

  StepResult step(std::span<const NormalizedSample> samples, std::span<const std::size_t> batch, double lr) {
    model_.zero_grad();
    ad::Tape tape;
    const ForwardContext ctx{&tape, &dropout_rng_};
    const ad::Tensor pred = model_.forward(make_input(samples, batch), ctx);
    const ad::Tensor loss = rmse_loss(pred, make_targets(samples, batch), &tape);
    StepResult result{loss.item(), 0.0};
    if (!std::isfinite(result.loss)) throw TrainingError("non-finite loss " + std::to_string(result.loss));
    tape.backward(loss);
    double sq = 0.0;
    for (const auto& p : params_) {
      if (!p.has_grad()) continue;
      for (double g : p.grad()) sq += g * g;
    }
    result.grad_norm = std::sqrt(sq);
    if (!std::isfinite(result.grad_norm)) throw TrainingError("non-finite gradient norm");
    adam_step(params_, optimizer_, lr, config_.adam());
    return result;
  }

  /// RMSE over every element of every sample, evaluated without a tape.
  double loss(std::span<const NormalizedSample> samples, std::size_t chunk = 64) const {
    if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < samples.size(); start += chunk) {
      std::vector<std::size_t> idx(std::min(chunk, samples.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      const ad::Tensor pred = model_.forward(make_input(samples, idx));
      const ad::Tensor gt = make_targets(samples, idx);
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred.value(i) - gt.value(i);
        sq += e * e;
      }
      count += pred.size();
    }
    return std::sqrt(sq / static_cast<double>(count));
  }

  const OptimizerState& optimizer_state() const { return optimizer_; }
  OptimizerState& optimizer_state() { return optimizer_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrajectoryTransformer& model_;
  TrainConfig config_;
  std::vector<ad::Tensor> params_;
  OptimizerState optimizer_;
  Rng dropout_rng_;
};

struct FitResult {
  TrainHistory history;
  ParameterSnapshot best_parameters;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_loss = std::numeric_limits<double>::infinity();
  OptimizerState optimizer;
};

/// Called after every epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/**
 * Mini-batch training. Samples are reshuffled every epoch from a generator
 * seeded with config.seed; the last partial batch is kept. The learning rate
 * for epoch e (0-based) is lr_at(e). The parameters with the lowest
 * validation loss (training loss when `val` is empty) are kept in the result;
 * the model itself ends at the final parameters.
 */
inline FitResult fit(TrajectoryTransformer& model, std::span<const NormalizedSample> train,
                     std::span<const NormalizedSample> val, const TrainConfig& config,
                     const EpochCallback& on_epoch = {}) {
  if (train.empty()) throw TrainingError("fit: empty training set");
  config.validate();
  TrainingScope scope;
  Trainer trainer(model, config);
  FitResult result;
  result.best_parameters = snapshot_parameters(model);
  Rng shuffle_rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch, config.lr0, config.lr_gamma);
    if (config.shuffle) {
      // Fisher-Yates with the hand-rolled index draw keeps the order toolchain-independent.
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle_rng, i)]);
    }
    double weighted = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      Trainer::StepResult step;
      try {
        step = trainer.step(train, batch, lr);
      } catch (const TrainingError& e) {
        throw TrainingError("epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(batch_no + 1) +
                            ": " + e.what());
      }
      weighted += step.loss * static_cast<double>(batch.size());
    }
    EpochRecord record;
    record.epoch = epoch + 1;
    record.train_loss = weighted / static_cast<double>(train.size());
    record.val_loss = trainer.loss(val);
    record.lr = lr;
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.history.epochs.push_back(record);
    const double selection = val.empty() ? record.train_loss : record.val_loss;
    if (selection < result.best_loss) {
      result.best_loss = selection;
      result.best_epoch = record.epoch;
      result.best_parameters = snapshot_parameters(model);
    }
    if (on_epoch && !on_epoch(record)) break;
  }
  result.optimizer = trainer.optimizer_state();
  return result;
}

}  // namespace trajformer
