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

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"
#include "trajformer/ops.hpp"

namespace trajformer {

/// Per-epoch learning rate: lr0 * gamma^epoch.
inline double lr_at(std::size_t epoch, double lr0, double gamma) {
  return lr0 * std::pow(gamma, static_cast<double>(epoch));
}

/// sqrt(mean((pred - gt)^2)) over all elements. The gradient is zero when the loss is exactly zero.
inline ad::Tensor rmse_loss(const ad::Tensor& pred, const ad::Tensor& gt, ad::Tape* tape = nullptr) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("rmse_loss: prediction " + ad::to_string(pred.shape()) + " vs target " +
                     ad::to_string(gt.shape()));
  }
  const ad::Tensor diff = ad::sub(pred, gt, tape);
  return ad::sqrt(ad::mean(ad::mul(diff, diff, tape), tape), tape);
}

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments, one buffer per parameter tensor in parameter order.
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  bool operator==(const OptimizerState&) const = default;

  static OptimizerState for_parameters(std::span<const ad::Tensor> params) {
    OptimizerState s;
    for (const auto& p : params) {
      s.first_moment.emplace_back(p.size(), 0.0);
      s.second_moment.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

/// One bias-corrected Adam update of every parameter from its accumulated gradient.
inline void adam_step(std::span<ad::Tensor> params, OptimizerState& state, double lr,
                      const AdamSettings& settings = {}) {
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                        " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) + " has no gradient");
    }
    if (state.first_moment[i].size() != params[i].size()) {
      throw ContractError("adam_step: moment size mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(settings.beta1, t);
  const double correction2 = 1.0 - std::pow(settings.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    const auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = settings.beta1 * m[j] + (1.0 - settings.beta1) * grad[j];
      v[j] = settings.beta2 * v[j] + (1.0 - settings.beta2) * grad[j] * grad[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      values[j] -= lr * m_hat / (std::sqrt(v_hat) + settings.eps);
    }
  }
}

}  // namespace trajformer
