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
#include <chrono>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "trajformer/data.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"
#include "trajformer/training.hpp"

namespace trajformer {

enum class DecodeMode { single_pass, autoregressive };

inline std::string to_string(DecodeMode mode) {
  return mode == DecodeMode::single_pass ? "single_pass" : "autoregressive";
}

struct LatencyReport {
  DecodeMode mode = DecodeMode::single_pass;
  std::size_t reps = 0;
  std::size_t warmup_reps = 0;
  double median_ms = 0.0;
  double p90_ms = 0.0;
  double mean_ms = 0.0;
  std::size_t t_pred = 0;
  std::size_t param_count = 0;
  std::vector<double> samples_ms;  // one per measured rep, in measurement order

  static constexpr const char* kCsvHeader = "mode,t_pred,reps,warmup_reps,median_ms,p90_ms,mean_ms,param_count";

  std::string csv_row() const {
    std::ostringstream out;
    out << std::setprecision(9) << to_string(mode) << ',' << t_pred << ',' << reps << ',' << warmup_reps << ','
        << median_ms << ',' << p90_ms << ',' << mean_ms << ',' << param_count;
    return out.str();
  }
};

/// Linear-interpolated percentile (q in [0, 1]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

inline LatencyReport summarize_latency(DecodeMode mode, std::vector<double> samples_ms, std::size_t warmup,
                                       const TrajectoryTransformer& model) {
  LatencyReport r;
  r.mode = mode;
  r.reps = samples_ms.size();
  r.warmup_reps = warmup;
  r.median_ms = percentile(samples_ms, 0.5);
  r.p90_ms = percentile(samples_ms, 0.9);
  double total = 0.0;
  for (double v : samples_ms) total += v;
  r.mean_ms = total / static_cast<double>(samples_ms.size());
  r.t_pred = model.config().t_pred;
  r.param_count = model.param_count();
  r.samples_ms = std::move(samples_ms);
  return r;
}

namespace detail {

inline void refuse_during_training() {
  if (active_training_runs().load() > 0) {
    throw ContractError("benchmark refused: a training run is active in this process");
  }
}

inline double time_once(const TrajectoryTransformer& model, const ModelInput& input, DecodeMode mode) {
  const auto start = std::chrono::steady_clock::now();
  const ad::Tensor out =
      mode == DecodeMode::single_pass ? model.forward(input) : model.decode_autoregressive(input);
  const auto stop = std::chrono::steady_clock::now();
  // Keeps the result observable so the call cannot be elided.
  if (out.size() == 0) throw ContractError("empty prediction");
  return std::chrono::duration<double, std::milli>(stop - start).count();
}

}  // namespace detail

/// Batch-1 latency of one decode path on the calling thread; warmup runs are discarded.
inline LatencyReport time_forward(const TrajectoryTransformer& model, const NormalizedSample& sample,
                                  std::size_t reps, std::size_t warmup,
                                  DecodeMode mode = DecodeMode::single_pass) {
  if (reps < 1) throw ContractError("time_forward: reps must be >= 1");
  detail::refuse_during_training();
  const ModelInput input = make_input(sample);
  for (std::size_t i = 0; i < warmup; ++i) detail::time_once(model, input, mode);
  std::vector<double> samples;
  samples.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) samples.push_back(detail::time_once(model, input, mode));
  return summarize_latency(mode, std::move(samples), warmup, model);
}

struct DecoderComparison {
  LatencyReport single_pass;
  LatencyReport autoregressive;
  double speedup = 0.0;  // autoregressive median / single-pass median

  void write_csv(std::ostream& out) const {
    out << LatencyReport::kCsvHeader << ",speedup\n";
    out << single_pass.csv_row() << ',' << speedup << '\n';
    out << autoregressive.csv_row() << ',' << speedup << '\n';
  }

  void write_summary(std::ostream& out) const {
    out << std::fixed << std::setprecision(3) << "t_pred=" << single_pass.t_pred
        << " params=" << single_pass.param_count << "\n"
        << "  single-pass     median " << single_pass.median_ms << " ms  p90 " << single_pass.p90_ms << " ms\n"
        << "  autoregressive  median " << autoregressive.median_ms << " ms  p90 " << autoregressive.p90_ms
        << " ms\n"
        << "  speedup " << std::setprecision(2) << speedup << "x\n";
    out.unsetf(std::ios::floatfield);
  }
};

/// Times both decode paths with interleaved repetitions so slow drift affects both equally.
inline DecoderComparison compare_decoders(const TrajectoryTransformer& model, const NormalizedSample& sample,
                                          std::size_t reps, std::size_t warmup = 20) {
  if (reps < 1) throw ContractError("compare_decoders: reps must be >= 1");
  detail::refuse_during_training();
  const ModelInput input = make_input(sample);
  for (std::size_t i = 0; i < warmup; ++i) {
    detail::time_once(model, input, DecodeMode::single_pass);
    detail::time_once(model, input, DecodeMode::autoregressive);
  }
  std::vector<double> single, autoregressive;
  single.reserve(reps);
  autoregressive.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    // Alternate which path goes first.
    if (i % 2 == 0) {
      single.push_back(detail::time_once(model, input, DecodeMode::single_pass));
      autoregressive.push_back(detail::time_once(model, input, DecodeMode::autoregressive));
    } else {
      autoregressive.push_back(detail::time_once(model, input, DecodeMode::autoregressive));
      single.push_back(detail::time_once(model, input, DecodeMode::single_pass));
    }
  }
  DecoderComparison c;
  c.single_pass = summarize_latency(DecodeMode::single_pass, std::move(single), warmup, model);
  c.autoregressive = summarize_latency(DecodeMode::autoregressive, std::move(autoregressive), warmup, model);
  c.speedup = c.autoregressive.median_ms / c.single_pass.median_ms;
  return c;
}

}  // namespace trajformer
