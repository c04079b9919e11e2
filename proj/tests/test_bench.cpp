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


#include <algorithm>
#include <cmath>
#include <cstring>

#include <gtest/gtest.h>

#include "trajformer/bench.hpp"
#include "trajformer/training.hpp"

using namespace trajformer;

namespace {

ModelConfig bench_config(std::size_t t_pred) {
  ModelConfig c;
  c.d_model = 64;
  c.d_speed_embed = 32;
  c.n_heads = 4;
  c.d_ff = 128;
  c.t_pred = t_pred;
  return c;
}

NormalizedSample one_sample(std::size_t t_pred) {
  SyntheticConfig sc;
  sc.n_samples = 1;
  sc.t_pred = t_pred;
  return normalize_all(gen_synthetic(sc), NormalizationConfig{}).front();
}

// Average ranks; ties are not expected for timing ratios.
double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      r[i] = static_cast<double>(std::count_if(v.begin(), v.end(), [&](double x) { return x < v[i]; }));
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double d2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1));
}

}  // namespace

TEST(Bench, SingleRepStatistics) {
  const TrajectoryTransformer m(bench_config(5), 1);
  const LatencyReport r = time_forward(m, one_sample(5), 1, 0);
  ASSERT_EQ(r.samples_ms.size(), 1u);
  EXPECT_EQ(r.median_ms, r.mean_ms);
  EXPECT_EQ(r.median_ms, r.samples_ms[0]);
  EXPECT_EQ(r.p90_ms, r.median_ms);
}

TEST(Bench, TimingsArePositiveAndFinite) {
  const TrajectoryTransformer m(bench_config(5), 1);
  for (DecodeMode mode : {DecodeMode::single_pass, DecodeMode::autoregressive}) {
    const LatencyReport r = time_forward(m, one_sample(5), 15, 2, mode);
    EXPECT_EQ(r.reps, 15u);
    EXPECT_EQ(r.warmup_reps, 2u);
    EXPECT_EQ(r.mode, mode);
    EXPECT_EQ(r.param_count, m.param_count());
    EXPECT_LE(r.median_ms, r.p90_ms);
    for (double t : r.samples_ms) {
      EXPECT_TRUE(std::isfinite(t));
      EXPECT_GT(t, 0.0);
    }
  }
}

TEST(Bench, ZeroRepsIsAnError) {
  const TrajectoryTransformer m(bench_config(5), 1);
  EXPECT_THROW(time_forward(m, one_sample(5), 0, 0), ContractError);
  EXPECT_THROW(compare_decoders(m, one_sample(5), 0, 0), ContractError);
}

TEST(Bench, RatioNearOneAtHorizonOne) {
  const TrajectoryTransformer m(bench_config(1), 1);
  const DecoderComparison c = compare_decoders(m, one_sample(1), 100, 10);
  EXPECT_GT(c.speedup, 0.5);
  EXPECT_LT(c.speedup, 2.0);
}

TEST(Bench, RatioGrowsWithHorizon) {
  std::vector<double> horizons{5, 15, 45}, ratios;
  for (double h : horizons) {
    const auto t = static_cast<std::size_t>(h);
    const TrajectoryTransformer m(bench_config(t), 1);
    ratios.push_back(compare_decoders(m, one_sample(t), 30, 5).speedup);
  }
  EXPECT_GT(spearman(horizons, ratios), 0.9) << ratios[0] << ' ' << ratios[1] << ' ' << ratios[2];
}

TEST(Bench, RefusesDuringTraining) {
  const TrajectoryTransformer m(bench_config(5), 1);
  {
    TrainingScope scope;
    EXPECT_THROW(time_forward(m, one_sample(5), 1, 0), ContractError);
    EXPECT_THROW(compare_decoders(m, one_sample(5), 1, 0), ContractError);
  }
  EXPECT_NO_THROW(time_forward(m, one_sample(5), 1, 0));
}

TEST(Bench, ParametersUnchanged) {
  const TrajectoryTransformer m(bench_config(5), 2);
  std::vector<std::vector<double>> before;
  for (const auto& p : m.named_parameters()) before.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  compare_decoders(m, one_sample(5), 5, 1);
  const auto after = m.named_parameters();
  for (std::size_t i = 0; i < after.size(); ++i) {
    EXPECT_EQ(std::memcmp(before[i].data(), after[i].tensor.values().data(), before[i].size() * 8), 0)
        << after[i].name;
  }
}

TEST(Bench, BothPathsShapeIdentical) {
  const TrajectoryTransformer m(bench_config(7), 2);
  const ModelInput in = make_input(one_sample(7));
  const ad::Tensor a = m.forward(in), b = m.decode_autoregressive(in);
  EXPECT_EQ(a.shape(), b.shape());
  EXPECT_EQ(a.shape(), (std::vector<std::size_t>{7, 4}));
}

TEST(Bench, CsvAndSummary) {
  const TrajectoryTransformer m(bench_config(5), 1);
  const DecoderComparison c = compare_decoders(m, one_sample(5), 3, 0);
  EXPECT_NEAR(c.speedup, c.autoregressive.median_ms / c.single_pass.median_ms, 1e-12);
  std::ostringstream csv, summary;
  c.write_csv(csv);
  c.write_summary(summary);
  std::istringstream lines(csv.str());
  std::string header, row1, row2, extra;
  std::getline(lines, header);
  std::getline(lines, row1);
  std::getline(lines, row2);
  EXPECT_FALSE(std::getline(lines, extra));
  EXPECT_EQ(header, "mode,t_pred,reps,warmup_reps,median_ms,p90_ms,mean_ms,param_count,speedup");
  EXPECT_EQ(row1.rfind("single_pass,5,3,0,", 0), 0u);
  EXPECT_EQ(row2.rfind("autoregressive,5,3,0,", 0), 0u);
  EXPECT_EQ(std::count(row1.begin(), row1.end(), ','), 8);
  EXPECT_NE(summary.str().find("speedup"), std::string::npos);
}
