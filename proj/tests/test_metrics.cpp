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


#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "trajformer/metrics.hpp"

using namespace trajformer;

namespace {

std::vector<BoundingBox> random_track(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> pos(0.0, 1920.0), size(0.0, 300.0);
  std::vector<BoundingBox> out(n);
  for (auto& b : out) b = {pos(rng), pos(rng), size(rng), size(rng)};
  return out;
}

std::vector<BoundingBox> shifted(std::vector<BoundingBox> boxes, double dx, double dy) {
  for (auto& b : boxes) {
    b.cx += dx;
    b.cy += dy;
  }
  return boxes;
}

// Written against corner coordinates (x1, y1, x2, y2) directly.
struct Oracle {
  static double corners(const std::vector<BoundingBox>& p, const std::vector<BoundingBox>& g, std::size_t frames) {
    long double acc = 0;
    for (std::size_t f = 0; f < frames; ++f) {
      const double pc[4] = {p[f].cx - 0.5 * p[f].w, p[f].cy - 0.5 * p[f].h, p[f].cx + 0.5 * p[f].w,
                            p[f].cy + 0.5 * p[f].h};
      const double gc[4] = {g[f].cx - 0.5 * g[f].w, g[f].cy - 0.5 * g[f].h, g[f].cx + 0.5 * g[f].w,
                            g[f].cy + 0.5 * g[f].h};
      for (int k = 0; k < 4; ++k) acc += static_cast<long double>(pc[k] - gc[k]) * (pc[k] - gc[k]);
    }
    return static_cast<double>(acc / (4.0L * frames));
  }
  static double centers(const std::vector<BoundingBox>& p, const std::vector<BoundingBox>& g, std::size_t first,
                        std::size_t last) {
    long double acc = 0;
    for (std::size_t f = first; f < last; ++f) {
      acc += static_cast<long double>(p[f].cx - g[f].cx) * (p[f].cx - g[f].cx);
      acc += static_cast<long double>(p[f].cy - g[f].cy) * (p[f].cy - g[f].cy);
    }
    return static_cast<double>(acc / (2.0L * (last - first)));
  }
};

}  // namespace

TEST(Metrics, HandCasesOffsetThreeFour) {
  std::vector<BoundingBox> gt(45, BoundingBox{100, 200, 40, 80});
  const auto pred = shifted(gt, 3, 4);
  EXPECT_EQ(mse_corners(pred, gt, 45), 12.5);
  EXPECT_EQ(mse_corners(pred, gt, 15), 12.5);
  EXPECT_EQ(cmse(pred, gt, 45), 12.5);
  auto only_last = gt;
  only_last.back().cx += 3;
  only_last.back().cy += 4;
  only_last[0].cx += 1000;  // earlier frames do not matter
  EXPECT_EQ(cfmse(only_last, gt), 12.5);
}

TEST(Metrics, IdentityIsZero) {
  std::mt19937_64 rng(1);
  const auto gt = random_track(rng, 45);
  EXPECT_EQ(mse_corners(gt, gt, 45), 0.0);
  EXPECT_EQ(cmse(gt, gt, 30), 0.0);
  EXPECT_EQ(cfmse(gt, gt), 0.0);
}

TEST(Metrics, HorizonOutOfRange) {
  std::mt19937_64 rng(2);
  const auto a = random_track(rng, 10), b = random_track(rng, 10), c = random_track(rng, 9);
  EXPECT_THROW(mse_corners(a, b, 0), ShapeError);
  EXPECT_THROW(mse_corners(a, b, 11), ShapeError);
  EXPECT_THROW(cmse(a, b, 11), ShapeError);
  EXPECT_THROW(cmse(a, c, 5), ShapeError);
  EXPECT_THROW(cfmse(a, c), ShapeError);
  EXPECT_THROW(sample_metrics(a, b), ShapeError);  // needs 45 frames
}

TEST(Metrics, DegenerateBoxesCollapseToCenters) {
  std::mt19937_64 rng(3);
  auto p = random_track(rng, 45), g = random_track(rng, 45);
  for (auto* v : {&p, &g})
    for (auto& b : *v) b.w = b.h = 0;
  for (std::size_t h : {1, 15, 45}) EXPECT_DOUBLE_EQ(mse_corners(p, g, h), cmse(p, g, h));
}

TEST(Metrics, TranslationCovariance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_track(rng, 45), g = random_track(rng, 45);
    const double dx = std::uniform_real_distribution<double>(-500, 500)(rng);
    const double dy = std::uniform_real_distribution<double>(-500, 500)(rng);
    const auto ps = shifted(p, dx, dy), gs = shifted(g, dx, dy);
    const EvalReport a = sample_metrics(p, g), b = sample_metrics(ps, gs);
    EXPECT_NEAR(a.mse_05, b.mse_05, 1e-9 * a.mse_05);
    EXPECT_NEAR(a.mse_15, b.mse_15, 1e-9 * a.mse_15);
    EXPECT_NEAR(a.cmse_15, b.cmse_15, 1e-9 * a.cmse_15);
    EXPECT_NEAR(a.cfmse_15, b.cfmse_15, 1e-9 * a.cfmse_15);
  }
}

TEST(Metrics, ShortHorizonUsesOnlyPrefix) {
  std::mt19937_64 rng(5);
  const auto g = random_track(rng, 45);
  auto p = random_track(rng, 45);
  const EvalReport before = sample_metrics(p, g);
  for (std::size_t f = 15; f < 45; ++f) p[f].cx += 1e4;
  const EvalReport after = sample_metrics(p, g);
  EXPECT_EQ(before.mse_05, after.mse_05);
  EXPECT_NE(before.mse_10, after.mse_10);
  EXPECT_NE(before.mse_15, after.mse_15);
  EXPECT_EQ(horizon_frames(0.5), 15u);
  EXPECT_EQ(horizon_frames(1.0), 30u);
  EXPECT_EQ(horizon_frames(1.5), 45u);
}

TEST(Metrics, EvaluateMatchesBruteForce) {
  std::mt19937_64 rng(6);
  for (int report = 0; report < 100; ++report) {
    const std::size_t n = 1 + rng() % 12;
    std::vector<std::vector<BoundingBox>> preds, gts;
    for (std::size_t i = 0; i < n; ++i) {
      preds.push_back(random_track(rng, 45));
      gts.push_back(random_track(rng, 45));
    }
    double m05 = 0, m10 = 0, m15 = 0, c15 = 0, cf = 0;
    for (std::size_t i = 0; i < n; ++i) {
      m05 += Oracle::corners(preds[i], gts[i], 15) / n;
      m10 += Oracle::corners(preds[i], gts[i], 30) / n;
      m15 += Oracle::corners(preds[i], gts[i], 45) / n;
      c15 += Oracle::centers(preds[i], gts[i], 0, 45) / n;
      cf += Oracle::centers(preds[i], gts[i], 44, 45) / n;
    }
    const EvalReport r = evaluate_predictions(preds, gts);
    EXPECT_LE(testutil::relative_error(r.mse_05, m05), 1e-9);
    EXPECT_LE(testutil::relative_error(r.mse_10, m10), 1e-9);
    EXPECT_LE(testutil::relative_error(r.mse_15, m15), 1e-9);
    EXPECT_LE(testutil::relative_error(r.cmse_15, c15), 1e-9);
    EXPECT_LE(testutil::relative_error(r.cfmse_15, cf), 1e-9);
    EXPECT_EQ(r.n_samples, n);
  }
}

TEST(Metrics, SingleSampleEqualsSampleMetrics) {
  std::mt19937_64 rng(7);
  const std::vector<std::vector<BoundingBox>> p{random_track(rng, 45)}, g{random_track(rng, 45)};
  const EvalReport a = evaluate_predictions(p, g), b = sample_metrics(p[0], g[0]);
  EXPECT_EQ(a.mse_05, b.mse_05);
  EXPECT_EQ(a.mse_10, b.mse_10);
  EXPECT_EQ(a.mse_15, b.mse_15);
  EXPECT_EQ(a.cmse_15, b.cmse_15);
  EXPECT_EQ(a.cfmse_15, b.cfmse_15);
}

TEST(Metrics, EmptyDataset) {
  const std::vector<std::vector<BoundingBox>> none;
  EXPECT_THROW(evaluate_predictions(none, none), DataError);
  ModelConfig c;
  c.d_model = 8;
  c.d_speed_embed = 4;
  c.n_heads = 2;
  c.d_ff = 8;
  EXPECT_THROW(evaluate(TrajectoryTransformer(c), Dataset{}, NormalizationConfig{}), DataError);
}

TEST(Metrics, PerfectOracleGivesZeroReport) {
  std::mt19937_64 rng(8);
  std::vector<std::vector<BoundingBox>> g;
  for (int i = 0; i < 5; ++i) g.push_back(random_track(rng, 45));
  const EvalReport r = evaluate_predictions(g, g);
  EXPECT_EQ(r.mse_05, 0.0);
  EXPECT_EQ(r.mse_10, 0.0);
  EXPECT_EQ(r.mse_15, 0.0);
  EXPECT_EQ(r.cmse_15, 0.0);
  EXPECT_EQ(r.cfmse_15, 0.0);
}

TEST(Metrics, CsvColumns) {
  EvalReport r{1.5, 2, 3, 4, 5, 7};
  std::ostringstream out;
  r.write_csv(out);
  EXPECT_EQ(out.str(), "mse_05,mse_10,mse_15,cmse_15,cfmse_15,n_samples\n1.5,2,3,4,5,7\n");
}
