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

#include <cstddef>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "trajformer/data.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"

namespace trajformer {

/// Frames in a horizon of `seconds` at `fps` (0.5 s at 30 fps -> 15).
inline std::size_t horizon_frames(double seconds, double fps = 30.0) {
  return static_cast<std::size_t>(seconds * fps + 0.5);
}

namespace detail {

inline void check_horizon(std::size_t pred, std::size_t gt, std::size_t horizon, const char* what) {
  if (pred != gt) {
    throw ShapeError(std::string(what) + ": prediction has " + std::to_string(pred) + " frames, ground truth " +
                     std::to_string(gt));
  }
  if (horizon < 1 || horizon > pred) {
    throw ShapeError(std::string(what) + ": horizon " + std::to_string(horizon) + " outside [1, " +
                     std::to_string(pred) + "]");
  }
}

}  // namespace detail

/// Mean squared error over the two opposing corners, frames [0, horizon).
inline double mse_corners(std::span<const BoundingBox> pred, std::span<const BoundingBox> gt, std::size_t horizon) {
  detail::check_horizon(pred.size(), gt.size(), horizon, "mse_corners");
  double total = 0.0;
  for (std::size_t f = 0; f < horizon; ++f) {
    const BoundingBox& p = pred[f];
    const BoundingBox& g = gt[f];
    const double corners[4] = {
        (p.cx - p.w / 2) - (g.cx - g.w / 2),
        (p.cy - p.h / 2) - (g.cy - g.h / 2),
        (p.cx + p.w / 2) - (g.cx + g.w / 2),
        (p.cy + p.h / 2) - (g.cy + g.h / 2),
    };
    for (double e : corners) total += e * e;
  }
  return total / static_cast<double>(4 * horizon);
}

/// Mean squared error of box centers, frames [0, horizon).
inline double cmse(std::span<const BoundingBox> pred, std::span<const BoundingBox> gt, std::size_t horizon) {
  detail::check_horizon(pred.size(), gt.size(), horizon, "cmse");
  double total = 0.0;
  for (std::size_t f = 0; f < horizon; ++f) {
    const double ex = pred[f].cx - gt[f].cx;
    const double ey = pred[f].cy - gt[f].cy;
    total += ex * ex + ey * ey;
  }
  return total / static_cast<double>(2 * horizon);
}

/// Center MSE of the final frame only.
inline double cfmse(std::span<const BoundingBox> pred, std::span<const BoundingBox> gt) {
  detail::check_horizon(pred.size(), gt.size(), pred.size(), "cfmse");
  const std::size_t last = pred.size() - 1;
  return cmse(pred.subspan(last), gt.subspan(last), 1);
}

/// Benchmark columns in pixel^2, averaged per sample then across samples.
struct EvalReport {
  double mse_05 = 0.0;
  double mse_10 = 0.0;
  double mse_15 = 0.0;
  double cmse_15 = 0.0;
  double cfmse_15 = 0.0;
  std::size_t n_samples = 0;

  static constexpr const char* kCsvHeader = "mse_05,mse_10,mse_15,cmse_15,cfmse_15,n_samples";

  std::string csv_row() const {
    std::ostringstream out;
    out << std::setprecision(17) << mse_05 << ',' << mse_10 << ',' << mse_15 << ',' << cmse_15 << ','
        << cfmse_15 << ',' << n_samples;
    return out.str();
  }

  void write_csv(std::ostream& out) const { out << kCsvHeader << '\n' << csv_row() << '\n'; }
};

/// Metrics for one sample; horizons are 15/30/45 frames at 30 fps.
inline EvalReport sample_metrics(std::span<const BoundingBox> pred, std::span<const BoundingBox> gt,
                                 double fps = 30.0) {
  EvalReport r;
  r.mse_05 = mse_corners(pred, gt, horizon_frames(0.5, fps));
  r.mse_10 = mse_corners(pred, gt, horizon_frames(1.0, fps));
  r.mse_15 = mse_corners(pred, gt, horizon_frames(1.5, fps));
  r.cmse_15 = cmse(pred, gt, horizon_frames(1.5, fps));
  r.cfmse_15 = cfmse(pred, gt);
  r.n_samples = 1;
  return r;
}

/// Per-sample metrics, then the mean over samples.
inline EvalReport evaluate_predictions(std::span<const std::vector<BoundingBox>> preds,
                                       std::span<const std::vector<BoundingBox>> gts, double fps = 30.0) {
  if (preds.empty()) throw DataError("evaluate: empty dataset");
  if (preds.size() != gts.size()) throw ShapeError("evaluate: prediction and ground-truth counts differ");
  EvalReport sum;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const EvalReport r = sample_metrics(preds[i], gts[i], fps);
    sum.mse_05 += r.mse_05;
    sum.mse_10 += r.mse_10;
    sum.mse_15 += r.mse_15;
    sum.cmse_15 += r.cmse_15;
    sum.cfmse_15 += r.cfmse_15;
  }
  const double n = static_cast<double>(preds.size());
  sum.mse_05 /= n;
  sum.mse_10 /= n;
  sum.mse_15 /= n;
  sum.cmse_15 /= n;
  sum.cfmse_15 /= n;
  sum.n_samples = preds.size();
  return sum;
}

/// Pixel-space predictions for every sample, run in chunks of `chunk` samples.
inline std::vector<std::vector<BoundingBox>> predict_dataset(const TrajectoryTransformer& model,
                                                             std::span<const NormalizedSample> samples,
                                                             std::size_t chunk = 64) {
  std::vector<std::vector<BoundingBox>> out;
  out.reserve(samples.size());
  const std::size_t per_sample = model.config().t_pred * 4;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const ad::Tensor pred = model.forward(make_input(samples, idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.push_back(denormalize(pred.values().subspan(k * per_sample, per_sample), samples[idx[k]].normalizer));
    }
  }
  return out;
}

/// Runs the model on every sample and scores it against the ground-truth futures in pixel space.
inline EvalReport evaluate(const TrajectoryTransformer& model, const Dataset& data, const NormalizationConfig& norm) {
  if (data.samples.empty()) throw DataError("evaluate: empty dataset");
  const auto samples = normalize_all(data, norm);
  const auto preds = predict_dataset(model, samples);
  std::vector<std::vector<BoundingBox>> gts;
  gts.reserve(data.samples.size());
  for (const auto& s : data.samples) gts.push_back(s.future_boxes);
  return evaluate_predictions(preds, gts, data.samples.front().frame_rate);
}

}  // namespace trajformer
