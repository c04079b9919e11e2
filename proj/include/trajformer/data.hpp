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
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"
#include "trajformer/random.hpp"

namespace trajformer {

/// Pedestrian box in image pixels: center, width, height.
struct BoundingBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double h = 1.0;

  bool operator==(const BoundingBox&) const = default;
};

/// One observed window with its ground-truth future.
struct TrackSample {
  std::string track_id;
  std::vector<BoundingBox> obs_boxes;
  std::vector<double> obs_speeds;  // m/s, or category indices
  std::vector<BoundingBox> future_boxes;
  double frame_rate = 30.0;

  bool operator==(const TrackSample&) const = default;
};

struct Dataset {
  SpeedMode speed_mode = SpeedMode::numeric;
  std::size_t speed_vocab = 5;
  std::vector<TrackSample> samples;
};

// ---------------------------------------------------------------------------
// Line-delimited dataset files
// ---------------------------------------------------------------------------

namespace detail {

inline BoundingBox parse_box(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 4) throw DataError(where + ": box must be an array of 4 numbers");
  double v[4];
  for (std::size_t i = 0; i < 4; ++i) {
    if (!j[i].is_number()) throw DataError(where + ": box values must be numbers");
    v[i] = j[i].get<double>();
    if (!std::isfinite(v[i])) throw DataError(where + ": non-finite box value");
  }
  if (v[2] < 0.0 || v[3] < 0.0) throw DataError(where + ": negative box width or height");
  return {v[0], v[1], v[2], v[3]};
}

inline std::vector<BoundingBox> parse_boxes(const nlohmann::json& record, const char* key,
                                            std::size_t expected, const std::string& where) {
  if (!record.contains(key) || !record.at(key).is_array()) {
    throw DataError(where + ": missing array \"" + key + "\"");
  }
  const auto& arr = record.at(key);
  if (arr.size() != expected) {
    throw DataError(where + ": " + key + " has " + std::to_string(arr.size()) + " frames, expected " +
                    std::to_string(expected));
  }
  std::vector<BoundingBox> boxes;
  boxes.reserve(expected);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    boxes.push_back(parse_box(arr[i], where + ": " + key + "[" + std::to_string(i) + "]"));
  }
  return boxes;
}

inline nlohmann::json box_json(const BoundingBox& b) { return nlohmann::json::array({b.cx, b.cy, b.w, b.h}); }

}  // namespace detail

/**
 * Parses a trajset stream. Each non-empty line is one JSON object. The first
 * may be a header {"format":"trajset","version":1,"speed_mode":...}; without
 * one, speeds are numeric. Every record must hold exactly t_obs observed boxes
 * and speeds and t_pred future boxes.
 */
inline Dataset parse_samples(std::istream& in, std::size_t t_obs, std::size_t t_pred,
                             const std::string& source = "<stream>") {
  Dataset data;
  bool vocab_declared = false;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw DataError(where + ": expected a JSON object");
    if (first && j.contains("format")) {
      first = false;
      if (j.at("format") != "trajset") throw DataError(where + ": unknown format " + j.at("format").dump());
      if (!j.contains("version") || j.at("version") != 1) {
        throw DataError(where + ": unsupported trajset version " + j.value("version", nlohmann::json()).dump());
      }
      if (j.contains("speed_mode")) {
        try {
          data.speed_mode = parse_speed_mode(j.at("speed_mode").get<std::string>());
        } catch (const std::exception& e) {
          throw DataError(where + ": " + e.what());
        }
      }
      if (j.contains("vocab_size")) {
        data.speed_vocab = j.at("vocab_size").get<std::size_t>();
        vocab_declared = true;
      }
      continue;
    }
    first = false;
    TrackSample s;
    std::string rec = where;
    if (!j.contains("track_id") || !j.at("track_id").is_string()) {
      throw DataError(where + ": missing string \"track_id\"");
    }
    s.track_id = j.at("track_id").get<std::string>();
    rec += ": record '" + s.track_id + "'";
    s.obs_boxes = detail::parse_boxes(j, "obs_boxes", t_obs, rec);
    s.future_boxes = detail::parse_boxes(j, "future_boxes", t_pred, rec);
    if (!j.contains("obs_speeds") || !j.at("obs_speeds").is_array()) {
      throw DataError(rec + ": missing array \"obs_speeds\"");
    }
    const auto& speeds = j.at("obs_speeds");
    if (speeds.size() != t_obs) {
      throw DataError(rec + ": obs_speeds has " + std::to_string(speeds.size()) + " values, expected " +
                      std::to_string(t_obs));
    }
    for (const auto& v : speeds) {
      if (data.speed_mode == SpeedMode::categorical) {
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
          throw DataError(rec + ": categorical speeds must be non-negative integers");
        }
        if (vocab_declared && v.get<std::size_t>() >= data.speed_vocab) {
          throw DataError(rec + ": speed category " + v.dump() + " outside vocabulary of size " +
                          std::to_string(data.speed_vocab));
        }
      } else if (!v.is_number() || !std::isfinite(v.get<double>())) {
        throw DataError(rec + ": speeds must be finite numbers");
      }
      s.obs_speeds.push_back(v.get<double>());
    }
    if (j.contains("frame_rate")) s.frame_rate = j.at("frame_rate").get<double>();
    data.samples.push_back(std::move(s));
  }
  return data;
}

inline Dataset load_samples(const std::filesystem::path& path, std::size_t t_obs = 15, std::size_t t_pred = 45) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  return parse_samples(in, t_obs, t_pred, path.string());
}

/// Inverse of parse_samples. A header is written only for categorical data.
inline void write_samples(std::ostream& out, const Dataset& data) {
  if (data.speed_mode == SpeedMode::categorical) {
    out << nlohmann::json{{"format", "trajset"}, {"version", 1}, {"speed_mode", "categorical"},
                          {"vocab_size", data.speed_vocab}}
               .dump()
        << '\n';
  }
  for (const TrackSample& s : data.samples) {
    nlohmann::json obs = nlohmann::json::array(), fut = nlohmann::json::array(), speeds = nlohmann::json::array();
    for (const auto& b : s.obs_boxes) obs.push_back(detail::box_json(b));
    for (const auto& b : s.future_boxes) fut.push_back(detail::box_json(b));
    for (double v : s.obs_speeds) {
      if (data.speed_mode == SpeedMode::categorical) {
        speeds.push_back(static_cast<std::int64_t>(v));
      } else {
        speeds.push_back(v);
      }
    }
    nlohmann::json rec{{"track_id", s.track_id}, {"obs_boxes", obs}, {"obs_speeds", speeds}, {"future_boxes", fut}};
    if (s.frame_rate != 30.0) rec["frame_rate"] = s.frame_rate;
    out << rec.dump() << '\n';
  }
}

inline void save_samples(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  write_samples(out, data);
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

/// Sliding windows over one contiguous track:
/// floor((len - t_obs - t_pred) / stride) + 1 windows, none if the track is too short.
inline std::vector<TrackSample> window_track(const std::string& track_id, std::span<const BoundingBox> boxes,
                                             std::span<const double> speeds, std::size_t t_obs,
                                             std::size_t t_pred, std::size_t stride = 1,
                                             double frame_rate = 30.0) {
  if (boxes.size() != speeds.size()) {
    throw DataError("window_track: track '" + track_id + "' has " + std::to_string(boxes.size()) +
                    " boxes but " + std::to_string(speeds.size()) + " speeds");
  }
  if (stride == 0) throw ConfigError("window_track: stride must be >= 1");
  std::vector<TrackSample> windows;
  const std::size_t span_len = t_obs + t_pred;
  if (boxes.size() < span_len) return windows;
  for (std::size_t start = 0; start + span_len <= boxes.size(); start += stride) {
    TrackSample s;
    s.track_id = track_id + "#" + std::to_string(start);
    s.obs_boxes.assign(boxes.begin() + static_cast<std::ptrdiff_t>(start),
                       boxes.begin() + static_cast<std::ptrdiff_t>(start + t_obs));
    s.obs_speeds.assign(speeds.begin() + static_cast<std::ptrdiff_t>(start),
                        speeds.begin() + static_cast<std::ptrdiff_t>(start + t_obs));
    s.future_boxes.assign(boxes.begin() + static_cast<std::ptrdiff_t>(start + t_obs),
                          boxes.begin() + static_cast<std::ptrdiff_t>(start + span_len));
    s.frame_rate = frame_rate;
    windows.push_back(std::move(s));
  }
  return windows;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct NormalizationConfig {
  double image_width = 1920.0;
  double image_height = 1080.0;
  double max_speed = 30.0;  // m/s; numeric speeds are divided by this

  bool operator==(const NormalizationConfig&) const = default;

  void validate() const {
    if (!(image_width > 0.0) || !(image_height > 0.0)) {
      throw ConfigError("normalization: image size must be positive, got " + std::to_string(image_width) +
                        " x " + std::to_string(image_height));
    }
    if (!(max_speed > 0.0)) throw ConfigError("normalization: max_speed must be positive");
  }
};

inline nlohmann::json to_json(const NormalizationConfig& c) {
  return {{"image_width", c.image_width}, {"image_height", c.image_height}, {"max_speed", c.max_speed}};
}

inline NormalizationConfig normalization_from_json(const nlohmann::json& j) {
  NormalizationConfig c;
  c.image_width = j.value("image_width", c.image_width);
  c.image_height = j.value("image_height", c.image_height);
  c.max_speed = j.value("max_speed", c.max_speed);
  c.validate();
  return c;
}

/// Maps between pixel boxes and offsets from the last observed box.
struct Normalizer {
  BoundingBox anchor;
  NormalizationConfig scale;
  SpeedMode speed_mode = SpeedMode::numeric;

  void to_offsets(const BoundingBox& b, double* out) const {
    out[0] = (b.cx - anchor.cx) / scale.image_width;
    out[1] = (b.cy - anchor.cy) / scale.image_height;
    out[2] = (b.w - anchor.w) / scale.image_width;
    out[3] = (b.h - anchor.h) / scale.image_height;
  }

  BoundingBox from_offsets(const double* in) const {
    return {in[0] * scale.image_width + anchor.cx, in[1] * scale.image_height + anchor.cy,
            in[2] * scale.image_width + anchor.w, in[3] * scale.image_height + anchor.h};
  }
};

/// Model-ready sample: flattened offsets (4 per frame) and scaled speeds.
struct NormalizedSample {
  std::string track_id;
  std::vector<double> obs;
  std::vector<double> speeds;
  std::vector<double> future;
  Normalizer normalizer;
};

inline std::pair<NormalizedSample, Normalizer> normalize(const TrackSample& sample, const NormalizationConfig& cfg,
                                                         SpeedMode mode = SpeedMode::numeric) {
  cfg.validate();
  if (sample.obs_boxes.empty()) throw DataError("normalize: sample '" + sample.track_id + "' has no observations");
  Normalizer norm{sample.obs_boxes.back(), cfg, mode};
  NormalizedSample out;
  out.track_id = sample.track_id;
  out.obs.resize(sample.obs_boxes.size() * 4);
  out.future.resize(sample.future_boxes.size() * 4);
  for (std::size_t i = 0; i < sample.obs_boxes.size(); ++i) norm.to_offsets(sample.obs_boxes[i], &out.obs[i * 4]);
  for (std::size_t i = 0; i < sample.future_boxes.size(); ++i) {
    norm.to_offsets(sample.future_boxes[i], &out.future[i * 4]);
  }
  out.speeds = sample.obs_speeds;
  if (mode == SpeedMode::numeric) {
    for (double& s : out.speeds) s /= cfg.max_speed;
  }
  out.normalizer = norm;
  return {std::move(out), norm};
}

/// Prediction offsets (4 values per frame) back to pixel boxes.
inline std::vector<BoundingBox> denormalize(std::span<const double> pred, const Normalizer& norm) {
  if (pred.size() % 4 != 0) throw ShapeError("denormalize: prediction length must be a multiple of 4");
  std::vector<BoundingBox> boxes;
  boxes.reserve(pred.size() / 4);
  for (std::size_t i = 0; i < pred.size(); i += 4) boxes.push_back(norm.from_offsets(pred.data() + i));
  return boxes;
}

/// Full inverse of normalize().
inline TrackSample denormalize(const NormalizedSample& s) {
  TrackSample out;
  out.track_id = s.track_id;
  out.obs_boxes = denormalize(s.obs, s.normalizer);
  out.future_boxes = denormalize(s.future, s.normalizer);
  out.obs_speeds = s.speeds;
  if (s.normalizer.speed_mode == SpeedMode::numeric) {
    for (double& v : out.obs_speeds) v *= s.normalizer.scale.max_speed;
  }
  return out;
}

inline std::vector<NormalizedSample> normalize_all(const Dataset& data, const NormalizationConfig& cfg) {
  std::vector<NormalizedSample> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) out.push_back(normalize(s, cfg, data.speed_mode).first);
  return out;
}

/// Stacks the observed part of the selected samples into one model batch.
inline ModelInput make_input(std::span<const NormalizedSample> samples, std::span<const std::size_t> indices) {
  ModelInput in;
  in.batch = indices.size();
  for (std::size_t i : indices) {
    in.boxes.insert(in.boxes.end(), samples[i].obs.begin(), samples[i].obs.end());
    in.speeds.insert(in.speeds.end(), samples[i].speeds.begin(), samples[i].speeds.end());
  }
  return in;
}

inline ModelInput make_input(const NormalizedSample& sample) {
  return {1, sample.obs, sample.speeds};
}

// ---------------------------------------------------------------------------
// Synthetic speed-coupled trajectories
// ---------------------------------------------------------------------------

struct SyntheticConfig {
  std::size_t n_samples = 256;
  std::uint64_t seed = 0;
  std::size_t t_obs = 15;
  std::size_t t_pred = 45;
  double velocity_range = 3.0;   // px/frame; |vx| <= range, |vy| <= range / 4
  double speed_coupling = 0.15;  // k: px of horizontal drift per (m/s * frame)
  double noise_sigma = 2.0;      // px, added to cx and cy
  double image_width = 1920.0;
  double image_height = 1080.0;
  double max_ego_speed = 15.0;   // m/s
  std::size_t speed_changes = 1;  // change points inside the observed window
  SpeedMode speed_mode = SpeedMode::numeric;
  std::size_t speed_vocab = 5;
  double frame_rate = 30.0;

  void validate() const {
    if (n_samples < 1) throw ConfigError("synthetic: n_samples must be >= 1");
    if (t_obs < 1 || t_pred < 1) throw ConfigError("synthetic: t_obs and t_pred must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ConfigError("synthetic: noise_sigma must be >= 0");
    if (!(velocity_range >= 0.0)) throw ConfigError("synthetic: velocity_range must be >= 0");
    if (!(max_ego_speed >= 0.0)) throw ConfigError("synthetic: max_ego_speed must be >= 0");
    if (!(image_width > 0.0) || !(image_height > 0.0)) throw ConfigError("synthetic: image size must be positive");
    if (speed_mode == SpeedMode::categorical && speed_vocab < 1) throw ConfigError("synthetic: speed_vocab must be >= 1");
  }
};

/// Latent parameters of one synthetic track, exposed for closed-form oracles.
struct SyntheticTrack {
  BoundingBox start;
  double vx = 0.0, vy = 0.0;  // px/frame
  double dh = 0.0;            // height growth, px/frame
  std::vector<double> speed;  // m/s for all t_obs + t_pred frames
  std::vector<double> drift;  // k * cumulative speed, per frame
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::size_t speed_category(double speed, const SyntheticConfig& cfg) {
  if (cfg.max_ego_speed <= 0.0) return 0;
  const auto bin = static_cast<std::size_t>(std::floor(speed / cfg.max_ego_speed * static_cast<double>(cfg.speed_vocab)));
  return std::min(bin, cfg.speed_vocab - 1);
}

}  // namespace detail

/**
 * Draws the latent parameters of sample `index`. Each sample has its own
 * generator seeded from (seed, index), so samples are independent of n_samples
 * and can be produced in any order.
 *
 * Ego speed is piecewise constant: a starting value plus `speed_changes`
 * jumps at frames inside the observed window, then held over the horizon.
 * Horizontal drift is k times the cumulative speed.
 */
inline SyntheticTrack synthetic_track(const SyntheticConfig& cfg, std::size_t index) {
  Rng rng(detail::mix_seed(cfg.seed, index));
  SyntheticTrack t;
  const double h0 = uniform(rng, 80.0, 200.0);
  t.start = {uniform(rng, 0.25, 0.75) * cfg.image_width, uniform(rng, 0.45, 0.6) * cfg.image_height, 0.41 * h0, h0};
  t.vx = uniform(rng, -cfg.velocity_range, cfg.velocity_range);
  t.vy = uniform(rng, -0.25 * cfg.velocity_range, 0.25 * cfg.velocity_range);
  t.dh = uniform(rng, -0.1, 0.3);
  const std::size_t total = cfg.t_obs + cfg.t_pred;
  std::vector<std::pair<std::size_t, double>> changes;
  const double initial = uniform(rng, 0.0, cfg.max_ego_speed);
  for (std::size_t c = 0; c < cfg.speed_changes && cfg.t_obs > 1; ++c) {
    const std::size_t frame = 1 + uniform_index(rng, cfg.t_obs - 1);
    changes.emplace_back(frame, uniform(rng, 0.0, cfg.max_ego_speed));
  }
  std::stable_sort(changes.begin(), changes.end(), [](auto& a, auto& b) { return a.first < b.first; });
  t.speed.assign(total, initial);
  for (const auto& [frame, value] : changes) {
    std::fill(t.speed.begin() + static_cast<std::ptrdiff_t>(frame), t.speed.end(), value);
  }
  t.drift.resize(total);
  double cumulative = 0.0;
  for (std::size_t f = 0; f < total; ++f) {
    cumulative += t.speed[f];
    t.drift[f] = cfg.speed_coupling * cumulative;
  }
  return t;
}

/// Noise-free box of a synthetic track at frame f.
inline BoundingBox synthetic_clean_box(const SyntheticTrack& t, std::size_t f) {
  const double fd = static_cast<double>(f);
  const double h = t.start.h + t.dh * fd;
  return {t.start.cx + t.vx * fd + t.drift[f], t.start.cy + t.vy * fd, 0.41 * h, h};
}

inline Dataset gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Dataset data;
  data.speed_mode = cfg.speed_mode;
  data.speed_vocab = cfg.speed_vocab;
  data.samples.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    const SyntheticTrack track = synthetic_track(cfg, i);
    Rng noise(detail::mix_seed(cfg.seed ^ 0xA5A5A5A5A5A5A5A5ULL, i));
    TrackSample s;
    s.track_id = "syn" + std::to_string(i);
    s.frame_rate = cfg.frame_rate;
    const std::size_t total = cfg.t_obs + cfg.t_pred;
    for (std::size_t f = 0; f < total; ++f) {
      BoundingBox b = synthetic_clean_box(track, f);
      if (cfg.noise_sigma > 0.0) {
        b.cx += cfg.noise_sigma * standard_normal(noise);
        b.cy += cfg.noise_sigma * standard_normal(noise);
      }
      if (f < cfg.t_obs) {
        s.obs_boxes.push_back(b);
        s.obs_speeds.push_back(cfg.speed_mode == SpeedMode::numeric
                                   ? track.speed[f]
                                   : static_cast<double>(detail::speed_category(track.speed[f], cfg)));
      } else {
        s.future_boxes.push_back(b);
      }
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

}  // namespace trajformer
