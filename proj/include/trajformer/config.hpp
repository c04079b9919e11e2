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


// Flat run configuration shared by every subcommand.
//
// Values are resolved in three layers: built-in defaults, then a JSON config
// file, then command-line flags. Unknown keys and mistyped values are errors.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajformer/data.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"
#include "trajformer/training.hpp"

namespace trajformer {

enum class KeyGroup : unsigned {
  common = 1u << 0,
  window = 1u << 1,  // sequence lengths and speed encoding, shared by data and model
  model = 1u << 2,
  train = 1u << 3,
  synth = 1u << 4,
  image = 1u << 5,
  speed_scale = 1u << 6,
  bench = 1u << 7,
  data_path = 1u << 8,
  val_path = 1u << 9,
  checkpoint_path = 1u << 10,
};

constexpr unsigned operator|(KeyGroup a, KeyGroup b) { return static_cast<unsigned>(a) | static_cast<unsigned>(b); }
constexpr unsigned operator|(unsigned a, KeyGroup b) { return a | static_cast<unsigned>(b); }

struct ConfigKey {
  std::string name;
  nlohmann::json default_value;  // also fixes the value type
  std::string help;
  KeyGroup group;
};

inline const std::vector<ConfigKey>& config_keys() {
  using G = KeyGroup;
  using nlohmann::json;
  static const std::vector<ConfigKey> keys = {
      {"seed", json(std::uint64_t{0}), "seed for initialization, shuffling, data generation", G::common},
      {"data", json(""), "dataset file (JSONL)", G::data_path},
      {"val_data", json(""), "validation dataset; empty uses val_fraction of --data", G::val_path},
      {"checkpoint", json(""), "checkpoint file", G::checkpoint_path},
      {"out", json(""), "output file or run directory", G::common},

      {"t_obs", json(std::uint64_t{15}), "observed frames", G::window},
      {"t_pred", json(std::uint64_t{45}), "predicted frames", G::window},
      {"speed_mode", json("numeric"), "speed encoding: numeric or categorical", G::window},
      {"speed_vocab", json(std::uint64_t{5}), "number of categorical speed classes", G::window},

      {"d_model", json(std::uint64_t{256}), "model width", G::model},
      {"d_speed_embed", json(std::uint64_t{128}), "speed embedding width before projection", G::model},
      {"n_heads", json(std::uint64_t{16}), "attention heads", G::model},
      {"d_ff", json(std::uint64_t{1024}), "feed-forward hidden width", G::model},
      {"n_encoder_layers", json(std::uint64_t{1}), "encoder layers", G::model},
      {"n_decoder_layers", json(std::uint64_t{2}), "decoder layers", G::model},
      {"dropout", json(0.0), "dropout rate during training", G::model},
      {"use_location", json(true), "feed the location stream", G::model},
      {"use_speed", json(true), "feed the ego-speed stream", G::model},
      {"decoder_positional_encoding", json(true), "add positional encoding to decoder queries", G::model},
      {"layer_norm_eps", json(1e-5), "layer norm epsilon", G::model},

      {"batch_size", json(std::uint64_t{128}), "mini-batch size", G::train},
      {"epochs", json(std::uint64_t{200}), "training epochs", G::train},
      {"lr0", json(0.0005), "initial learning rate", G::train},
      {"lr_gamma", json(0.99), "per-epoch learning rate decay", G::train},
      {"adam_beta1", json(0.9), "Adam first moment decay", G::train},
      {"adam_beta2", json(0.999), "Adam second moment decay", G::train},
      {"adam_eps", json(1e-8), "Adam epsilon", G::train},
      {"shuffle", json(true), "reshuffle training samples every epoch", G::train},
      {"val_fraction", json(0.1), "held-out fraction when val_data is empty", G::train},

      {"n_samples", json(std::uint64_t{256}), "number of synthetic samples", G::synth},
      {"velocity_range", json(3.0), "max horizontal pedestrian velocity, px/frame", G::synth},
      {"speed_coupling", json(0.15), "horizontal drift per unit ego speed and frame", G::synth},
      {"noise_sigma", json(2.0), "box center noise, px", G::synth},
      {"max_ego_speed", json(15.0), "max synthetic ego speed, m/s", G::synth},
      {"speed_changes", json(std::uint64_t{1}), "ego speed change points in the observed window", G::synth},
      {"frame_rate", json(30.0), "frames per second", G::synth},

      {"image_width", json(1920.0), "image width, px", G::image},
      {"image_height", json(1080.0), "image height, px", G::image},
      {"max_speed", json(30.0), "numeric speed normalization, m/s", G::speed_scale},

      {"reps", json(std::uint64_t{200}), "timed repetitions per decode path", G::bench},
      {"warmup", json(std::uint64_t{20}), "untimed warmup repetitions", G::bench},
  };
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

namespace detail {

inline const char* type_name(const nlohmann::json& v) {
  if (v.is_boolean()) return "boolean";
  if (v.is_number_unsigned()) return "non-negative integer";
  if (v.is_number()) return "number";
  return "string";
}

/// Converts `value` to the type of `like`, or throws.
inline nlohmann::json coerce(const ConfigKey& key, const nlohmann::json& value) {
  const auto& like = key.default_value;
  auto fail = [&]() -> nlohmann::json {
    throw ConfigError("config key '" + key.name + "' expects a " + type_name(like) + ", got " + value.dump());
  };
  if (like.is_boolean()) return value.is_boolean() ? value : fail();
  if (like.is_number_unsigned()) {
    if (value.is_number_unsigned()) return value;
    if (value.is_number_integer() && value.get<std::int64_t>() >= 0) return value.get<std::uint64_t>();
    return fail();
  }
  if (like.is_number()) return value.is_number() ? nlohmann::json(value.get<double>()) : fail();
  return value.is_string() ? value : fail();
}

inline nlohmann::json parse_flag_value(const ConfigKey& key, const std::string& text) {
  const auto& like = key.default_value;
  auto fail = [&]() -> nlohmann::json {
    throw ConfigError("flag --" + key.name + " expects a " + type_name(like) + ", got '" + text + "'");
  };
  if (like.is_string()) return text;
  if (like.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    return fail();
  }
  std::size_t used = 0;
  try {
    if (like.is_number_unsigned()) {
      if (text.empty() || text.front() == '-') return fail();
      const auto v = std::stoull(text, &used);
      if (used != text.size()) return fail();
      return static_cast<std::uint64_t>(v);
    }
    const double v = std::stod(text, &used);
    if (used != text.size()) return fail();
    return v;
  } catch (const std::logic_error&) {
    return fail();
  }
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  /// Sets one key; the value must already have the key's type.
  void set(const std::string& name, const nlohmann::json& value) {
    const ConfigKey* key = find_config_key(name);
    if (!key) throw ConfigError("unknown config key '" + name + "'");
    values_[name] = detail::coerce(*key, value);
  }

  void set_from_string(const std::string& name, const std::string& text) {
    const ConfigKey* key = find_config_key(name);
    if (!key) throw ConfigError("unknown config key '" + name + "'");
    values_[name] = detail::parse_flag_value(*key, text);
  }

  /// Applies every key of a JSON object. Nested objects are flattened one
  /// level, so {"model": {"d_model": 64}} and {"d_model": 64} are the same.
  void merge(const nlohmann::json& doc, const std::string& source = "<config>") {
    if (!doc.is_object()) throw ConfigError(source + ": config must be a JSON object");
    for (const auto& [name, value] : doc.items()) {
      if (value.is_object()) {
        merge(value, source);
        continue;
      }
      try {
        set(name, value);
      } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
      }
    }
  }

  void merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    merge(doc, path.string());
  }

  const nlohmann::json& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ConfigError("unknown config key '" + name + "'");
    return *it;
  }

  template <typename T>
  T get(const std::string& name) const {
    return at(name).get<T>();
  }

  std::string path(const std::string& name) const { return get<std::string>(name); }

  /// Every key in registry order.
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& k : config_keys()) out[k.name] = nlohmann::ordered_json::parse(values_.at(k.name).dump());
    return out;
  }

  void save(const std::filesystem::path& file) const {
    std::ofstream out(file);
    if (!out) throw ConfigError("cannot write " + file.string());
    out << to_json().dump(2) << '\n';
  }

  ModelConfig model_config() const {
    ModelConfig c;
    c.t_obs = get<std::size_t>("t_obs");
    c.t_pred = get<std::size_t>("t_pred");
    c.d_model = get<std::size_t>("d_model");
    c.d_speed_embed = get<std::size_t>("d_speed_embed");
    c.n_heads = get<std::size_t>("n_heads");
    c.d_ff = get<std::size_t>("d_ff");
    c.n_encoder_layers = get<std::size_t>("n_encoder_layers");
    c.n_decoder_layers = get<std::size_t>("n_decoder_layers");
    c.dropout = get<double>("dropout");
    c.speed_mode = parse_speed_mode(get<std::string>("speed_mode"));
    c.speed_vocab = get<std::size_t>("speed_vocab");
    c.use_location = get<bool>("use_location");
    c.use_speed = get<bool>("use_speed");
    c.decoder_positional_encoding = get<bool>("decoder_positional_encoding");
    c.layer_norm_eps = get<double>("layer_norm_eps");
    c.validate();
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig c;
    c.batch_size = get<std::size_t>("batch_size");
    c.epochs = get<std::size_t>("epochs");
    c.lr0 = get<double>("lr0");
    c.lr_gamma = get<double>("lr_gamma");
    c.adam_beta1 = get<double>("adam_beta1");
    c.adam_beta2 = get<double>("adam_beta2");
    c.adam_eps = get<double>("adam_eps");
    c.seed = get<std::uint64_t>("seed");
    c.shuffle = get<bool>("shuffle");
    c.validate();
    return c;
  }

  SyntheticConfig synthetic_config() const {
    SyntheticConfig c;
    c.n_samples = get<std::size_t>("n_samples");
    c.seed = get<std::uint64_t>("seed");
    c.t_obs = get<std::size_t>("t_obs");
    c.t_pred = get<std::size_t>("t_pred");
    c.velocity_range = get<double>("velocity_range");
    c.speed_coupling = get<double>("speed_coupling");
    c.noise_sigma = get<double>("noise_sigma");
    c.image_width = get<double>("image_width");
    c.image_height = get<double>("image_height");
    c.max_ego_speed = get<double>("max_ego_speed");
    c.speed_changes = get<std::size_t>("speed_changes");
    c.speed_mode = parse_speed_mode(get<std::string>("speed_mode"));
    c.speed_vocab = get<std::size_t>("speed_vocab");
    c.frame_rate = get<double>("frame_rate");
    c.validate();
    return c;
  }

  NormalizationConfig normalization() const {
    NormalizationConfig c;
    c.image_width = get<double>("image_width");
    c.image_height = get<double>("image_height");
    c.max_speed = get<double>("max_speed");
    c.validate();
    return c;
  }

 private:
  nlohmann::json values_;
};

}  // namespace trajformer
