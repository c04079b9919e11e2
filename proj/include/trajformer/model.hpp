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

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajformer/errors.hpp"
#include "trajformer/ops.hpp"
#include "trajformer/random.hpp"
#include "trajformer/tensor.hpp"

namespace trajformer {

enum class SpeedMode { numeric, categorical };

inline std::string to_string(SpeedMode mode) {
  return mode == SpeedMode::numeric ? "numeric" : "categorical";
}

inline SpeedMode parse_speed_mode(std::string_view text) {
  if (text == "numeric") return SpeedMode::numeric;
  if (text == "categorical") return SpeedMode::categorical;
  throw ConfigError("speed_mode must be \"numeric\" or \"categorical\", got \"" + std::string(text) + "\"");
}

/// Architecture hyper-parameters. Defaults are the published configuration
/// except for depth, which the publication leaves unstated.
struct ModelConfig {
  std::size_t t_obs = 15;
  std::size_t t_pred = 45;
  std::size_t d_model = 256;
  std::size_t d_speed_embed = 128;
  std::size_t n_heads = 16;
  std::size_t d_ff = 1024;
  std::size_t n_encoder_layers = 1;
  std::size_t n_decoder_layers = 2;
  double dropout = 0.0;
  SpeedMode speed_mode = SpeedMode::numeric;
  std::size_t speed_vocab = 5;
  // Modality switches for ablations; at least one must be on.
  bool use_location = true;
  bool use_speed = true;
  // Off only for the zero-query symmetry check.
  bool decoder_positional_encoding = true;
  double layer_norm_eps = 1e-5;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (t_obs < 1 || t_pred < 1) fail("t_obs and t_pred must be >= 1");
    if (d_model < 1 || d_speed_embed < 1 || d_ff < 1) fail("widths must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) {
      fail("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
           std::to_string(n_heads) + ")");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (!use_location && !use_speed) fail("at least one of use_location/use_speed must be true");
    if (speed_mode == SpeedMode::categorical && speed_vocab < 1) fail("speed_vocab must be >= 1");
    if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"t_obs", c.t_obs},
          {"t_pred", c.t_pred},
          {"d_model", c.d_model},
          {"d_speed_embed", c.d_speed_embed},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"n_encoder_layers", c.n_encoder_layers},
          {"n_decoder_layers", c.n_decoder_layers},
          {"dropout", c.dropout},
          {"speed_mode", to_string(c.speed_mode)},
          {"speed_vocab", c.speed_vocab},
          {"use_location", c.use_location},
          {"use_speed", c.use_speed},
          {"decoder_positional_encoding", c.decoder_positional_encoding},
          {"layer_norm_eps", c.layer_norm_eps}};
}

/// Reads every ModelConfig key present in `j`; absent keys keep their defaults.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    auto read = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    read("t_obs", c.t_obs);
    read("t_pred", c.t_pred);
    read("d_model", c.d_model);
    read("d_speed_embed", c.d_speed_embed);
    read("n_heads", c.n_heads);
    read("d_ff", c.d_ff);
    read("n_encoder_layers", c.n_encoder_layers);
    read("n_decoder_layers", c.n_decoder_layers);
    read("dropout", c.dropout);
    read("speed_vocab", c.speed_vocab);
    read("use_location", c.use_location);
    read("use_speed", c.use_speed);
    read("decoder_positional_encoding", c.decoder_positional_encoding);
    read("layer_norm_eps", c.layer_norm_eps);
    if (j.contains("speed_mode")) c.speed_mode = parse_speed_mode(j.at("speed_mode").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Closed-form number of trainable scalars for a configuration.
inline std::size_t param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, ds = c.d_speed_embed, ff = c.d_ff;
  const std::size_t location = c.use_location ? 4 * d + d : 0;
  std::size_t speed = 0;
  if (c.use_speed) {
    speed = (c.speed_mode == SpeedMode::numeric ? ds + ds : c.speed_vocab * ds) + ds * d + d;
  }
  const std::size_t attention = 4 * (d * d + d);
  const std::size_t norm = 2 * d;
  const std::size_t ffn = d * ff + ff + ff * d + d;
  const std::size_t encoder = c.n_encoder_layers * (attention + 2 * norm + ffn);
  const std::size_t decoder = c.n_decoder_layers * (2 * attention + 3 * norm + ffn);
  const std::size_t regressor = 4 * d + 4;
  return location + speed + encoder + decoder + regressor;
}

/// Fixed sinusoidal table [length, width]: channel 2i holds sin(pos / 10000^(2i/width)),
/// channel 2i+1 the cosine of the same angle, for pos = start_pos, start_pos + 1, ...
inline ad::Tensor sinusoidal_encoding(std::size_t length, std::size_t width, std::size_t start_pos = 0) {
  std::vector<double> table(length * width);
  for (std::size_t p = 0; p < length; ++p) {
    const double pos = static_cast<double>(start_pos + p);
    for (std::size_t c = 0; c < width; c += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(c) / static_cast<double>(width));
      table[p * width + c] = std::sin(angle);
      if (c + 1 < width) table[p * width + c + 1] = std::cos(angle);
    }
  }
  return ad::Tensor({length, width}, std::move(table));
}

/// Adds the sinusoidal encoding to every block of `seq_len` rows of `tokens` [B*seq_len, d].
inline ad::Tensor positional_encode(const ad::Tensor& tokens, std::size_t seq_len,
                                    std::size_t start_pos = 0, ad::Tape* tape = nullptr) {
  if (tokens.rank() != 2 || seq_len == 0 || tokens.dim(0) % seq_len != 0) {
    throw ShapeError("positional_encode: tokens " + ad::to_string(tokens.shape()) +
                     " are not whole sequences of length " + std::to_string(seq_len));
  }
  const std::size_t width = tokens.dim(1);
  const ad::Tensor table = sinusoidal_encoding(seq_len, width, start_pos);
  const std::size_t blocks = tokens.dim(0) / seq_len;
  std::vector<double> tiled(tokens.size());
  for (std::size_t b = 0; b < blocks; ++b) {
    std::copy(table.values().begin(), table.values().end(), tiled.begin() + b * seq_len * width);
  }
  return ad::add(tokens, ad::Tensor(tokens.shape(), std::move(tiled)), tape);
}

/// Temporal concatenation per sample: [B*T, d] (+) [B*T, d] -> [B*2T, d], location tokens first.
/// With one stream undefined the other is returned unchanged.
inline ad::Tensor fuse(const ad::Tensor& loc_tokens, const ad::Tensor& speed_tokens,
                       std::size_t batch, ad::Tape* tape = nullptr) {
  if (!loc_tokens.defined()) return speed_tokens;
  if (!speed_tokens.defined()) return loc_tokens;
  if (loc_tokens.shape() != speed_tokens.shape() || loc_tokens.rank() != 2 ||
      loc_tokens.dim(0) % batch != 0) {
    throw ShapeError("fuse: location tokens " + ad::to_string(loc_tokens.shape()) +
                     " and speed tokens " + ad::to_string(speed_tokens.shape()) + " differ");
  }
  const std::size_t len = loc_tokens.dim(0) / batch, d = loc_tokens.dim(1);
  const ad::Tensor loc = ad::reshape(loc_tokens, {batch, len, d}, tape);
  const ad::Tensor spd = ad::reshape(speed_tokens, {batch, len, d}, tape);
  return ad::reshape(ad::concat({loc, spd}, 1, tape), {batch * 2 * len, d}, tape);
}

struct Affine {
  ad::Tensor weight;  // [in, out]
  ad::Tensor bias;    // [out]
};

struct Norm {
  ad::Tensor gain;
  ad::Tensor bias;
};

struct AttentionWeights {
  Affine query, key, value, output;
};

struct EncoderLayer {
  AttentionWeights self_attention;
  Norm norm1;
  Affine ff_in, ff_out;
  Norm norm2;
};

struct DecoderLayer {
  AttentionWeights self_attention;
  Norm norm1;
  AttentionWeights cross_attention;
  Norm norm2;
  Affine ff_in, ff_out;
  Norm norm3;
};

/// Receives every attention weight tensor [B*heads, Lq, Lk] as it is computed.
using AttentionObserver = std::function<void(std::string_view site, const ad::Tensor& weights)>;

struct ForwardContext {
  ad::Tape* tape = nullptr;
  // Dropout is applied only when this is set and the configured rate is positive.
  Rng* dropout_rng = nullptr;
};

struct AttentionOptions {
  std::size_t batch = 1;
  std::size_t n_heads = 1;
  bool causal = false;
  std::string_view site = "attention";
  const AttentionObserver* observer = nullptr;
};

/**
 * Multi-head scaled dot-product attention.
 *
 * queries [B*Lq, d], keys_values [B*Lk, d]. Each head attends with scale
 * 1/sqrt(d / n_heads) and a softmax over the key axis; heads are concatenated
 * and passed through the output projection. Unmasked unless `causal`.
 */
inline ad::Tensor multi_head_attention(const ad::Tensor& queries, const ad::Tensor& keys_values,
                                       const AttentionWeights& w, const AttentionOptions& opt,
                                       ad::Tape* tape = nullptr) {
  if (queries.rank() != 2 || keys_values.rank() != 2 || queries.dim(1) != keys_values.dim(1)) {
    throw ShapeError("attention: queries " + ad::to_string(queries.shape()) + " and keys " +
                     ad::to_string(keys_values.shape()) + " are incompatible");
  }
  const std::size_t d = queries.dim(1);
  if (opt.n_heads == 0 || d % opt.n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(opt.n_heads) + " heads");
  }
  const ad::Tensor q = ad::split_heads(ad::linear(queries, w.query.weight, w.query.bias, tape), opt.batch, opt.n_heads, tape);
  const ad::Tensor k = ad::split_heads(ad::linear(keys_values, w.key.weight, w.key.bias, tape), opt.batch, opt.n_heads, tape);
  const ad::Tensor v = ad::split_heads(ad::linear(keys_values, w.value.weight, w.value.bias, tape), opt.batch, opt.n_heads, tape);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d / opt.n_heads));
  ad::Tensor scores = ad::scale(ad::bmm(q, k, /*transpose_b=*/true, tape), scale, tape);
  if (opt.causal) scores = ad::causal_mask(scores, tape);
  const ad::Tensor weights = ad::softmax(scores, 2, tape);
  if (opt.observer != nullptr && *opt.observer) (*opt.observer)(opt.site, weights);
  const ad::Tensor context = ad::merge_heads(ad::bmm(weights, v, false, tape), opt.batch, tape);
  return ad::linear(context, w.output.weight, w.output.bias, tape);
}

/// Normalized observed windows for a batch, flattened row-major.
struct ModelInput {
  std::size_t batch = 0;
  std::vector<double> boxes;   // batch * t_obs * 4
  std::vector<double> speeds;  // batch * t_obs; category indices in categorical mode
};

struct NamedParameter {
  std::string name;
  ad::Tensor tensor;
};

namespace detail {

// Atomic event counter that stays copyable with its owner.
class Counter {
 public:
  Counter() = default;
  Counter(const Counter& other) : value_(other.get()) {}
  Counter& operator=(const Counter& other) {
    value_.store(other.get());
    return *this;
  }
  void add(std::uint64_t n = 1) const { value_.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t get() const { return value_.load(std::memory_order_relaxed); }
  void reset() const { value_.store(0); }

 private:
  mutable std::atomic<std::uint64_t> value_{0};
};

}  // namespace detail

/**
 * Encoder-decoder transformer over fused location and ego-speed tokens.
 *
 * Location boxes and speeds are embedded separately, positionally encoded per
 * stream, concatenated along the sequence axis and encoded. The decoder reads
 * t_pred all-zero, positionally encoded queries and emits every future frame
 * in one pass; a regressor maps each decoded token to a box offset.
 *
 * Copies share parameter storage. Inference never mutates parameters, so a
 * model may be used for inference from several threads at once.
 */
class TrajectoryTransformer {
 public:
  explicit TrajectoryTransformer(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t d = config_.d_model;
    if (config_.use_location) loc_embed_ = make_affine(4, d, rng);
    if (config_.use_speed) {
      if (config_.speed_mode == SpeedMode::numeric) {
        speed_embed_ = make_affine(1, config_.d_speed_embed, rng);
      } else {
        std::vector<double> table(config_.speed_vocab * config_.d_speed_embed);
        for (double& v : table) v = uniform(rng, -1.0, 1.0);
        speed_table_ = ad::Tensor({config_.speed_vocab, config_.d_speed_embed}, std::move(table), true);
      }
      speed_proj_ = make_affine(config_.d_speed_embed, d, rng);
    }
    for (std::size_t i = 0; i < config_.n_encoder_layers; ++i) {
      EncoderLayer layer;
      layer.self_attention = make_attention(rng);
      layer.norm1 = make_norm();
      layer.ff_in = make_affine(d, config_.d_ff, rng);
      layer.ff_out = make_affine(config_.d_ff, d, rng);
      layer.norm2 = make_norm();
      encoder_.push_back(std::move(layer));
    }
    for (std::size_t i = 0; i < config_.n_decoder_layers; ++i) {
      DecoderLayer layer;
      layer.self_attention = make_attention(rng);
      layer.norm1 = make_norm();
      layer.cross_attention = make_attention(rng);
      layer.norm2 = make_norm();
      layer.ff_in = make_affine(d, config_.d_ff, rng);
      layer.ff_out = make_affine(config_.d_ff, d, rng);
      layer.norm3 = make_norm();
      decoder_.push_back(std::move(layer));
    }
    regressor_ = make_affine(d, 4, rng);
  }

  const ModelConfig& config() const { return config_; }

  /// Parameters in a fixed, documented order (also the checkpoint order).
  std::vector<NamedParameter> named_parameters() const {
    std::vector<NamedParameter> out;
    auto affine = [&](const std::string& name, const Affine& a) {
      out.push_back({name + ".weight", a.weight});
      out.push_back({name + ".bias", a.bias});
    };
    auto norm = [&](const std::string& name, const Norm& n) {
      out.push_back({name + ".gain", n.gain});
      out.push_back({name + ".bias", n.bias});
    };
    auto attention = [&](const std::string& name, const AttentionWeights& a) {
      affine(name + ".query", a.query);
      affine(name + ".key", a.key);
      affine(name + ".value", a.value);
      affine(name + ".output", a.output);
    };
    if (config_.use_location) affine("loc_embed", loc_embed_);
    if (config_.use_speed) {
      if (config_.speed_mode == SpeedMode::numeric) {
        affine("speed_embed", speed_embed_);
      } else {
        out.push_back({"speed_embed.table", speed_table_});
      }
      affine("speed_proj", speed_proj_);
    }
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      const std::string p = "encoder." + std::to_string(i);
      attention(p + ".self_attention", encoder_[i].self_attention);
      norm(p + ".norm1", encoder_[i].norm1);
      affine(p + ".ff_in", encoder_[i].ff_in);
      affine(p + ".ff_out", encoder_[i].ff_out);
      norm(p + ".norm2", encoder_[i].norm2);
    }
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      const std::string p = "decoder." + std::to_string(i);
      attention(p + ".self_attention", decoder_[i].self_attention);
      norm(p + ".norm1", decoder_[i].norm1);
      attention(p + ".cross_attention", decoder_[i].cross_attention);
      norm(p + ".norm2", decoder_[i].norm2);
      affine(p + ".ff_in", decoder_[i].ff_in);
      affine(p + ".ff_out", decoder_[i].ff_out);
      norm(p + ".norm3", decoder_[i].norm3);
    }
    affine("regressor", regressor_);
    return out;
  }

  std::vector<ad::Tensor> parameters() const {
    std::vector<ad::Tensor> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.size();
    return n;
  }

  void zero_grad() const {
    for (auto p : parameters()) p.zero_grad();
  }

  /// Deep copy: the clone owns fresh parameter storage.
  TrajectoryTransformer clone() const {
    TrajectoryTransformer copy = *this;
    copy.for_each_parameter([](ad::Tensor& t) { t = t.clone(); });
    return copy;
  }

  /// Same parameters, different prediction horizon. Parameter shapes do not
  /// depend on t_pred, so this is valid for any horizon >= 1.
  TrajectoryTransformer with_horizon(std::size_t t_pred) const {
    TrajectoryTransformer copy = *this;
    copy.config_.t_pred = t_pred;
    copy.config_.validate();
    return copy;
  }

  void set_attention_observer(AttentionObserver observer) { observer_ = std::move(observer); }

  std::uint64_t decoder_layer_calls() const { return decoder_layer_calls_.get(); }
  std::uint64_t decoder_passes() const { return decoder_passes_.get(); }
  void reset_counters() const {
    decoder_layer_calls_.reset();
    decoder_passes_.reset();
  }

  /// boxes [B*t_obs, 4] -> [B*t_obs, d_model].
  ad::Tensor embed_trajectory(const ad::Tensor& boxes, const ForwardContext& ctx = {}) const {
    if (!config_.use_location) throw ContractError("embed_trajectory: model was built without location input");
    if (boxes.rank() != 2 || boxes.dim(1) != 4 || boxes.dim(0) % config_.t_obs != 0) {
      throw ShapeError("embed_trajectory: expected [B*" + std::to_string(config_.t_obs) +
                       ", 4] boxes, got " + ad::to_string(boxes.shape()));
    }
    return ad::linear(boxes, loc_embed_.weight, loc_embed_.bias, ctx.tape);
  }

  /// speeds (B*t_obs values or category indices) -> [B*t_obs, d_model].
  ad::Tensor embed_speed(std::span<const double> speeds, const ForwardContext& ctx = {}) const {
    if (!config_.use_speed) throw ContractError("embed_speed: model was built without speed input");
    if (speeds.empty() || speeds.size() % config_.t_obs != 0) {
      throw ShapeError("embed_speed: expected a multiple of " + std::to_string(config_.t_obs) +
                       " speeds, got " + std::to_string(speeds.size()));
    }
    ad::Tensor features;
    if (config_.speed_mode == SpeedMode::numeric) {
      for (double s : speeds) {
        if (!std::isfinite(s)) throw InputError("embed_speed: non-finite speed value");
      }
      const ad::Tensor column({speeds.size(), 1}, std::vector<double>(speeds.begin(), speeds.end()));
      features = ad::linear(column, speed_embed_.weight, speed_embed_.bias, ctx.tape);
    } else {
      std::vector<std::size_t> indices;
      indices.reserve(speeds.size());
      for (double s : speeds) {
        if (!(s >= 0.0) || s != std::floor(s) || s >= static_cast<double>(config_.speed_vocab)) {
          throw InputError("embed_speed: speed category " + std::to_string(s) +
                           " outside vocabulary of size " + std::to_string(config_.speed_vocab));
        }
        indices.push_back(static_cast<std::size_t>(s));
      }
      features = ad::gather_rows(speed_table_, indices, ctx.tape);
    }
    return ad::linear(features, speed_proj_.weight, speed_proj_.bias, ctx.tape);
  }

  /// Encoder stack over fused tokens [B*L, d]; length is preserved.
  ad::Tensor encode(const ad::Tensor& fused, std::size_t batch, const ForwardContext& ctx = {}) const {
    ad::Tensor x = fused;
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      const EncoderLayer& layer = encoder_[i];
      ad::Tensor a = multi_head_attention(x, x, layer.self_attention,
                                          attention_options(batch, false, "encoder.self"), ctx.tape);
      x = residual_norm(x, a, layer.norm1, ctx);
      x = residual_norm(x, feed_forward(x, layer.ff_in, layer.ff_out, ctx), layer.norm2, ctx);
    }
    return x;
  }

  /// All t_pred outputs in one decoder pass from zero-valued queries.
  ad::Tensor decode_single_pass(const ad::Tensor& memory, std::size_t batch,
                                const ForwardContext& ctx = {}) const {
    ad::Tensor queries = ad::Tensor::zeros({batch * config_.t_pred, config_.d_model});
    if (config_.decoder_positional_encoding) queries = positional_encode(queries, config_.t_pred);
    return run_decoder(queries, memory, batch, false, ctx);
  }

  /// decoded [N, d] -> [N, 4] normalized box offsets.
  ad::Tensor regress(const ad::Tensor& decoded, const ForwardContext& ctx = {}) const {
    return ad::linear(decoded, regressor_.weight, regressor_.bias, ctx.tape);
  }

  /// Full single-pass pipeline; returns [B*t_pred, 4].
  ad::Tensor forward(const ModelInput& input, const ForwardContext& ctx = {}) const {
    return regress(decode_single_pass(encode_input(input, ctx), input.batch, ctx), ctx);
  }

  /// Single sample: obs_boxes (t_obs*4 values) and t_obs speeds -> [t_pred, 4].
  ad::Tensor forward(std::span<const double> obs_boxes, std::span<const double> speeds,
                     const ForwardContext& ctx = {}) const {
    return forward(single_input(obs_boxes, speeds), ctx);
  }

  /**
   * Reference decoder that generates one frame per step. Step i feeds the
   * location embedding of prediction i-1 (a zero token at step 0) after the
   * previous tokens, re-runs the causal-masked decoder over the whole prefix
   * and regresses the last position. Inference only.
   */
  ad::Tensor decode_autoregressive(const ModelInput& input) const {
    if (!config_.use_location) {
      throw ContractError("decode_autoregressive: feedback embedding needs the location input");
    }
    const std::size_t batch = input.batch, d = config_.d_model, horizon = config_.t_pred;
    const ad::Tensor memory = encode_input(input, {});
    std::vector<std::vector<double>> tokens(batch, std::vector<double>(d, 0.0));
    std::vector<double> result(batch * horizon * 4);
    for (std::size_t step = 0; step < horizon; ++step) {
      const std::size_t len = step + 1;
      std::vector<double> prefix;
      prefix.reserve(batch * len * d);
      for (const auto& t : tokens) prefix.insert(prefix.end(), t.begin(), t.end());
      ad::Tensor queries({batch * len, d}, std::move(prefix));
      if (config_.decoder_positional_encoding) queries = positional_encode(queries, len);
      const ad::Tensor decoded = run_decoder(queries, memory, batch, true, {});
      std::vector<std::size_t> last(batch);
      for (std::size_t b = 0; b < batch; ++b) last[b] = b * len + step;
      const ad::Tensor pred = regress(ad::gather_rows(decoded, last));
      for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(pred.values().data() + b * 4, 4, result.data() + (b * horizon + step) * 4);
      }
      if (step + 1 < horizon) {
        const ad::Tensor feedback = ad::linear(pred, loc_embed_.weight, loc_embed_.bias);
        for (std::size_t b = 0; b < batch; ++b) {
          tokens[b].insert(tokens[b].end(), feedback.values().begin() + static_cast<std::ptrdiff_t>(b * d),
                           feedback.values().begin() + static_cast<std::ptrdiff_t>((b + 1) * d));
        }
      }
    }
    return ad::Tensor({batch * horizon, 4}, std::move(result));
  }

  ad::Tensor decode_autoregressive(std::span<const double> obs_boxes, std::span<const double> speeds) const {
    return decode_autoregressive(single_input(obs_boxes, speeds));
  }

 private:
  template <typename F>
  void for_each_parameter(F&& f) {
    auto affine = [&](Affine& a) {
      f(a.weight);
      f(a.bias);
    };
    auto norm = [&](Norm& n) {
      f(n.gain);
      f(n.bias);
    };
    auto attention = [&](AttentionWeights& a) {
      affine(a.query);
      affine(a.key);
      affine(a.value);
      affine(a.output);
    };
    if (config_.use_location) affine(loc_embed_);
    if (config_.use_speed) {
      if (config_.speed_mode == SpeedMode::numeric) {
        affine(speed_embed_);
      } else {
        f(speed_table_);
      }
      affine(speed_proj_);
    }
    for (auto& layer : encoder_) {
      attention(layer.self_attention);
      norm(layer.norm1);
      affine(layer.ff_in);
      affine(layer.ff_out);
      norm(layer.norm2);
    }
    for (auto& layer : decoder_) {
      attention(layer.self_attention);
      norm(layer.norm1);
      attention(layer.cross_attention);
      norm(layer.norm2);
      affine(layer.ff_in);
      affine(layer.ff_out);
      norm(layer.norm3);
    }
    affine(regressor_);
  }

  static Affine make_affine(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(in * out), b(out);
    for (double& v : w) v = uniform(rng, -bound, bound);
    for (double& v : b) v = uniform(rng, -bound, bound);
    return {ad::Tensor({in, out}, std::move(w), true), ad::Tensor({out}, std::move(b), true)};
  }

  Norm make_norm() const {
    return {ad::Tensor({config_.d_model}, std::vector<double>(config_.d_model, 1.0), true),
            ad::Tensor::zeros({config_.d_model}, true)};
  }

  AttentionWeights make_attention(Rng& rng) const {
    const std::size_t d = config_.d_model;
    AttentionWeights a;
    a.query = make_affine(d, d, rng);
    a.key = make_affine(d, d, rng);
    a.value = make_affine(d, d, rng);
    a.output = make_affine(d, d, rng);
    return a;
  }

  AttentionOptions attention_options(std::size_t batch, bool causal, std::string_view site) const {
    return {batch, config_.n_heads, causal, site, observer_ ? &observer_ : nullptr};
  }

  ad::Tensor maybe_dropout(const ad::Tensor& x, const ForwardContext& ctx) const {
    if (ctx.dropout_rng == nullptr || config_.dropout <= 0.0) return x;
    return ad::dropout(x, config_.dropout, *ctx.dropout_rng, ctx.tape);
  }

  ad::Tensor residual_norm(const ad::Tensor& x, const ad::Tensor& sublayer, const Norm& norm,
                           const ForwardContext& ctx) const {
    return ad::layer_norm(ad::add(x, maybe_dropout(sublayer, ctx), ctx.tape), norm.gain, norm.bias,
                          config_.layer_norm_eps, ctx.tape);
  }

  ad::Tensor feed_forward(const ad::Tensor& x, const Affine& in, const Affine& out,
                          const ForwardContext& ctx) const {
    const ad::Tensor hidden = ad::relu(ad::linear(x, in.weight, in.bias, ctx.tape), ctx.tape);
    return ad::linear(hidden, out.weight, out.bias, ctx.tape);
  }

  ad::Tensor run_decoder(const ad::Tensor& queries, const ad::Tensor& memory, std::size_t batch,
                         bool causal, const ForwardContext& ctx) const {
    decoder_passes_.add();
    ad::Tensor x = queries;
    for (const DecoderLayer& layer : decoder_) {
      decoder_layer_calls_.add();
      ad::Tensor a = multi_head_attention(x, x, layer.self_attention,
                                          attention_options(batch, causal, "decoder.self"), ctx.tape);
      x = residual_norm(x, a, layer.norm1, ctx);
      ad::Tensor c = multi_head_attention(x, memory, layer.cross_attention,
                                          attention_options(batch, false, "decoder.cross"), ctx.tape);
      x = residual_norm(x, c, layer.norm2, ctx);
      x = residual_norm(x, feed_forward(x, layer.ff_in, layer.ff_out, ctx), layer.norm3, ctx);
    }
    return x;
  }

  ModelInput single_input(std::span<const double> obs_boxes, std::span<const double> speeds) const {
    return {1, std::vector<double>(obs_boxes.begin(), obs_boxes.end()),
            std::vector<double>(speeds.begin(), speeds.end())};
  }

  ad::Tensor encode_input(const ModelInput& input, const ForwardContext& ctx) const {
    const std::size_t batch = input.batch, t_obs = config_.t_obs;
    if (batch == 0) throw ShapeError("forward: empty batch");
    if (input.boxes.size() != batch * t_obs * 4) {
      throw ShapeError("forward: expected " + std::to_string(batch * t_obs * 4) +
                       " box values (batch " + std::to_string(batch) + " x " + std::to_string(t_obs) +
                       " frames x 4), got " + std::to_string(input.boxes.size()));
    }
    if (input.speeds.size() != batch * t_obs) {
      throw ShapeError("forward: expected " + std::to_string(batch * t_obs) + " speed values, got " +
                       std::to_string(input.speeds.size()));
    }
    ad::Tensor loc, speed;
    if (config_.use_location) {
      for (double v : input.boxes) {
        if (!std::isfinite(v)) throw InputError("forward: non-finite box value");
      }
      loc = positional_encode(embed_trajectory(ad::Tensor({batch * t_obs, 4}, input.boxes), ctx), t_obs, 0, ctx.tape);
    }
    if (config_.use_speed) {
      speed = positional_encode(embed_speed(input.speeds, ctx), t_obs, 0, ctx.tape);
    }
    return encode(fuse(loc, speed, batch, ctx.tape), batch, ctx);
  }

  ModelConfig config_;
  Affine loc_embed_;
  Affine speed_embed_;
  ad::Tensor speed_table_;
  Affine speed_proj_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Affine regressor_;
  AttentionObserver observer_;
  detail::Counter decoder_layer_calls_;
  detail::Counter decoder_passes_;
};

}  // namespace trajformer
