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

// Binary checkpoint container, version 1. All integers and floats little-endian.
//
//   magic      8 bytes  "TRJFCKPT"
//   version    u32      1
//   header_len u64
//   header     header_len bytes of UTF-8 JSON:
//                { "model_config":  { every ModelConfig key },
//                  "normalization": { image_width, image_height, max_speed },
//                  "tensors":       [ { "name": str, "shape": [u64...] }, ... ],
//                  "optimizer":     null | { "step": u64 } }
//   values     for each tensor in header order: prod(shape) f64
//   moments    only if optimizer != null: for each tensor, first moment then
//              second moment, prod(shape) f64 each
//   checksum   u64 FNV-1a over every preceding byte
//
// docs/checkpoint_format.md carries the same description.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajformer/data.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"
#include "trajformer/optim.hpp"

namespace trajformer {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "TRJFCKPT";

struct Checkpoint {
  TrajectoryTransformer model;
  NormalizationConfig normalization;
  std::optional<OptimizerState> optimizer;
};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { little_endian(v); }
  void u64(std::uint64_t v) { little_endian(v); }
  void f64(double v) { little_endian(std::bit_cast<std::uint64_t>(v)); }
  void f64s(std::span<const double> vs) {
    for (double v : vs) f64(v);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  template <typename U>
  void little_endian(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const unsigned char> bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::span<const unsigned char> take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw CheckpointError("corrupt checkpoint " + source_ + ": truncated");
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::uint32_t u32() { return little_endian<std::uint32_t>(); }
  std::uint64_t u64() { return little_endian<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(little_endian<std::uint64_t>()); }
  void f64s(std::span<double> out) {
    for (double& v : out) v = f64();
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  template <typename U>
  U little_endian() {
    auto b = take(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
  }
  std::span<const unsigned char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const TrajectoryTransformer& model,
                                                       const NormalizationConfig& normalization,
                                                       const OptimizerState* optimizer = nullptr) {
  const auto params = model.named_parameters();
  nlohmann::json header;
  header["model_config"] = to_json(model.config());
  header["normalization"] = to_json(normalization);
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : params) header["tensors"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  header["optimizer"] = optimizer ? nlohmann::json{{"step", optimizer->step}} : nlohmann::json();
  if (optimizer && optimizer->first_moment.size() != params.size()) {
    throw ContractError("save_checkpoint: optimizer state does not match the model parameters");
  }
  const std::string text = header.dump();

  detail::ByteWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.raw(text.data(), text.size());
  for (const auto& p : params) w.f64s(p.tensor.values());
  if (optimizer) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      w.f64s(optimizer->first_moment[i]);
      w.f64s(optimizer->second_moment[i]);
    }
  }
  w.u64(detail::fnv1a(w.bytes()));
  return std::move(w.bytes());
}

namespace detail {

inline Checkpoint deserialize_checkpoint_unchecked(std::span<const unsigned char> bytes, const std::string& source) {
  detail::ByteReader r(bytes, source);
  const auto magic = r.take(kCheckpointMagic.size());
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), magic.size()) != 0) {
    throw CheckpointError("corrupt checkpoint " + source + ": bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint " + source + " has format version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  const std::uint64_t header_len = r.u64();
  if (header_len > r.remaining()) throw CheckpointError("corrupt checkpoint " + source + ": truncated");
  const auto header_bytes = r.take(header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_bytes.begin(), header_bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint " + source + ": unreadable header (" + e.what() + ")");
  }

  ModelConfig config;
  NormalizationConfig normalization;
  try {
    config = model_config_from_json(header.at("model_config"));
    normalization = normalization_from_json(header.at("normalization"));
  } catch (const std::exception& e) {
    throw CheckpointError("corrupt checkpoint " + source + ": " + e.what());
  }
  TrajectoryTransformer model(config);
  auto params = model.named_parameters();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size()) {
    throw CheckpointError("corrupt checkpoint " + source + ": " + std::to_string(tensors.size()) +
                          " tensors listed, configuration needs " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name = tensors[i].at("name").get<std::string>();
    const auto shape = tensors[i].at("shape").get<ad::Shape>();
    if (name != params[i].name || shape != params[i].tensor.shape()) {
      throw CheckpointError("corrupt checkpoint " + source + ": tensor " + std::to_string(i) + " is " + name +
                            ad::to_string(shape) + ", expected " + params[i].name +
                            ad::to_string(params[i].tensor.shape()));
    }
    r.f64s(params[i].tensor.mutable_values());
  }
  std::optional<OptimizerState> optimizer;
  if (!header.at("optimizer").is_null()) {
    OptimizerState state;
    state.step = header.at("optimizer").at("step").get<std::uint64_t>();
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor.size());
      state.second_moment.emplace_back(p.tensor.size());
      r.f64s(state.first_moment.back());
      r.f64s(state.second_moment.back());
    }
    optimizer = std::move(state);
  }
  const std::size_t body = r.position();
  const std::uint64_t stored = r.u64();
  if (stored != detail::fnv1a(bytes.first(body))) {
    throw CheckpointError("corrupt checkpoint " + source + ": checksum mismatch");
  }
  if (r.remaining() != 0) throw CheckpointError("corrupt checkpoint " + source + ": trailing bytes");
  return {std::move(model), normalization, std::move(optimizer)};
}

}  // namespace detail

inline Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes, const std::string& source = "<memory>") {
  try {
    return detail::deserialize_checkpoint_unchecked(bytes, source);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint " + source + ": " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const TrajectoryTransformer& model,
                            const NormalizationConfig& normalization = {},
                            const OptimizerState* optimizer = nullptr) {
  const auto bytes = serialize_checkpoint(model, normalization, optimizer);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

/// Loads and checks the stored architecture against `expected`, naming the first differing key.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  const auto stored = to_json(ckpt.model.config());
  const auto wanted = to_json(expected);
  for (const auto& [key, value] : wanted.items()) {
    if (stored.at(key) != value) {
      throw CheckpointError("config mismatch in " + path.string() + ": " + key + " is " + stored.at(key).dump() +
                            " in the checkpoint but " + value.dump() + " was expected");
    }
  }
  return ckpt;
}

}  // namespace trajformer
