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


#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "trajformer/errors.hpp"
#include "trajformer/model.hpp"
#include "trajformer/optim.hpp"

namespace ad = trajformer::ad;
using trajformer::ForwardContext;
using trajformer::ModelConfig;
using trajformer::ModelInput;
using trajformer::SpeedMode;
using trajformer::TrajectoryTransformer;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.t_obs = 4;
  c.t_pred = 5;
  c.d_model = 8;
  c.d_speed_embed = 4;
  c.n_heads = 2;
  c.d_ff = 12;
  c.n_encoder_layers = 2;
  c.n_decoder_layers = 2;
  return c;
}

ModelInput random_input(const ModelConfig& c, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> box(-0.2, 0.2), speed(0.0, 1.0);
  ModelInput in{batch, {}, {}};
  for (std::size_t i = 0; i < batch * c.t_obs * 4; ++i) in.boxes.push_back(box(rng));
  for (std::size_t i = 0; i < batch * c.t_obs; ++i) {
    in.speeds.push_back(c.speed_mode == SpeedMode::numeric ? speed(rng)
                                                           : static_cast<double>(rng() % c.speed_vocab));
  }
  return in;
}

ad::Tensor param(const TrajectoryTransformer& m, const std::string& name) {
  for (const auto& p : m.named_parameters()) {
    if (p.name == name) return p.tensor;
  }
  throw std::runtime_error("no parameter " + name);
}

void fill(ad::Tensor t, double v) {
  for (double& x : t.mutable_values()) x = v;
}

// Independent closed form: per-layer counts written out from the architecture.
std::size_t expected_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, s = c.d_speed_embed;
  std::size_t n = 0;
  if (c.use_location) n += 4 * d + d;
  if (c.use_speed) {
    n += c.speed_mode == SpeedMode::numeric ? (1 * s + s) : c.speed_vocab * s;
    n += s * d + d;
  }
  const std::size_t mha = 4 * (d * d + d);
  const std::size_t ffn = (d * f + f) + (f * d + d);
  const std::size_t ln = 2 * d;
  n += c.n_encoder_layers * (mha + ln + ffn + ln);
  n += c.n_decoder_layers * (mha + ln + mha + ln + ffn + ln);
  n += d * 4 + 4;
  return n;
}

double max_row_spread(const ad::Tensor& t) {
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  double worst = 0.0;
  for (std::size_t r = 1; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) worst = std::max(worst, std::abs(t.value(r * cols + c) - t.value(c)));
  }
  return worst;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.n_heads = 7;
  EXPECT_THROW(c.validate(), trajformer::ConfigError);
  c = ModelConfig{};
  c.t_obs = 0;
  EXPECT_THROW(TrajectoryTransformer{c}, trajformer::ConfigError);
  c = ModelConfig{};
  c.use_location = c.use_speed = false;
  EXPECT_THROW(c.validate(), trajformer::ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = small_config();
  c.speed_mode = SpeedMode::categorical;
  c.dropout = 0.25;
  EXPECT_EQ(trajformer::model_config_from_json(trajformer::to_json(c)), c);
}

TEST(Model, EveryParameterRequiresGrad) {
  const TrajectoryTransformer m(small_config());
  for (const auto& p : m.named_parameters()) EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
}

TEST(Model, DefaultParamCountBracketsPublishedSize) {
  const TrajectoryTransformer m(ModelConfig{});
  EXPECT_GE(m.param_count(), 2'500'000u);
  EXPECT_LE(m.param_count(), 3'300'000u);
  EXPECT_EQ(m.param_count(), 2'932'228u);
  EXPECT_EQ(trajformer::param_count(ModelConfig{}), m.param_count());
}

TEST(Model, ParamCountMatchesClosedForm) {
  std::vector<ModelConfig> configs{ModelConfig{}, small_config()};
  ModelConfig cat = small_config();
  cat.speed_mode = SpeedMode::categorical;
  cat.speed_vocab = 7;
  configs.push_back(cat);
  ModelConfig loc = small_config();
  loc.use_speed = false;
  configs.push_back(loc);
  ModelConfig spd = small_config();
  spd.use_location = false;
  configs.push_back(spd);
  for (const auto& c : configs) {
    EXPECT_EQ(trajformer::param_count(c), expected_param_count(c));
    EXPECT_EQ(TrajectoryTransformer(c, 3).param_count(), expected_param_count(c));
  }
}

TEST(Model, ParamCountIsPureFunctionOfConfig) {
  EXPECT_EQ(TrajectoryTransformer(small_config(), 1).param_count(),
            TrajectoryTransformer(small_config(), 2).param_count());
}

TEST(Model, ParamCountWithoutLayers) {
  ModelConfig c;
  c.n_encoder_layers = c.n_decoder_layers = 0;
  // loc_embed 4*256+256, speed_embed 128+128, speed_proj 128*256+256, regressor 256*4+4
  EXPECT_EQ(TrajectoryTransformer(c).param_count(), 1280u + 256u + 33024u + 1028u);
}

TEST(Model, DoublingFeedForwardWidthDelta) {
  ModelConfig c;
  ModelConfig wide = c;
  wide.d_ff = 2 * c.d_ff;
  const std::size_t layers = c.n_encoder_layers + c.n_decoder_layers;
  EXPECT_EQ(trajformer::param_count(wide) - trajformer::param_count(c),
            2 * layers * c.d_model * c.d_ff + layers * c.d_ff);
}

TEST(Embedding, TrajectoryShapesAndLinearity) {
  const TrajectoryTransformer m(ModelConfig{});
  EXPECT_EQ(m.embed_trajectory(ad::Tensor::zeros({15, 4})).shape(), (ad::Shape{15, 256}));
  EXPECT_THROW(m.embed_trajectory(ad::Tensor::zeros({14, 4})), trajformer::ShapeError);

  const TrajectoryTransformer z = m.clone();
  fill(param(z, "loc_embed.bias"), 0.0);
  const ad::Tensor e = z.embed_trajectory(ad::Tensor::zeros({15, 4}));
  for (double v : e.values()) EXPECT_EQ(v, 0.0);
}

TEST(Embedding, OneHotRowSelectsWeightRow) {
  const TrajectoryTransformer m(small_config(), 5);
  const ad::Tensor w = param(m, "loc_embed.weight"), b = param(m, "loc_embed.bias");
  std::vector<double> window(small_config().t_obs * 4, 0.0);
  window[2] = 1.0;  // first frame, third coordinate
  const ad::Tensor e = m.embed_trajectory(ad::Tensor({small_config().t_obs, 4}, window));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(e.value(j), w.value(2 * 8 + j) + b.value(j));
}

TEST(Embedding, SpeedNumericAndCategorical) {
  ModelConfig c;
  EXPECT_EQ(c.d_speed_embed, 128u);
  const TrajectoryTransformer m(c);
  EXPECT_EQ(param(m, "speed_embed.weight").shape(), (ad::Shape{1, 128}));
  EXPECT_EQ(param(m, "speed_proj.weight").shape(), (ad::Shape{128, 256}));
  const TrajectoryTransformer z = m.clone();
  fill(param(z, "speed_embed.bias"), 0.0);
  fill(param(z, "speed_proj.bias"), 0.0);
  const ad::Tensor zero_token = z.embed_speed(std::vector<double>(15, 0.0));
  for (double v : zero_token.values()) EXPECT_EQ(v, 0.0);

  ModelConfig cc = small_config();
  cc.speed_mode = SpeedMode::categorical;
  const TrajectoryTransformer cat(cc, 9);
  const ad::Tensor table = param(cat, "speed_embed.table"), pw = param(cat, "speed_proj.weight"),
                   pb = param(cat, "speed_proj.bias");
  const std::vector<double> speeds{3, 0, 4, 3};
  const ad::Tensor e = cat.embed_speed(speeds);
  for (std::size_t t = 0; t < speeds.size(); ++t) {
    const auto row = static_cast<std::size_t>(speeds[t]);
    for (std::size_t j = 0; j < cc.d_model; ++j) {
      double expect = pb.value(j);
      for (std::size_t k = 0; k < cc.d_speed_embed; ++k) expect += table.value(row * 4 + k) * pw.value(k * 8 + j);
      EXPECT_NEAR(e.value(t * 8 + j), expect, 1e-14);
    }
  }
  EXPECT_THROW(cat.embed_speed(std::vector<double>{0, 1, 5, 2}), trajformer::InputError);
  EXPECT_THROW(cat.embed_speed(std::vector<double>{0, 1, 1.5, 2}), trajformer::InputError);
}

TEST(PositionalEncoding, KnownValues) {
  const ad::Tensor pe = trajformer::positional_encode(ad::Tensor::zeros({3, 6}), 3);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(pe.value(c), c % 2 == 0 ? 0.0 : 1.0);
  EXPECT_NEAR(pe.value(6), 0.8414709848078965, 1e-15);
  const ad::Tensor raw = trajformer::sinusoidal_encoding(3, 6);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_EQ(pe.value(i), raw.value(i));
  const ad::Tensor shifted = trajformer::sinusoidal_encoding(1, 6, 1);
  EXPECT_NEAR(shifted.value(0), std::sin(1.0), 1e-15);
}

TEST(PositionalEncoding, RepeatsPerSequence) {
  const ad::Tensor pe = trajformer::positional_encode(ad::Tensor::zeros({6, 4}), 3);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(pe.value(i), pe.value(12 + i));
  EXPECT_THROW(trajformer::positional_encode(ad::Tensor::zeros({5, 4}), 3), trajformer::ShapeError);
}

TEST(Fuse, ShapesAndOrder) {
  std::mt19937_64 rng(1);
  const ad::Tensor loc = testutil::random_tensor({15, 256}, rng, false);
  const ad::Tensor spd = testutil::random_tensor({15, 256}, rng, false);
  const ad::Tensor z = trajformer::fuse(loc, spd, 1);
  EXPECT_EQ(z.shape(), (ad::Shape{30, 256}));
  for (std::size_t j = 0; j < 256; ++j) {
    EXPECT_EQ(z.value(j), loc.value(j));
    EXPECT_EQ(z.value(15 * 256 + j), spd.value(j));
  }
  EXPECT_TRUE(trajformer::fuse(loc, ad::Tensor(), 1).same_storage(loc));
  EXPECT_THROW(trajformer::fuse(loc, ad::Tensor::zeros({15, 128}), 1), trajformer::ShapeError);
}

TEST(Fuse, BatchedKeepsSamplesSeparate) {
  const ad::Tensor loc({4, 1}, {1, 2, 3, 4}), spd({4, 1}, {5, 6, 7, 8});
  const ad::Tensor z = trajformer::fuse(loc, spd, 2);
  const std::vector<double> expect{1, 2, 5, 6, 3, 4, 7, 8};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(z.value(i), expect[i]);
}

class AttentionTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{17};
  trajformer::AttentionWeights w;
  void SetUp() override {
    for (auto* a : {&w.query, &w.key, &w.value, &w.output}) {
      a->weight = testutil::random_tensor({8, 8}, rng);
      a->bias = testutil::random_tensor({8}, rng);
    }
  }
};

TEST_F(AttentionTest, SingleKeyAttendsFully) {
  const ad::Tensor q = testutil::random_tensor({5, 8}, rng, false), kv = testutil::random_tensor({1, 8}, rng, false);
  std::vector<ad::Tensor> seen;
  const trajformer::AttentionObserver obs = [&](std::string_view, const ad::Tensor& t) { seen.push_back(t); };
  const ad::Tensor out = trajformer::multi_head_attention(q, kv, w, {1, 2, false, "test", &obs});
  ASSERT_EQ(seen.size(), 1u);
  for (double v : seen[0].values()) EXPECT_EQ(v, 1.0);
  const ad::Tensor expect = ad::linear(ad::linear(kv, w.value.weight, w.value.bias), w.output.weight, w.output.bias);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.value(r * 8 + j), expect.value(j), 1e-14);
  }
}

TEST_F(AttentionTest, RowsSumToOneAndIdenticalKeysAreUniform) {
  const ad::Tensor q = testutil::random_tensor({2 * 3, 8}, rng, false);
  const ad::Tensor kv = testutil::random_tensor({2 * 7, 8}, rng, false);
  std::vector<ad::Tensor> seen;
  const trajformer::AttentionObserver obs = [&](std::string_view, const ad::Tensor& t) { seen.push_back(t); };
  trajformer::multi_head_attention(q, kv, w, {2, 4, false, "test", &obs});
  const ad::Tensor row = testutil::random_tensor({1, 8}, rng, false);
  std::vector<double> same;
  for (int i = 0; i < 6; ++i) same.insert(same.end(), row.values().begin(), row.values().end());
  trajformer::multi_head_attention(q, ad::Tensor({2 * 3, 8}, same), w, {2, 4, false, "test", &obs});
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_EQ(seen[0].shape(), (ad::Shape{8, 3, 7}));
  for (std::size_t r = 0; r < seen[0].size() / 7; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) s += seen[0].value(r * 7 + k);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (double v : seen[1].values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Encode, ShapeDeterminismAndEmptyStack) {
  const TrajectoryTransformer m(ModelConfig{}, 4);
  std::mt19937_64 rng(2);
  const ad::Tensor z = testutil::random_tensor({30, 256}, rng, false);
  const ad::Tensor a = m.encode(z, 1), b = m.encode(z, 1);
  EXPECT_EQ(a.shape(), (ad::Shape{30, 256}));
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.value(i), b.value(i));
  EXPECT_EQ(TrajectoryTransformer(ModelConfig{}, 4).encode(z, 1).values()[7], a.values()[7]);

  ModelConfig none;
  none.n_encoder_layers = 0;
  const ad::Tensor same = TrajectoryTransformer(none).encode(z, 1);
  for (std::size_t i = 0; i < z.size(); ++i) ASSERT_EQ(same.value(i), z.value(i));
}

TEST(Decode, SinglePassShapeAndCounter) {
  const TrajectoryTransformer m(ModelConfig{}, 1);
  std::mt19937_64 rng(3);
  const ad::Tensor memory = testutil::random_tensor({30, 256}, rng, false);
  m.reset_counters();
  EXPECT_EQ(m.decode_single_pass(memory, 1).shape(), (ad::Shape{45, 256}));
  EXPECT_EQ(m.decoder_passes(), 1u);
  EXPECT_EQ(m.decoder_layer_calls(), ModelConfig{}.n_decoder_layers);
}

TEST(Decode, LayerCallsIndependentOfHorizon) {
  const TrajectoryTransformer base(small_config(), 1);
  const ModelInput in = random_input(small_config(), 1, 2);
  for (std::size_t h : {1u, 5u, 45u}) {
    const TrajectoryTransformer m = base.with_horizon(h);
    m.reset_counters();
    EXPECT_EQ(m.forward(in).shape(), (ad::Shape{h, 4}));
    EXPECT_EQ(m.decoder_passes(), 1u);
    EXPECT_EQ(m.decoder_layer_calls(), small_config().n_decoder_layers);
  }
}

TEST(Decode, ZeroQueriesWithoutPositionalEncodingCollapse) {
  ModelConfig c;
  c.decoder_positional_encoding = false;
  const TrajectoryTransformer m(c, 2);
  const ModelInput in = random_input(c, 1, 3);
  const ad::Tensor out = m.forward(in);
  ASSERT_EQ(out.shape(), (ad::Shape{45, 4}));
  EXPECT_LT(max_row_spread(out), 1e-9);
  EXPECT_GT(max_row_spread(TrajectoryTransformer(ModelConfig{}, 2).forward(in)), 1e-6);
}

TEST(Regress, DegenerateAffineAndShape) {
  const TrajectoryTransformer m(ModelConfig{}, 1);
  std::mt19937_64 rng(4);
  const ad::Tensor decoded = testutil::random_tensor({45, 256}, rng, false);
  EXPECT_EQ(m.regress(decoded).shape(), (ad::Shape{45, 4}));
  const TrajectoryTransformer z = m.clone();
  fill(param(z, "regressor.weight"), 0.0);
  const ad::Tensor b = param(z, "regressor.bias");
  const ad::Tensor out = z.regress(decoded);
  for (std::size_t r = 0; r < 45; ++r) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.value(r * 4 + j), b.value(j));
  }
}

TEST(Regress, GradientReachesRegressorUnderRmse) {
  const TrajectoryTransformer m(small_config(), 1);
  const ModelInput in = random_input(small_config(), 2, 5);
  m.zero_grad();
  ad::Tape tape;
  const ad::Tensor pred = m.forward(in, {&tape, nullptr});
  const ad::Tensor loss = trajformer::rmse_loss(pred, ad::Tensor::filled(pred.shape(), 0.5), &tape);
  tape.backward(loss);
  const ad::Tensor w = param(m, "regressor.weight");
  ASSERT_TRUE(w.has_grad());
  double norm = 0.0;
  for (double g : w.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Forward, ShapeAndPurity) {
  const TrajectoryTransformer m(ModelConfig{}, 1);
  const ModelInput in = random_input(ModelConfig{}, 1, 6);
  const ad::Tensor a = m.forward(in.boxes, in.speeds), b = m.forward(in.boxes, in.speeds);
  EXPECT_EQ(a.shape(), (ad::Shape{45, 4}));
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.value(i), b.value(i));
}

TEST(Forward, ShapeContractAcrossConfigs) {
  for (std::size_t t_obs : {1u, 3u}) {
    for (std::size_t t_pred : {1u, 7u}) {
      ModelConfig c = small_config();
      c.t_obs = t_obs;
      c.t_pred = t_pred;
      c.n_encoder_layers = 1;
      const ModelInput in = random_input(c, 3, 7);
      EXPECT_EQ(TrajectoryTransformer(c).forward(in).shape(), (ad::Shape{3 * t_pred, 4}));
    }
  }
}

TEST(Forward, BatchRowsMatchSingleSamples) {
  const TrajectoryTransformer m(small_config(), 3);
  const ModelInput in = random_input(small_config(), 3, 8);
  const ad::Tensor batched = m.forward(in);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::span<const double> boxes(in.boxes.data() + b * 16, 16), speeds(in.speeds.data() + b * 4, 4);
    const ad::Tensor single = m.forward(boxes, speeds);
    for (std::size_t i = 0; i < single.size(); ++i) EXPECT_NEAR(batched.value(b * 20 + i), single.value(i), 1e-12);
  }
}

TEST(Forward, SpeedConnectivity) {
  const ModelInput in = random_input(ModelConfig{}, 1, 9);
  for (bool use_speed : {true, false}) {
    ModelConfig c;
    c.use_speed = use_speed;
    const TrajectoryTransformer m(c, 1);
    const ad::Tensor base = m.forward(in);
    for (std::size_t t = 0; t < c.t_obs; t += 7) {
      ModelInput changed = in;
      changed.speeds[t] += 0.3;
      const ad::Tensor out = m.forward(changed);
      double diff = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) diff = std::max(diff, std::abs(out.value(i) - base.value(i)));
      if (use_speed) {
        EXPECT_GT(diff, 0.0) << "speed " << t;
      } else {
        EXPECT_EQ(diff, 0.0) << "speed " << t;
      }
    }
  }
}

TEST(Forward, InputValidation) {
  const TrajectoryTransformer m(small_config());
  ModelInput in = random_input(small_config(), 1, 1);
  in.boxes.pop_back();
  EXPECT_THROW(m.forward(in), trajformer::ShapeError);
  in = random_input(small_config(), 1, 1);
  in.speeds.push_back(0.0);
  EXPECT_THROW(m.forward(in), trajformer::ShapeError);
  in = random_input(small_config(), 1, 1);
  in.boxes[3] = std::nan("");
  EXPECT_THROW(m.forward(in), trajformer::InputError);
  in = random_input(small_config(), 1, 1);
  in.speeds[0] = INFINITY;
  EXPECT_THROW(m.forward(in), trajformer::InputError);
}

TEST(Forward, AllAttentionRowsSumToOne) {
  TrajectoryTransformer m(small_config(), 1);
  std::map<std::string, int> sites;
  double worst = 0.0;
  m.set_attention_observer([&](std::string_view site, const ad::Tensor& w) {
    ++sites[std::string(site)];
    const std::size_t lk = w.dim(2);
    for (std::size_t r = 0; r < w.size() / lk; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < lk; ++k) s += w.value(r * lk + k);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  });
  m.forward(random_input(small_config(), 2, 3));
  m.decode_autoregressive(random_input(small_config(), 2, 3));
  EXPECT_LT(worst, 1e-12);
  EXPECT_EQ(sites["encoder.self"], 2 * 2);  // both decode paths encode once
  EXPECT_EQ(sites["decoder.self"], 2 * (1 + 5));
  EXPECT_EQ(sites["decoder.cross"], 2 * (1 + 5));
}

TEST(Autoregressive, StepCountAndShapes) {
  const TrajectoryTransformer m(ModelConfig{}, 1);
  const ModelInput in = random_input(ModelConfig{}, 1, 4);
  m.reset_counters();
  const ad::Tensor ar = m.decode_autoregressive(in);
  EXPECT_EQ(m.decoder_passes(), 45u);
  EXPECT_EQ(ar.shape(), m.forward(in).shape());

  const TrajectoryTransformer one = m.with_horizon(1);
  one.reset_counters();
  EXPECT_EQ(one.decode_autoregressive(in).shape(), (ad::Shape{1, 4}));
  EXPECT_EQ(one.decoder_passes(), 1u);
}

TEST(Autoregressive, EarlierStepsIgnoreLaterOnes) {
  const TrajectoryTransformer m(small_config(), 2);
  const ModelInput in = random_input(small_config(), 2, 5);
  const ad::Tensor full = m.decode_autoregressive(in);
  const ad::Tensor shorter = m.with_horizon(3).decode_autoregressive(in);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(shorter.value(b * 12 + i), full.value(b * 20 + i), 1e-12);
  }
}

TEST(Model, CloneIsDeepAndHorizonShares) {
  const TrajectoryTransformer m(small_config(), 1);
  const TrajectoryTransformer c = m.clone();
  const TrajectoryTransformer h = m.with_horizon(9);
  EXPECT_FALSE(param(c, "regressor.bias").same_storage(param(m, "regressor.bias")));
  EXPECT_TRUE(param(h, "regressor.bias").same_storage(param(m, "regressor.bias")));
  EXPECT_EQ(h.config().t_pred, 9u);
  EXPECT_THROW(m.with_horizon(0), trajformer::ConfigError);
}

TEST(Model, SeedDeterminesInitialization) {
  const auto a = TrajectoryTransformer(small_config(), 7).parameters();
  const auto b = TrajectoryTransformer(small_config(), 7).parameters();
  const auto c = TrajectoryTransformer(small_config(), 8).parameters();
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) {
      ASSERT_EQ(a[i].value(j), b[i].value(j));
      differs = differs || a[i].value(j) != c[i].value(j);
    }
  }
  EXPECT_TRUE(differs);
}

TEST(Model, InitializationRanges) {
  const TrajectoryTransformer m(small_config(), 3);
  for (const auto& p : m.named_parameters()) {
    if (p.name.find(".gain") != std::string::npos) {
      for (double v : p.tensor.values()) EXPECT_EQ(v, 1.0);
    } else if (p.name.find("norm") != std::string::npos) {
      for (double v : p.tensor.values()) EXPECT_EQ(v, 0.0);
    } else if (p.name.ends_with(".weight")) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.tensor.dim(0)));
      for (double v : p.tensor.values()) EXPECT_LE(std::abs(v), bound) << p.name;
    }
  }
}

// End-to-end gradient check through every layer type under the RMSE loss.
class ModelGradient : public ::testing::TestWithParam<SpeedMode> {};

TEST_P(ModelGradient, MatchesFiniteDifferencesOnEveryTensor) {
  ModelConfig c = small_config();
  c.speed_mode = GetParam();
  const TrajectoryTransformer m(c, 21);
  const ModelInput in = random_input(c, 2, 22);
  std::mt19937_64 rng(23);
  const ad::Tensor target = testutil::random_tensor({2 * c.t_pred, 4}, rng, false, -0.3, 0.3);
  auto loss = [&](ad::Tape* tape) { return trajformer::rmse_loss(m.forward(in, {tape, nullptr}), target, tape); };

  m.zero_grad();
  ad::Tape tape;
  tape.backward(loss(&tape));
  const std::function<double()> value = [&] { return loss(nullptr).item(); };

  std::size_t checked = 0;
  double worst = 0.0;
  for (const auto& p : m.named_parameters()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
    const std::size_t picks = std::min<std::size_t>(p.tensor.size(), 3);
    for (std::size_t k = 0; k < picks; ++k) {
      const std::size_t i = static_cast<std::size_t>(rng() % p.tensor.size());
      const double err = testutil::relative_error(analytic[i], testutil::numeric_derivative(value, p.tensor, i));
      EXPECT_LT(err, 1e-3) << p.name << "[" << i << "]";
      worst = std::max(worst, err);
      ++checked;
    }
  }
  EXPECT_GE(checked, 100u);
  RecordProperty("max_relative_error", std::to_string(worst));
}

INSTANTIATE_TEST_SUITE_P(SpeedModes, ModelGradient, ::testing::Values(SpeedMode::numeric, SpeedMode::categorical));
