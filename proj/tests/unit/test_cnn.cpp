#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cats/cnn.hpp"
#include "cats/errors.hpp"
#include "cats/model.hpp"
#include "cats/oracles/oracles.hpp"
#include "cats/random.hpp"

namespace cats::cnn {
namespace {

using ag::Var;

template <typename T>
Var<T> random_var(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  return ag::constant(std::move(t));
}

template <typename T>
bool all_equal(const Tensor<T>& t, T value) {
  return std::all_of(t.values().begin(), t.values().end(), [&](T v) { return v == value; });
}

TEST(ConvBlock, ShapeAtLevelZeroDefaults) {
  ag::ParameterSet<float> params;
  auto w = make_conv_block(params, "blk", 1, 16, 3, 1);
  auto y = conv_block<float>(nullptr, random_var<float>({32, 32, 32, 1}, 2), w, 3);
  EXPECT_EQ(y->value.shape(), (Shape{32, 32, 32, 16}));
}

TEST(ConvBlock, ZeroWeightsGiveZeros) {
  ag::ParameterSet<float> params;
  auto w = make_conv_block(params, "blk", 2, 4, 3, 1);
  for (auto& [name, v] : params.items()) v->value.fill(0.0f);
  auto y = conv_block<float>(nullptr, random_var<float>({4, 4, 4, 2}, 3), w, 3);
  EXPECT_TRUE(all_equal(y->value, 0.0f));
}

TEST(ConvBlock, ChannelMismatchIsAnError) {
  ag::ParameterSet<float> params;
  auto w = make_conv_block(params, "blk", 2, 4, 3, 1);
  EXPECT_THROW(conv_block<float>(nullptr, random_var<float>({4, 4, 4, 3}, 3), w, 3), PreconditionError);
}

TEST(Downsample, ConstantStaysConstant) {
  auto y = downsample<float>(nullptr, ag::constant(Tensor<float>(Shape{4, 4, 4, 2}, 2.5f)));
  EXPECT_EQ(y->value.shape(), (Shape{2, 2, 2, 2}));
  EXPECT_TRUE(all_equal(y->value, 2.5f));
}

TEST(Downsample, MaximumOfOneToEight) {
  Tensor<float> x(Shape{2, 2, 2, 1}, std::vector<float>{3, 7, 1, 8, 2, 6, 4, 5});
  auto y = downsample<float>(nullptr, ag::constant(x));
  ASSERT_EQ(y->value.size(), 1);
  EXPECT_EQ(y->value[0], 8.0f);
}

TEST(Downsample, HalvesExtentsAndRejectsOdd) {
  EXPECT_EQ(downsample<float>(nullptr, random_var<float>({32, 32, 32, 1}, 4))->value.shape(), (Shape{16, 16, 16, 1}));
  EXPECT_THROW(downsample<float>(nullptr, random_var<float>({3, 4, 4, 1}, 4)), PreconditionError);
}

TEST(Upsample, ShapeContract) {
  auto y = upsample<float>(nullptr, random_var<float>({4, 4, 4, 32}, 5), random_var<float>({32, 8 * 16}, 6),
                           ag::constant(Tensor<float>(Shape{16})));
  EXPECT_EQ(y->value.shape(), (Shape{8, 8, 8, 16}));
}

TEST(Upsample, ZeroWeightsGiveZeros) {
  auto y = upsample<float>(nullptr, random_var<float>({2, 2, 2, 4}, 5), ag::constant(Tensor<float>(Shape{4, 16})),
                           ag::constant(Tensor<float>(Shape{2})));
  EXPECT_TRUE(all_equal(y->value, 0.0f));
}

TEST(Upsample, MatchesZeroInsertionReference) {
  auto x = random_var<double>({2, 3, 2, 3}, 7);
  auto w = random_var<double>({3, 8 * 2}, 8);
  auto b = random_var<double>({2}, 9);
  auto y = upsample<double>(nullptr, x, w, b);
  const auto ref = oracles::conv_transpose2_zero_stuffed(x->value, w->value, b->value);
  ASSERT_EQ(y->value.shape(), ref.shape());
  for (std::int64_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y->value[i], ref[i], 1e-12);
}

TEST(Conv3d, MatchesDirectSum) {
  auto x = random_var<double>({3, 4, 5, 2}, 10);
  auto w = random_var<double>({27 * 2, 3}, 11);
  auto b = random_var<double>({3}, 12);
  auto y = ag::conv3d<double>(nullptr, x, w, b, 3);
  const auto ref = oracles::conv3d(x->value, w->value, b->value, 3);
  for (std::int64_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y->value[i], ref[i], 1e-12);
}

TEST(CnnBackbone, PyramidShapes) {
  ag::ParameterSet<float> params;
  CnnConfig cfg;
  CnnBackbone<float> net(cfg, params, 1);
  auto pyramid = net.encode(nullptr, random_var<float>({32, 32, 32, 1}, 13));
  ASSERT_EQ(pyramid.size(), 5u);
  for (int l = 0; l < 5; ++l) {
    const std::int64_t e = 32 >> l;
    EXPECT_EQ(pyramid[l]->value.shape(), (Shape{e, e, e, 16 << l})) << l;
  }
}

TEST(CnnBackbone, DivisibilityErrorListsPadding) {
  ag::ParameterSet<float> params;
  CnnBackbone<float> net(CnnConfig{}, params, 1);
  try {
    net.encode(nullptr, random_var<float>({32, 30, 32, 1}, 13));
    FAIL() << "expected a precondition error";
  } catch (const PreconditionError& e) {
    EXPECT_NE(std::string(e.what()).find("pad by 2"), std::string::npos) << e.what();
  }
}

TEST(CnnBackbone, DecodeShapeAndSoftmax) {
  ag::ParameterSet<float> params;
  CnnConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 4;
  cfg.num_classes = 3;
  CnnBackbone<float> net(cfg, params, 1);
  auto logits = net.decode(nullptr, net.encode(nullptr, random_var<float>({8, 8, 8, 1}, 14)));
  ASSERT_EQ(logits->value.shape(), (Shape{8, 8, 8, 3}));
  for (std::int64_t v = 0; v < 512; ++v) {
    double m = -1e30, s = 0.0;
    for (int k = 0; k < 3; ++k) m = std::max(m, static_cast<double>(logits->value[v * 3 + k]));
    std::vector<double> p(3);
    for (int k = 0; k < 3; ++k) s += (p[k] = std::exp(logits->value[v * 3 + k] - m));
    EXPECT_NEAR((p[0] + p[1] + p[2]) / s, 1.0, 1e-12);
  }
}

TEST(CnnBackbone, DefaultDecodeShape) {
  ag::ParameterSet<float> params;
  CnnConfig cfg;
  cfg.num_classes = 3;
  CnnBackbone<float> net(cfg, params, 1);
  auto logits = net.decode(nullptr, net.encode(nullptr, random_var<float>({32, 32, 32, 1}, 15)));
  EXPECT_EQ(logits->value.shape(), (Shape{32, 32, 32, 3}));
}

TEST(CnnBackbone, ZeroDecoderTiesToClassZero) {
  ag::ParameterSet<float> params;
  CnnConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 4;
  cfg.num_classes = 3;
  CnnBackbone<float> net(cfg, params, 1);
  for (auto& [name, v] : params.items()) v->value.fill(0.0f);
  auto logits = net.decode(nullptr, net.encode(nullptr, random_var<float>({8, 8, 8, 1}, 16)));
  EXPECT_TRUE(all_equal(logits->value, 0.0f));
  const auto labels = argmax_labels(logits->value, {8, 8, 8}, {});
  EXPECT_TRUE(std::all_of(labels.voxels.begin(), labels.voxels.end(), [](std::uint8_t v) { return v == 0; }));
}

struct FusionFixture {
  CnnConfig cnn;
  swin::SwinConfig swin;
  ag::ParameterSet<double> params;
  FusionWeights<double> fusion;
  FeaturePyramid<double> pyramid;
  swin::EncoderTaps<double> taps;

  FusionFixture() {
    cnn.levels = 4;
    cnn.base_channels = 4;
    swin.patch = {2, 2, 2};
    swin.embed_dim = 6;
    swin.heads = {1, 1, 1, 1};
    fusion = make_fusion(params, cnn, swin, 3);
    for (int l = 0; l < cnn.levels; ++l) {
      const std::int64_t e = 16 >> l;
      pyramid.push_back(random_var<double>({e, e, e, cnn.channels(l)}, 20 + l));
    }
    for (int s = 0; s < swin::kStages; ++s) {
      const std::int64_t e = 8 >> s;
      taps.taps[s] = random_var<double>({e, e, e, swin.stage_channels(s)}, 30 + s);
      taps.downsampling[s] = 2 << s;
    }
  }
};

TEST(FuseTaps, LevelZeroNeverFused) {
  FusionFixture f;
  EXPECT_EQ(f.fusion.tap_for_level[0], -1);
  EXPECT_EQ(f.fusion.tap_for_level[1], 0);
  EXPECT_EQ(f.fusion.tap_for_level[3], 2);
  const auto fused = fuse_taps<double>(nullptr, f.pyramid, f.taps, f.fusion);
  EXPECT_EQ(fused[0], f.pyramid[0]);
}

TEST(FuseTaps, ZeroTapsLeavePyramidUnchanged) {
  FusionFixture f;
  for (auto& t : f.taps.taps) t->value.fill(0.0);
  const auto fused = fuse_taps<double>(nullptr, f.pyramid, f.taps, f.fusion);
  for (std::size_t l = 0; l < fused.size(); ++l) EXPECT_EQ(fused[l]->value, f.pyramid[l]->value) << l;
}

TEST(FuseTaps, AdditionMatchesHandSum) {
  FusionFixture f;
  const auto fused = fuse_taps<double>(nullptr, f.pyramid, f.taps, f.fusion);
  for (int l = 1; l < f.cnn.levels; ++l) {
    const int s = f.fusion.tap_for_level[l];
    auto proj = ag::linear<double>(nullptr, f.taps.taps[s], f.fusion.weight[l], f.fusion.bias[l]);
    for (std::int64_t i = 0; i < proj->value.size(); ++i)
      EXPECT_DOUBLE_EQ(fused[l]->value[i], f.pyramid[l]->value[i] + proj->value[i]);
  }
}

TEST(FuseTaps, NegatedLevelCancelsUnderIdentityProjection) {
  CnnConfig cnn;
  cnn.levels = 2;
  cnn.base_channels = 3;
  swin::SwinConfig swin;
  swin.patch = {2, 2, 2};
  swin.embed_dim = 6;
  swin.heads = {1, 1, 1, 1};
  ag::ParameterSet<double> params;
  auto fusion = make_fusion(params, cnn, swin, 1);
  ASSERT_EQ(fusion.tap_for_level[1], 0);
  auto& w = fusion.weight[1]->value;
  w.fill(0.0);
  for (int i = 0; i < 6; ++i) w[i * 6 + i] = 1.0;
  FeaturePyramid<double> pyramid{random_var<double>({4, 4, 4, 3}, 1), random_var<double>({2, 2, 2, 6}, 2)};
  swin::EncoderTaps<double> taps;
  Tensor<double> neg = pyramid[1]->value;
  for (auto& v : neg.values()) v = -v;
  taps.taps[0] = ag::constant(neg);
  taps.downsampling[0] = 2;
  const auto fused = fuse_taps<double>(nullptr, pyramid, taps, fusion);
  EXPECT_TRUE(all_equal(fused[1]->value, 0.0));
}

TEST(FuseTaps, MissingTapIsAConfigError) {
  FusionFixture f;
  f.taps.taps[1] = nullptr;
  EXPECT_THROW(fuse_taps<double>(nullptr, f.pyramid, f.taps, f.fusion), ConfigError);
}

TEST(CnnConfig, Validation) {
  CnnConfig c;
  c.kernel = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = CnnConfig{};
  c.norm = "batch";
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace cats::cnn
