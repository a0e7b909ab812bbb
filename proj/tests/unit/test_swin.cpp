#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "cats/errors.hpp"
#include "cats/oracles/oracles.hpp"
#include "cats/random.hpp"
#include "cats/swin.hpp"

namespace cats::swin {
namespace {

using ag::Tape;
using ag::Var;

template <typename T>
Var<T> random_var(Shape shape, std::uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal());
  auto var = ag::constant(std::move(t));
  var->requires_grad = requires_grad;
  return var;
}

template <typename T>
void zero_all(ag::ParameterSet<T>& params) {
  for (auto& [name, v] : params.items()) v->value.fill(T{0});
}

TEST(LinearEmbed, IdentityWeightReturnsInput) {
  auto x = random_var<double>({4, 4, 4, 8}, 1);
  Tensor<double> eye(Shape{8, 8});
  for (int i = 0; i < 8; ++i) eye[i * 8 + i] = 1.0;
  auto y = linear_embed<double>(nullptr, x, ag::constant(eye), ag::constant(Tensor<double>(Shape{8})));
  EXPECT_EQ(y->value, x->value);
}

TEST(LinearEmbed, ShapeContract) {
  auto x = random_var<float>({4, 4, 4, 8}, 2);
  auto y = linear_embed<float>(nullptr, x, random_var<float>({8, 24}, 3), ag::constant(Tensor<float>(Shape{24})));
  EXPECT_EQ(y->value.shape(), (Shape{4, 4, 4, 24}));
}

TEST(LinearEmbed, ZeroWeightsGiveZeros) {
  auto x = random_var<float>({2, 2, 2, 8}, 4);
  auto y = linear_embed<float>(nullptr, x, ag::constant(Tensor<float>(Shape{8, 24})), ag::constant(Tensor<float>(Shape{24})));
  EXPECT_TRUE(std::all_of(y->value.values().begin(), y->value.values().end(), [](float v) { return v == 0.0f; }));
}

TEST(LinearEmbed, ChannelMismatchIsAnError) {
  auto x = random_var<float>({2, 2, 2, 8}, 4);
  EXPECT_THROW(linear_embed<float>(nullptr, x, random_var<float>({6, 24}, 1), Var<float>{}), PreconditionError);
}

TEST(WindowAttention, SingletonWindowIsProjectedValue) {
  ag::ParameterSet<double> params;
  const std::int64_t c = 4;
  auto w = make_block_weights(params, "blk", c, 2, {1, 1, 1}, 2.0, true, 9);
  auto x = random_var<double>({3, 1, c}, 10);
  Tensor<double> probs;
  auto y = window_attention<double>(nullptr, x, nullptr, w, 2, geometry::relative_position_index({1, 1, 1}), &probs);
  for (double p : probs.values()) EXPECT_EQ(p, 1.0);
  // V is the last third of the QKV projection.
  auto qkv = ag::linear<double>(nullptr, x, w.qkv_weight, w.qkv_bias);
  Tensor<double> v(Shape{3, 1, c});
  for (int r = 0; r < 3; ++r)
    for (int ch = 0; ch < c; ++ch) v[r * c + ch] = qkv->value[r * 3 * c + 2 * c + ch];
  auto expected = ag::linear<double>(nullptr, ag::constant(v), w.proj_weight, w.proj_bias);
  for (std::int64_t i = 0; i < y->value.size(); ++i) EXPECT_NEAR(y->value[i], expected->value[i], 1e-12);
}

TEST(WindowAttention, IdenticalValueRowsPassThrough) {
  const std::int64_t t = 8, c = 4, heads = 2;
  Rng rng(12);
  Tensor<double> qkv(Shape{1, t, 3 * c});
  std::vector<double> shared(static_cast<std::size_t>(c));
  for (auto& v : shared) v = rng.normal();
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t ch = 0; ch < 2 * c; ++ch) qkv[i * 3 * c + ch] = rng.normal();
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) qkv[i * 3 * c + 2 * c + ch] = shared[static_cast<std::size_t>(ch)];
  auto out = ag::window_attention_core<double>(nullptr, ag::constant(qkv), Var<double>{},
                                               geometry::relative_position_index({2, 2, 2}), nullptr, heads);
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) EXPECT_NEAR(out->value[i * c + ch], shared[static_cast<std::size_t>(ch)], 1e-12);
}

TEST(WindowAttention, MaskedTwoWindowBatchMatchesDenseReference) {
  const GridDims dims{4, 2, 2};
  const geometry::WindowSpec spec{{2, 2, 2}, {1, 1, 1}};
  const auto mask = geometry::build_shift_mask(dims, spec);
  ASSERT_EQ(mask.num_windows, 2);
  const std::int64_t t = 8, c = 6, heads = 3;
  auto qkv = random_var<double>({2, t, 3 * c}, 13);
  auto table = random_var<double>({geometry::relative_table_size(spec.window), heads}, 14);
  const auto rel = geometry::relative_position_index(spec.window);
  auto out = ag::window_attention_core<double>(nullptr, qkv, table, rel, &mask, heads);
  for (std::int64_t w = 0; w < 2; ++w) {
    Tensor<double> one(Shape{t, 3 * c});
    std::copy_n(qkv->value.data() + w * t * 3 * c, t * 3 * c, one.data());
    std::vector<double> m(static_cast<std::size_t>(t * t));
    for (std::int64_t i = 0; i < t; ++i)
      for (std::int64_t j = 0; j < t; ++j) m[static_cast<std::size_t>(i * t + j)] = mask.at(w, i, j);
    const auto ref = oracles::attention(one, table->value, spec.window, m, heads);
    for (std::int64_t i = 0; i < t * c; ++i) EXPECT_NEAR(out->value[w * t * c + i], ref[i], 1e-6);
  }
}

TEST(SwinBlock, ZeroProjectionsLeaveInputUnchanged) {
  ag::ParameterSet<float> params;
  auto w = make_block_weights(params, "blk", 8, 2, {2, 2, 2}, 4.0, true, 3);
  zero_all(params);
  w.norm1_gamma->value.fill(1.0f);
  w.norm2_gamma->value.fill(1.0f);
  auto x = random_var<float>({4, 4, 4, 8}, 5);
  auto y = swin_block<float>(nullptr, x, geometry::WindowSpec::shifted({2, 2, 2}), w, 2, true);
  EXPECT_EQ(y->value, x->value);
}

TEST(SwinBlock, UnshiftedFlagEqualsZeroShift) {
  ag::ParameterSet<float> params;
  auto w = make_block_weights(params, "blk", 8, 2, {2, 2, 2}, 4.0, true, 3);
  auto x = random_var<float>({4, 4, 4, 8}, 6);
  const geometry::WindowSpec zero{{2, 2, 2}, {0, 0, 0}};
  auto a = swin_block<float>(nullptr, x, geometry::WindowSpec::shifted({2, 2, 2}), w, 2, false);
  auto b = swin_block<float>(nullptr, x, zero, w, 2, true);
  EXPECT_EQ(a->value, b->value);
}

TEST(SwinBlock, FiniteDifferencesOnEveryWeight) {
  ag::ParameterSet<double> params;
  const std::int64_t c = 4;
  const auto spec = geometry::WindowSpec::shifted({2, 2, 2});
  auto w = make_block_weights(params, "blk", c, 1, spec.window, 1.0, true, 21);
  Rng rng(22);
  for (auto& [name, v] : params.items())
    for (auto& x : v->value.values()) x += 0.3 * rng.normal();
  auto x = random_var<double>({2, 2, 2, c}, 23);
  auto readout = random_var<double>({c, 1}, 24);
  auto loss = [&](Tape<double>* tape) {
    return ag::sum(tape, ag::linear(tape, swin_block(tape, x, spec, w, 1, true), readout, Var<double>{}));
  };
  Tape<double> tape;
  params.zero_grad();
  tape.backward(loss(&tape));
  const double h = 1e-5;
  double worst = 0.0;
  int checked = 0;
  for (auto& [name, v] : params.items()) {
    for (std::int64_t i = 0; i < v->value.size(); ++i) {
      const double orig = v->value[i];
      v->value[i] = orig + h;
      const double up = loss(nullptr)->value[0];
      v->value[i] = orig - h;
      const double down = loss(nullptr)->value[0];
      v->value[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = v->grad.empty() ? 0.0 : v->grad[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
      ++checked;
      EXPECT_LT(rel, 1e-4) << name << "[" << i << "] analytic " << analytic << " numeric " << numeric;
    }
  }
  EXPECT_EQ(checked, params.element_count());
  EXPECT_GT(checked, 100);
}

TEST(PatchMergeReduce, ShapeAndZeroWeights) {
  auto x = random_var<float>({4, 4, 4, 3}, 7);
  auto y = patch_merge_reduce<float>(nullptr, x, ag::constant(Tensor<float>(Shape{24, 6})));
  EXPECT_EQ(y->value.shape(), (Shape{2, 2, 2, 6}));
  EXPECT_TRUE(std::all_of(y->value.values().begin(), y->value.values().end(), [](float v) { return v == 0.0f; }));
}

TEST(PatchMergeReduce, AverageThenDuplicate) {
  Tensor<double> x(Shape{2, 2, 2, 1}, std::vector<double>{1, 2, 3, 5, 8, 13, 21, 34});
  Tensor<double> w(Shape{8, 2}, 1.0 / 8.0);
  auto y = patch_merge_reduce<double>(nullptr, ag::constant(x), ag::constant(w));
  ASSERT_EQ(y->value.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_DOUBLE_EQ(y->value[0], 87.0 / 8.0);
  EXPECT_DOUBLE_EQ(y->value[1], 87.0 / 8.0);
}

SwinConfig default_config() { return SwinConfig{}; }

TEST(SwinEncoder, TapShapesFollowTheDoublingLaw) {
  ag::ParameterSet<float> params;
  SwinEncoder<float> enc(default_config(), {32, 32, 32}, params, 1);
  auto taps = enc.forward(nullptr, random_var<float>({32, 32, 32, 1}, 8));
  const Shape expected[] = {{16, 16, 16, 24}, {8, 8, 8, 48}, {4, 4, 4, 96}, {2, 2, 2, 192}};
  for (int s = 0; s < kStages; ++s) {
    EXPECT_EQ(taps.taps[s]->value.shape(), expected[s]) << s;
    EXPECT_EQ(taps.downsampling[s], 2 << s);
  }
}

TEST(SwinEncoder, RepeatedForwardIsBitIdentical) {
  ag::ParameterSet<float> params;
  SwinConfig cfg;
  cfg.embed_dim = 6;
  cfg.heads = {1, 2, 2, 3};
  SwinEncoder<float> enc(cfg, {16, 16, 16}, params, 2);
  auto x = random_var<float>({16, 16, 16, 1}, 9);
  auto a = enc.forward(nullptr, x);
  auto b = enc.forward(nullptr, x);
  for (int s = 0; s < kStages; ++s) EXPECT_EQ(a.taps[s]->value, b.taps[s]->value);
}

TEST(SwinEncoder, SameSeedSameWeights) {
  ag::ParameterSet<float> p1, p2;
  SwinEncoder<float> a(default_config(), {16, 16, 16}, p1, 4);
  SwinEncoder<float> b(default_config(), {16, 16, 16}, p2, 4);
  ASSERT_EQ(p1.items().size(), p2.items().size());
  for (std::size_t i = 0; i < p1.items().size(); ++i) EXPECT_EQ(p1.items()[i].second->value, p2.items()[i].second->value);
}

TEST(SwinEncoder, InconsistentConfigFailsBeforeCompute) {
  ag::ParameterSet<float> params;
  SwinConfig heads_bad;
  heads_bad.heads = {5, 6, 12, 24};
  EXPECT_THROW(SwinEncoder<float>(heads_bad, {32, 32, 32}, params, 1), ConfigError);
  EXPECT_THROW(SwinEncoder<float>(default_config(), {24, 32, 32}, params, 1), ConfigError);
}

TEST(EffectiveWindow, SmallAxesCollapse) {
  const auto spec = effective_window({2, 8, 4}, {4, 4, 4}, true);
  EXPECT_EQ(spec.window, (Extent3{2, 4, 4}));
  EXPECT_EQ(spec.shift, (geometry::Offset3{0, 2, 0}));
}

}  // namespace
}  // namespace cats::swin
