#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "cats/errors.hpp"
#include "cats/model.hpp"
#include "cats/oracles/checks.hpp"
#include "cats/random.hpp"

namespace cats {
namespace {

ImageVolume random_image(GridDims dims, std::uint64_t seed) {
  Rng rng(seed);
  ImageVolume v(dims, 1);
  for (auto& x : v.voxels) x = static_cast<float>(rng.uniform());
  return v;
}

ModelConfig small_config(ModelMode mode = ModelMode::kHybrid) {
  ModelConfig c;
  c.input = {16, 16, 16};
  c.num_classes = 3;
  c.swin.embed_dim = 6;
  c.swin.heads = {1, 2, 2, 3};
  c.swin.window = {2, 2, 2};
  c.cnn.levels = 4;
  c.cnn.base_channels = 4;
  c.mode = mode;
  c.finalize();
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("cats-model-" + std::to_string(::getpid()) + "-" + name)).string();
}

TEST(Model, BatchShapeIsChannelLast) {
  ModelConfig c;
  c.num_classes = 3;
  c.finalize();
  CatsModel<float> model(c);
  std::vector<ImageVolume> batch{random_image({32, 32, 32}, 1), random_image({32, 32, 32}, 2)};
  const auto logits = model.forward_batch(batch);
  EXPECT_EQ(logits.shape(), (Shape{2, 32, 32, 32, 3}));
}

TEST(Model, ForwardIsDeterministic) {
  CatsModel<float> a(small_config());
  CatsModel<float> b(small_config());
  const auto img = random_image({16, 16, 16}, 3);
  const auto la = a.forward(nullptr, img);
  const auto lb = b.forward(nullptr, img);
  EXPECT_EQ(la->value, lb->value);
  EXPECT_EQ(a.forward(nullptr, img)->value, la->value);
}

TEST(Model, ZeroedTransformerPathMatchesCnnOnlyBitForBit) {
  CatsModel<float> hybrid(small_config());
  CatsModel<float> cnn(small_config(ModelMode::kCnnOnly));
  for (auto& [name, v] : hybrid.parameters().items()) {
    if (name.rfind("swin.", 0) == 0 || name.rfind("fuse.", 0) == 0) v->value.fill(0.0f);
  }
  const auto img = random_image({16, 16, 16}, 4);
  const auto a = hybrid.forward(nullptr, img)->value;
  const auto b = cnn.forward(nullptr, img)->value;
  ASSERT_EQ(a.shape(), b.shape());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())), 0);
}

TEST(Model, AblationModesBuild) {
  CatsModel<float> cnn(small_config(ModelMode::kCnnOnly));
  CatsModel<float> swin(small_config(ModelMode::kSwinOnly));
  EXPECT_EQ(cnn.swin(), nullptr);
  ASSERT_NE(swin.swin(), nullptr);
  for (const auto& [name, v] : swin.parameters().items()) EXPECT_EQ(name.find("cnn.enc1"), std::string::npos) << name;
  EXPECT_EQ(swin.forward(nullptr, random_image({16, 16, 16}, 5))->value.shape(), (Shape{16, 16, 16, 3}));
}

TEST(Model, ModeInconsistencyIsAConfigError) {
  ModelConfig c = small_config();
  c.mode = ModelMode::kSwinOnly;
  c.swin.patch = {4, 4, 4};
  EXPECT_THROW(c.finalize(), ConfigError);
  EXPECT_THROW(parse_mode("transformer"), ConfigError);
  c = small_config();
  c.input = {12, 16, 16};
  EXPECT_THROW(c.finalize(), ConfigError);
}

TEST(Model, ConfigRecordRoundtrip) {
  ModelConfig c = small_config(ModelMode::kSwinOnly);
  c.swin.use_relative_bias = false;
  c.seed = 99;
  auto back = ModelConfig::from_record(c.to_record());
  back.finalize();
  EXPECT_EQ(back.to_record(), c.to_record());
}

ag::Var<double> logits_var(const std::vector<std::uint8_t>& labels, int k, double margin) {
  Tensor<double> t(Shape{static_cast<std::int64_t>(labels.size()), k});
  for (std::size_t i = 0; i < labels.size(); ++i) t[static_cast<std::int64_t>(i) * k + labels[i]] = margin;
  return ag::constant(t);
}

TEST(Loss, ConfidentCorrectLogitsGiveSmallLoss) {
  std::vector<std::uint8_t> labels{0, 1, 2, 2, 1, 0, 0, 0};
  LabelVolume lv({2, 2, 2}, 1);
  lv.voxels = labels;
  auto l = loss<double>(nullptr, logits_var(labels, 3, 20.0), lv);
  EXPECT_LT(l->value[0], 0.01);
}

TEST(Loss, UniformLogitsGiveLnTwoCrossEntropy) {
  LabelVolume lv({2, 2, 2}, 1);
  lv.voxels = {0, 1, 0, 1, 1, 0, 1, 0};
  ag::LossParts parts;
  loss<double>(nullptr, ag::constant(Tensor<double>(Shape{2, 2, 2, 2})), lv, &parts);
  EXPECT_NEAR(parts.cross_entropy, std::log(2.0), 1e-6);
  EXPECT_NEAR(parts.total, 0.5 * (parts.dice + parts.cross_entropy), 1e-12);
}

TEST(Loss, InvariantUnderVoxelPermutation) {
  Rng rng(6);
  const int n = 27, k = 3;
  std::vector<std::uint8_t> labels(n);
  for (auto& v : labels) v = static_cast<std::uint8_t>(rng.below(k));
  Tensor<double> logits(Shape{n, k});
  for (auto& v : logits.values()) v = rng.normal();
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = (i * 7 + 3) % n;
  std::vector<std::uint8_t> plabels(n);
  Tensor<double> plogits(Shape{n, k});
  for (int i = 0; i < n; ++i) {
    plabels[i] = labels[perm[i]];
    for (int c = 0; c < k; ++c) plogits[i * k + c] = logits[perm[i] * k + c];
  }
  LabelVolume a({3, 3, 3}, 1), b({3, 3, 3}, 1);
  a.voxels = labels;
  b.voxels = plabels;
  EXPECT_NEAR(loss<double>(nullptr, ag::constant(logits), a)->value[0],
              loss<double>(nullptr, ag::constant(plogits), b)->value[0], 1e-12);
}

TEST(Loss, LabelOutOfRangeIsAnError) {
  LabelVolume lv({1, 1, 2}, 1);
  lv.voxels = {0, 3};
  EXPECT_THROW(loss<double>(nullptr, ag::constant(Tensor<double>(Shape{1, 1, 2, 3})), lv), PreconditionError);
}

TEST(Argmax, ClassOneMarginEverywhere) {
  Tensor<float> logits(Shape{2, 2, 2, 3});
  for (int v = 0; v < 8; ++v) logits[v * 3 + 1] = 1.0f;
  const auto labels = argmax_labels(logits, {2, 2, 2}, {});
  for (auto l : labels.voxels) EXPECT_EQ(l, 1);
}

TEST(Argmax, TiesGoToLowestClassAndShiftIsIrrelevant) {
  Rng rng(7);
  Tensor<float> logits(Shape{2, 3, 2, 4});
  for (auto& v : logits.values()) v = static_cast<float>(rng.below(3));
  const auto base = argmax_labels(logits, {2, 3, 2}, {});
  Tensor<float> shifted = logits;
  for (auto& v : shifted.values()) v += 5.0f;
  EXPECT_EQ(argmax_labels(shifted, {2, 3, 2}, {}).voxels, base.voxels);
  const auto ties = argmax_labels(Tensor<float>(Shape{2, 3, 2, 4}, 0.25f), {2, 3, 2}, {});
  for (auto l : ties.voxels) EXPECT_EQ(l, 0);
}

TEST(Checkpoint, ReloadReproducesForwardBitForBit) {
  CatsModel<float> model(small_config());
  Rng rng(8);
  for (auto& [name, v] : model.parameters().items())
    for (auto& x : v->value.values()) x += static_cast<float>(0.01 * rng.normal());
  const std::string path = temp_path("roundtrip.ckpt");
  kv::Record meta{{"note", "unit"}};
  write_checkpoint(path, make_checkpoint(model, 17, meta));
  const auto ckpt = read_checkpoint(path);
  EXPECT_EQ(ckpt.step, 17u);
  EXPECT_EQ(ckpt.metadata.at("note"), "unit");
  CatsModel<float> reloaded(ckpt.config);
  load_weights(reloaded, ckpt);
  const auto img = random_image({16, 16, 16}, 9);
  EXPECT_EQ(reloaded.forward(nullptr, img)->value, model.forward(nullptr, img)->value);
  std::filesystem::remove(path);
}

TEST(Checkpoint, MismatchedConfigIsRejected) {
  CatsModel<float> model(small_config());
  const auto ckpt = make_checkpoint(model, 0);
  CatsModel<float> other(small_config(ModelMode::kCnnOnly));
  EXPECT_THROW(load_weights(other, ckpt), Error);
}

TEST(Checkpoint, BadMagicAndTruncation) {
  const std::string path = temp_path("bad.ckpt");
  CatsModel<float> model(small_config());
  write_checkpoint(path, make_checkpoint(model, 1));
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  try {
    read_checkpoint(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::kTruncated);
  }
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    read_checkpoint(path);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::kBadMagic);
  }
  std::filesystem::remove(path);
}

TEST(Model, MicroConfigIsSmall) {
  CatsModel<double> micro(checks::micro_model_config());
  EXPECT_LT(micro.parameters().element_count(), 200000);
  EXPECT_EQ(micro.forward(nullptr, random_image({8, 8, 8}, 10))->value.shape(), (Shape{8, 8, 8, 3}));
}

}  // namespace
}  // namespace cats
