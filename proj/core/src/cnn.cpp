#include "cats/cnn.hpp"

#include <cmath>
#include <string>

#include "cats/init.hpp"

namespace cats::cnn {

using ag::Tape;
using ag::Var;

void CnnConfig::validate() const {
  if (levels < 2) throw ConfigError("cnn: levels must be at least 2");
  if (base_channels <= 0) throw ConfigError("cnn: base_channels must be positive");
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("cnn: kernel must be odd and positive");
  if (in_channels <= 0) throw ConfigError("cnn: input channels must be positive");
  if (num_classes < 2) throw ConfigError("cnn: need at least two classes");
  if (norm != "instance") throw ConfigError("cnn: unsupported norm '" + norm + "'");
  if (activation != "leaky_relu") throw ConfigError("cnn: unsupported activation '" + activation + "'");
}

template <typename T>
ConvBlockWeights<T> make_conv_block(ag::ParameterSet<T>& params, const std::string& prefix, std::int64_t in,
                                    std::int64_t out, std::int64_t kernel, std::uint64_t seed) {
  const std::int64_t k3 = kernel * kernel * kernel;
  auto conv = [&](const std::string& name, std::int64_t cin) {
    const std::string full = prefix + "." + name + ".weight";
    return params.add(full, he_normal<T>({k3 * cin, out}, k3 * cin, seed, full));
  };
  auto fill = [&](const std::string& name, T v) { return params.add(prefix + "." + name, Tensor<T>(Shape{out}, v)); };
  ConvBlockWeights<T> w;
  w.conv1_weight = conv("conv1", in);
  w.conv1_bias = fill("conv1.bias", T{0});
  w.norm1_gamma = fill("norm1.gamma", T{1});
  w.norm1_beta = fill("norm1.beta", T{0});
  w.conv2_weight = conv("conv2", out);
  w.conv2_bias = fill("conv2.bias", T{0});
  w.norm2_gamma = fill("norm2.gamma", T{1});
  w.norm2_beta = fill("norm2.beta", T{0});
  return w;
}

template <typename T>
Var<T> conv_block(Tape<T>* tape, const Var<T>& x, const ConvBlockWeights<T>& w, std::int64_t kernel) {
  auto h = ag::conv3d(tape, x, w.conv1_weight, w.conv1_bias, kernel);
  h = ag::leaky_relu(tape, ag::instance_norm(tape, h, w.norm1_gamma, w.norm1_beta));
  h = ag::conv3d(tape, h, w.conv2_weight, w.conv2_bias, kernel);
  return ag::leaky_relu(tape, ag::instance_norm(tape, h, w.norm2_gamma, w.norm2_beta));
}

template <typename T>
Var<T> downsample(Tape<T>* tape, const Var<T>& x) {
  return ag::max_pool2(tape, x);
}

template <typename T>
Var<T> upsample(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return ag::conv_transpose2(tape, x, weight, bias);
}

template <typename T>
FusionWeights<T> make_fusion(ag::ParameterSet<T>& params, const CnnConfig& cnn, const swin::SwinConfig& swin,
                             std::uint64_t seed, const std::string& prefix) {
  FusionWeights<T> f;
  f.tap_for_level.assign(static_cast<std::size_t>(cnn.levels), -1);
  f.weight.resize(static_cast<std::size_t>(cnn.levels));
  f.bias.resize(static_cast<std::size_t>(cnn.levels));
  for (int s = 0; s < swin::kStages; ++s) {
    const std::int64_t factor = swin.patch[0] << s;
    if (swin.patch[1] != swin.patch[0] || swin.patch[2] != swin.patch[0]) {
      throw ConfigError("fusion: anisotropic patch sizes have no matching pyramid level");
    }
    if ((factor & (factor - 1)) != 0) throw ConfigError("fusion: patch size must be a power of two");
    int level = 0;
    while ((std::int64_t{1} << level) < factor) ++level;
    if (level == 0 || level >= cnn.levels) continue;
    const std::int64_t tap_c = swin.stage_channels(s);
    const std::int64_t c = cnn.channels(level);
    const std::string name = prefix + ".level" + std::to_string(level);
    f.tap_for_level[level] = s;
    f.weight[level] = params.add(name + ".weight", normal<T>({tap_c, c}, std::sqrt(1.0 / static_cast<double>(tap_c)),
                                                             seed, name + ".weight"));
    f.bias[level] = params.add(name + ".bias", Tensor<T>(Shape{c}));
  }
  return f;
}

template <typename T>
FeaturePyramid<T> fuse_taps(Tape<T>* tape, const FeaturePyramid<T>& pyramid, const swin::EncoderTaps<T>& taps,
                            const FusionWeights<T>& weights, FusionMode mode) {
  if (weights.tap_for_level.size() != pyramid.size()) {
    throw ConfigError("fuse_taps: fusion weights cover " + std::to_string(weights.tap_for_level.size()) +
                      " levels, pyramid has " + std::to_string(pyramid.size()));
  }
  FeaturePyramid<T> fused = pyramid;
  for (std::size_t l = 1; l < pyramid.size(); ++l) {
    const int s = weights.tap_for_level[l];
    if (s < 0) continue;
    const auto& tap = taps.taps[static_cast<std::size_t>(s)];
    if (!tap || taps.downsampling[static_cast<std::size_t>(s)] != (std::int64_t{1} << l)) {
      throw ConfigError("fuse_taps: no transformer tap at the scale of level " + std::to_string(l));
    }
    auto projected = ag::linear(tape, tap, weights.weight[l], weights.bias[l]);
    if (mode == FusionMode::kReplace) {
      fused[l] = projected;
    } else {
      if (!pyramid[l]) throw ConfigError("fuse_taps: pyramid level " + std::to_string(l) + " is missing");
      fused[l] = ag::add(tape, pyramid[l], projected);
    }
  }
  return fused;
}

template <typename T>
CnnBackbone<T>::CnnBackbone(const CnnConfig& config, ag::ParameterSet<T>& params, std::uint64_t seed,
                            int encoder_levels, const std::string& prefix)
    : config_(config) {
  config_.validate();
  const int enc = encoder_levels < 0 ? config_.levels : encoder_levels;
  if (enc < 1 || enc > config_.levels) throw ConfigError("cnn: invalid encoder level count");
  const std::int64_t k = config_.kernel;
  for (int l = 0; l < enc; ++l) {
    const std::int64_t in = l == 0 ? config_.in_channels : config_.channels(l - 1);
    encoder_.push_back(make_conv_block(params, prefix + ".enc" + std::to_string(l), in, config_.channels(l), k, seed));
  }
  up_weight_.resize(static_cast<std::size_t>(config_.levels));
  up_bias_.resize(static_cast<std::size_t>(config_.levels));
  decoder_.resize(static_cast<std::size_t>(config_.levels));
  for (int l = config_.levels - 1; l >= 1; --l) {
    const std::int64_t in = config_.channels(l);
    const std::int64_t out = config_.channels(l - 1);
    const std::string up = prefix + ".up" + std::to_string(l);
    up_weight_[l] = params.add(up + ".weight", he_normal<T>({in, 8 * out}, in, seed, up + ".weight"));
    up_bias_[l] = params.add(up + ".bias", Tensor<T>(Shape{out}));
    decoder_[l - 1] = make_conv_block(params, prefix + ".dec" + std::to_string(l - 1), 2 * out, out, k, seed);
  }
  const std::int64_t c0 = config_.channels(0);
  head_weight_ = params.add(prefix + ".head.weight",
                            normal<T>({c0, config_.num_classes}, std::sqrt(1.0 / static_cast<double>(c0)), seed,
                                      prefix + ".head.weight"));
  head_bias_ = params.add(prefix + ".head.bias", Tensor<T>(Shape{config_.num_classes}));
}

template <typename T>
FeaturePyramid<T> CnnBackbone<T>::encode(Tape<T>* tape, const Var<T>& volume) const {
  const Shape& s = volume->value.shape();
  if (s.size() != 4 || s[3] != config_.in_channels) {
    throw PreconditionError("cnn: expected (D,H,W," + std::to_string(config_.in_channels) + ") input, got " + to_string(s));
  }
  const std::int64_t step = std::int64_t{1} << (config_.levels - 1);
  for (int a = 0; a < 3; ++a) {
    if (s[a] % step != 0) {
      throw PreconditionError("cnn: extent " + std::to_string(s[a]) + " on axis " + "dhw"[a] +
                              " is not divisible by 2^(levels-1) = " + std::to_string(step) + "; pad by " +
                              std::to_string(step - s[a] % step));
    }
  }
  FeaturePyramid<T> pyramid(static_cast<std::size_t>(config_.levels));
  Var<T> x = volume;
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    if (l > 0) x = downsample(tape, x);
    x = conv_block(tape, x, encoder_[l], config_.kernel);
    pyramid[l] = x;
  }
  return pyramid;
}

template <typename T>
Var<T> CnnBackbone<T>::decode(Tape<T>* tape, const FeaturePyramid<T>& fused) const {
  if (static_cast<int>(fused.size()) != config_.levels) {
    throw PreconditionError("cnn: decoder expects " + std::to_string(config_.levels) + " levels");
  }
  for (const auto& level : fused) {
    if (!level) throw PreconditionError("cnn: decoder received an empty pyramid level");
  }
  Var<T> x = fused.back();
  for (int l = config_.levels - 1; l >= 1; --l) {
    auto up = upsample(tape, x, up_weight_[l], up_bias_[l]);
    if (up->value.shape() != fused[l - 1]->value.shape()) {
      throw PreconditionError("cnn: upsampled level " + std::to_string(l) + " shape " + to_string(up->value.shape()) +
                              " does not match skip " + to_string(fused[l - 1]->value.shape()));
    }
    x = conv_block(tape, ag::concat_channels(tape, up, fused[l - 1]), decoder_[l - 1], config_.kernel);
  }
  return ag::linear(tape, x, head_weight_, head_bias_);
}

#define CATS_CNN_INSTANTIATE(T)                                                                                   \
  template ConvBlockWeights<T> make_conv_block<T>(ag::ParameterSet<T>&, const std::string&, std::int64_t,        \
                                                  std::int64_t, std::int64_t, std::uint64_t);                      \
  template Var<T> conv_block<T>(Tape<T>*, const Var<T>&, const ConvBlockWeights<T>&, std::int64_t);              \
  template Var<T> downsample<T>(Tape<T>*, const Var<T>&);                                                        \
  template Var<T> upsample<T>(Tape<T>*, const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template FusionWeights<T> make_fusion<T>(ag::ParameterSet<T>&, const CnnConfig&, const swin::SwinConfig&,      \
                                           std::uint64_t, const std::string&);                                   \
  template FeaturePyramid<T> fuse_taps<T>(Tape<T>*, const FeaturePyramid<T>&, const swin::EncoderTaps<T>&,       \
                                          const FusionWeights<T>&, FusionMode);                                  \
  template class CnnBackbone<T>;

CATS_CNN_INSTANTIATE(float)
CATS_CNN_INSTANTIATE(double)

#undef CATS_CNN_INSTANTIATE

}  // namespace cats::cnn
