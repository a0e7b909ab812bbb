#pragma once

// U-shaped convolutional path: conv blocks with max-pool downsampling,
// transposed-convolution upsampling, concatenation skips and the additive
// fusion points where transformer taps enter.

#include <cstdint>
#include <string>
#include <vector>

#include "cats/autograd.hpp"
#include "cats/ops.hpp"
#include "cats/swin.hpp"

namespace cats::cnn {

struct CnnConfig {
  int levels = 5;
  std::int64_t base_channels = 16;
  std::int64_t kernel = 3;
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 2;
  // Recorded for checkpoints; the only supported recipe.
  std::string norm = "instance";
  std::string activation = "leaky_relu";

  std::int64_t channels(int level) const { return base_channels << level; }
  void validate() const;
};

template <typename T>
struct ConvBlockWeights {
  ag::Var<T> conv1_weight, conv1_bias, norm1_gamma, norm1_beta;
  ag::Var<T> conv2_weight, conv2_bias, norm2_gamma, norm2_beta;
};

template <typename T>
ConvBlockWeights<T> make_conv_block(ag::ParameterSet<T>& params, const std::string& prefix, std::int64_t in,
                                    std::int64_t out, std::int64_t kernel, std::uint64_t seed);

// Two (conv -> instance norm -> leaky ramp) stages, same padding.
template <typename T>
ag::Var<T> conv_block(ag::Tape<T>* tape, const ag::Var<T>& x, const ConvBlockWeights<T>& w, std::int64_t kernel);

template <typename T>
ag::Var<T> downsample(ag::Tape<T>* tape, const ag::Var<T>& x);

template <typename T>
ag::Var<T> upsample(ag::Tape<T>* tape, const ag::Var<T>& x, const ag::Var<T>& weight, const ag::Var<T>& bias);

// One (D_l, H_l, W_l, channels(l)) feature map per encoder level.
template <typename T>
using FeaturePyramid = std::vector<ag::Var<T>>;

enum class FusionMode {
  kAdd,      // level + project(tap)
  kReplace,  // project(tap) only
};

// 1x1x1 projections from transformer taps onto pyramid levels. Entry l is
// null when level l is not fused; level 0 never is.
template <typename T>
struct FusionWeights {
  std::vector<int> tap_for_level;  // -1 when unfused
  std::vector<ag::Var<T>> weight;
  std::vector<ag::Var<T>> bias;
};

// Maps each tap onto the pyramid level with the same downsampling factor and
// registers a projection for it.
template <typename T>
FusionWeights<T> make_fusion(ag::ParameterSet<T>& params, const CnnConfig& cnn, const swin::SwinConfig& swin,
                             std::uint64_t seed, const std::string& prefix = "fuse");

template <typename T>
FeaturePyramid<T> fuse_taps(ag::Tape<T>* tape, const FeaturePyramid<T>& pyramid, const swin::EncoderTaps<T>& taps,
                            const FusionWeights<T>& weights, FusionMode mode = FusionMode::kAdd);

template <typename T>
class CnnBackbone {
 public:
  // encoder_levels < levels registers only the first encoder levels (used by
  // the transformer-only ablation, which replaces the rest).
  CnnBackbone(const CnnConfig& config, ag::ParameterSet<T>& params, std::uint64_t seed, int encoder_levels = -1,
              const std::string& prefix = "cnn");

  // volume: (D, H, W, in_channels); extents divisible by 2^(levels-1).
  FeaturePyramid<T> encode(ag::Tape<T>* tape, const ag::Var<T>& volume) const;
  // Returns (D, H, W, num_classes) logits.
  ag::Var<T> decode(ag::Tape<T>* tape, const FeaturePyramid<T>& fused) const;

  const CnnConfig& config() const noexcept { return config_; }
  int encoder_levels() const noexcept { return static_cast<int>(encoder_.size()); }

 private:
  CnnConfig config_;
  std::vector<ConvBlockWeights<T>> encoder_;
  std::vector<ag::Var<T>> up_weight_, up_bias_;  // index l: level l -> l-1
  std::vector<ConvBlockWeights<T>> decoder_;     // index l: output at level l
  ag::Var<T> head_weight_, head_bias_;
};

}  // namespace cats::cnn
