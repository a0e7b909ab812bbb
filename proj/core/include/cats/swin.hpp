#pragma once

// Shifted-window transformer encoder: patch partition + linear embedding,
// four stages of paired regular/shifted window attention blocks, patch
// merging between stages and one normalised feature tap per stage.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cats/autograd.hpp"
#include "cats/geometry.hpp"
#include "cats/ops.hpp"

namespace cats::swin {

inline constexpr int kStages = 4;
inline constexpr int kLayersPerStage = 2;
inline constexpr double kInitStd = 0.02;

struct SwinConfig {
  Extent3 patch{2, 2, 2};
  std::int64_t in_channels = 1;
  std::int64_t embed_dim = 24;
  std::array<std::int64_t, kStages> heads{3, 6, 12, 24};
  Extent3 window{4, 4, 4};
  double mlp_ratio = 4.0;
  bool use_relative_bias = true;

  std::int64_t stage_channels(int stage) const { return embed_dim << stage; }
  // Throws ConfigError on any head/channel/window inconsistency.
  void validate() const;
};

template <typename T>
struct BlockWeights {
  ag::Var<T> norm1_gamma, norm1_beta;
  ag::Var<T> qkv_weight, qkv_bias;
  ag::Var<T> proj_weight, proj_bias;
  ag::Var<T> relative_bias;  // (table entries, heads); null when disabled
  ag::Var<T> norm2_gamma, norm2_beta;
  ag::Var<T> fc1_weight, fc1_bias;
  ag::Var<T> fc2_weight, fc2_bias;
};

// Registers one block's parameters as `<prefix>.<name>` with standard
// initialisation: truncated normal projections, zero biases, unit norms and a
// zero relative-bias table.
template <typename T>
BlockWeights<T> make_block_weights(ag::ParameterSet<T>& params, const std::string& prefix, std::int64_t channels,
                                   std::int64_t heads, Extent3 window, double mlp_ratio, bool relative_bias,
                                   std::uint64_t seed);

// Index plumbing of one transformer layer on a fixed grid.
struct BlockPlan {
  GridDims dims;
  geometry::WindowSpec spec;
  geometry::PadRecord pad;
  geometry::RowMap to_windows;    // pad, shift, partition
  geometry::RowMap from_windows;  // reverse, unshift, crop
  geometry::AttentionMask mask;
  bool masked = false;
  std::vector<std::int64_t> relative_index;
  std::int64_t num_windows = 0;
};

BlockPlan make_block_plan(GridDims dims, const geometry::WindowSpec& spec);

// Window and shift actually used for a stage grid: axes no larger than the
// window collapse to a single unshifted window.
geometry::WindowSpec effective_window(GridDims dims, Extent3 window, bool shifted);

// Per-token affine embedding of patch tokens.
template <typename T>
ag::Var<T> linear_embed(ag::Tape<T>* tape, const ag::Var<T>& tokens, const ag::Var<T>& weight, const ag::Var<T>& bias);

// Multi-head attention over a (windows, tokens, C) batch including the QKV
// and output projections.
template <typename T>
ag::Var<T> window_attention(ag::Tape<T>* tape, const ag::Var<T>& windows, const geometry::AttentionMask* mask,
                            const BlockWeights<T>& weights, std::int64_t heads,
                            std::span<const std::int64_t> relative_index, Tensor<T>* probs = nullptr);

// x + Attn(Norm(x)) under the plan's windowing, then x + MLP(Norm(x)).
template <typename T>
ag::Var<T> swin_block(ag::Tape<T>* tape, const ag::Var<T>& x, const BlockPlan& plan, const BlockWeights<T>& weights,
                      std::int64_t heads);

// Convenience form: builds the plan from `spec`, dropping the shift when
// `shifted` is false.
template <typename T>
ag::Var<T> swin_block(ag::Tape<T>* tape, const ag::Var<T>& x, const geometry::WindowSpec& spec,
                      const BlockWeights<T>& weights, std::int64_t heads, bool shifted);

// 2x2x2 neighbourhood concatenation (8C) followed by a bias-free 8C -> 2C map.
template <typename T>
ag::Var<T> patch_merge_reduce(ag::Tape<T>* tape, const ag::Var<T>& x, const ag::Var<T>& weight);

template <typename T>
struct EncoderTaps {
  std::array<ag::Var<T>, kStages> taps;
  // Downsampling factor of each tap relative to the input volume.
  std::array<std::int64_t, kStages> downsampling{};
};

template <typename T>
class SwinEncoder {
 public:
  // Registers every parameter under `prefix` and precomputes the window plans
  // for `input` extents. Throws ConfigError before any compute if the
  // configuration cannot produce four stages.
  SwinEncoder(const SwinConfig& config, GridDims input, ag::ParameterSet<T>& params, std::uint64_t seed,
              const std::string& prefix = "swin");

  // volume: (D, H, W, in_channels).
  EncoderTaps<T> forward(ag::Tape<T>* tape, const ag::Var<T>& volume) const;

  const SwinConfig& config() const noexcept { return config_; }
  GridDims stage_dims(int stage) const { return stage_dims_[stage]; }
  const BlockPlan& plan(int stage, int layer) const { return plans_[stage][layer]; }
  const BlockWeights<T>& block(int stage, int layer) const { return blocks_[stage][layer]; }

 private:
  SwinConfig config_;
  GridDims input_;
  std::array<GridDims, kStages> stage_dims_;
  ag::Var<T> embed_weight_, embed_bias_;
  std::array<std::array<BlockWeights<T>, kLayersPerStage>, kStages> blocks_;
  std::array<std::array<BlockPlan, kLayersPerStage>, kStages> plans_;
  std::array<ag::Var<T>, kStages - 1> merge_weight_;
  std::array<ag::Var<T>, kStages> tap_gamma_, tap_beta_;
};

}  // namespace cats::swin
