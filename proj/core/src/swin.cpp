#include "cats/swin.hpp"

#include <cmath>
#include <string>

#include "cats/init.hpp"

namespace cats::swin {

using ag::Tape;
using ag::Var;
namespace geo = cats::geometry;

void SwinConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (patch[a] <= 0) throw ConfigError("swin: patch size must be positive on every axis");
    if (window[a] <= 0) throw ConfigError("swin: window size must be positive on every axis");
  }
  if (in_channels <= 0) throw ConfigError("swin: input channels must be positive");
  if (embed_dim <= 0) throw ConfigError("swin: embed_dim must be positive");
  if (!(mlp_ratio > 0.0)) throw ConfigError("swin: mlp_ratio must be positive");
  for (int s = 0; s < kStages; ++s) {
    if (heads[s] <= 0 || stage_channels(s) % heads[s] != 0) {
      throw ConfigError("swin: stage " + std::to_string(s) + " width " + std::to_string(stage_channels(s)) +
                        " is not divisible by " + std::to_string(heads[s]) + " heads");
    }
  }
}

geo::WindowSpec effective_window(GridDims dims, Extent3 window, bool shifted) {
  geo::WindowSpec spec;
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= window[a]) {
      spec.window[a] = dims[a];
      spec.shift[a] = 0;
    } else {
      spec.window[a] = window[a];
      spec.shift[a] = shifted ? window[a] / 2 : 0;
    }
  }
  return spec;
}

BlockPlan make_block_plan(GridDims dims, const geo::WindowSpec& spec) {
  BlockPlan plan;
  plan.dims = dims;
  plan.spec = spec;
  plan.pad = geo::pad_record(dims, spec);
  const GridDims padded = plan.pad.padded();
  const geo::Offset3 back{-spec.shift[0], -spec.shift[1], -spec.shift[2]};
  plan.to_windows = geo::compose(geo::compose(geo::pad_map(plan.pad), geo::cyclic_shift_map(padded, spec.shift)),
                                 geo::window_partition_map(padded, spec));
  plan.from_windows = geo::compose(geo::compose(geo::window_reverse_map(padded, spec), geo::cyclic_shift_map(padded, back)),
                                   geo::crop_map(plan.pad));
  plan.masked = spec.is_shifted() || !plan.pad.empty();
  if (plan.masked) plan.mask = geo::build_attention_mask(plan.pad, spec);
  plan.relative_index = geo::relative_position_index(spec.window);
  plan.num_windows = padded.count() / spec.tokens();
  return plan;
}

template <typename T>
BlockWeights<T> make_block_weights(ag::ParameterSet<T>& params, const std::string& prefix, std::int64_t channels,
                                   std::int64_t heads, Extent3 window, double mlp_ratio, bool relative_bias,
                                   std::uint64_t seed) {
  const std::int64_t hidden = std::max<std::int64_t>(1, std::llround(mlp_ratio * static_cast<double>(channels)));
  auto tn = [&](const std::string& name, Shape shape) {
    return params.add(prefix + "." + name, truncated_normal<T>(std::move(shape), kInitStd, seed, prefix + "." + name));
  };
  auto fill = [&](const std::string& name, Shape shape, T v) {
    return params.add(prefix + "." + name, Tensor<T>(std::move(shape), v));
  };
  BlockWeights<T> w;
  w.norm1_gamma = fill("norm1.gamma", {channels}, T{1});
  w.norm1_beta = fill("norm1.beta", {channels}, T{0});
  w.qkv_weight = tn("attn.qkv.weight", {channels, 3 * channels});
  w.qkv_bias = fill("attn.qkv.bias", {3 * channels}, T{0});
  w.proj_weight = tn("attn.proj.weight", {channels, channels});
  w.proj_bias = fill("attn.proj.bias", {channels}, T{0});
  if (relative_bias) w.relative_bias = fill("attn.relative_bias", {geo::relative_table_size(window), heads}, T{0});
  w.norm2_gamma = fill("norm2.gamma", {channels}, T{1});
  w.norm2_beta = fill("norm2.beta", {channels}, T{0});
  w.fc1_weight = tn("mlp.fc1.weight", {channels, hidden});
  w.fc1_bias = fill("mlp.fc1.bias", {hidden}, T{0});
  w.fc2_weight = tn("mlp.fc2.weight", {hidden, channels});
  w.fc2_bias = fill("mlp.fc2.bias", {channels}, T{0});
  return w;
}

template <typename T>
Var<T> linear_embed(Tape<T>* tape, const Var<T>& tokens, const Var<T>& weight, const Var<T>& bias) {
  return ag::linear(tape, tokens, weight, bias);
}

template <typename T>
Var<T> window_attention(Tape<T>* tape, const Var<T>& windows, const geo::AttentionMask* mask,
                        const BlockWeights<T>& weights, std::int64_t heads, std::span<const std::int64_t> relative_index,
                        Tensor<T>* probs) {
  auto qkv = ag::linear(tape, windows, weights.qkv_weight, weights.qkv_bias);
  auto attended = ag::window_attention_core(tape, qkv, weights.relative_bias, relative_index, mask, heads, probs);
  return ag::linear(tape, attended, weights.proj_weight, weights.proj_bias);
}

template <typename T>
Var<T> swin_block(Tape<T>* tape, const Var<T>& x, const BlockPlan& plan, const BlockWeights<T>& weights,
                  std::int64_t heads) {
  const Shape& s = x->value.shape();
  if (s.size() != 4 || !(GridDims{s[0], s[1], s[2]} == plan.dims)) {
    throw PreconditionError("swin_block: input " + to_string(s) + " does not match planned grid " + to_string(plan.dims));
  }
  const std::int64_t c = s[3];
  auto h = ag::layer_norm(tape, x, weights.norm1_gamma, weights.norm1_beta);
  auto windows = ag::gather(tape, h, c, plan.to_windows, Shape{plan.num_windows, plan.spec.tokens(), c});
  auto attended = window_attention(tape, windows, plan.masked ? &plan.mask : nullptr, weights, heads,
                                   std::span<const std::int64_t>(plan.relative_index));
  auto back = ag::gather(tape, attended, c, plan.from_windows, s);
  auto y = ag::add(tape, x, back);
  auto h2 = ag::layer_norm(tape, y, weights.norm2_gamma, weights.norm2_beta);
  auto mlp = ag::linear(tape, ag::gelu(tape, ag::linear(tape, h2, weights.fc1_weight, weights.fc1_bias)),
                        weights.fc2_weight, weights.fc2_bias);
  return ag::add(tape, y, mlp);
}

template <typename T>
Var<T> swin_block(Tape<T>* tape, const Var<T>& x, const geo::WindowSpec& spec, const BlockWeights<T>& weights,
                  std::int64_t heads, bool shifted) {
  const Shape& s = x->value.shape();
  if (s.size() != 4) throw PreconditionError("swin_block: expected a (D,H,W,C) tensor, got " + to_string(s));
  geo::WindowSpec used = spec;
  if (!shifted) used.shift = {0, 0, 0};
  return swin_block(tape, x, make_block_plan({s[0], s[1], s[2]}, used), weights, heads);
}

template <typename T>
Var<T> patch_merge_reduce(Tape<T>* tape, const Var<T>& x, const Var<T>& weight) {
  const Shape& s = x->value.shape();
  if (s.size() != 4) throw PreconditionError("patch_merge_reduce: expected a (D,H,W,C) tensor, got " + to_string(s));
  const GridDims dims{s[0], s[1], s[2]};
  auto merged = ag::gather(tape, x, s[3], geo::merge_map(dims), Shape{s[0] / 2, s[1] / 2, s[2] / 2, 8 * s[3]});
  return ag::linear(tape, merged, weight, Var<T>{});
}

template <typename T>
SwinEncoder<T>::SwinEncoder(const SwinConfig& config, GridDims input, ag::ParameterSet<T>& params, std::uint64_t seed,
                            const std::string& prefix)
    : config_(config), input_(input) {
  config_.validate();
  validate(input, "swin encoder input");
  GridDims dims;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t need = config_.patch[a] << (kStages - 1);
    if (input[a] % need != 0) {
      throw ConfigError("swin: input extent " + std::to_string(input[a]) + " on axis " + "dhw"[a] +
                        " must be divisible by patch*2^3 = " + std::to_string(need));
    }
    dims[a] = input[a] / config_.patch[a];
  }
  const std::int64_t patch_values = config_.in_channels * config_.patch[0] * config_.patch[1] * config_.patch[2];
  embed_weight_ = params.add(prefix + ".embed.weight",
                             truncated_normal<T>({patch_values, config_.embed_dim}, kInitStd, seed, prefix + ".embed.weight"));
  embed_bias_ = params.add(prefix + ".embed.bias", Tensor<T>(Shape{config_.embed_dim}));
  for (int s = 0; s < kStages; ++s) {
    stage_dims_[s] = dims;
    const std::int64_t c = config_.stage_channels(s);
    for (int l = 0; l < kLayersPerStage; ++l) {
      const auto spec = effective_window(dims, config_.window, l % 2 == 1);
      plans_[s][l] = make_block_plan(dims, spec);
      const std::string name = prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(l);
      blocks_[s][l] = make_block_weights(params, name, c, config_.heads[s], spec.window, config_.mlp_ratio,
                                         config_.use_relative_bias, seed);
    }
    tap_gamma_[s] = params.add(prefix + ".tap" + std::to_string(s) + ".gamma", Tensor<T>(Shape{c}, T{1}));
    tap_beta_[s] = params.add(prefix + ".tap" + std::to_string(s) + ".beta", Tensor<T>(Shape{c}));
    if (s + 1 < kStages) {
      const std::string name = prefix + ".merge" + std::to_string(s) + ".weight";
      merge_weight_[s] = params.add(name, truncated_normal<T>({8 * c, 2 * c}, kInitStd, seed, name));
      dims = {dims.d / 2, dims.h / 2, dims.w / 2};
    }
  }
}

template <typename T>
EncoderTaps<T> SwinEncoder<T>::forward(Tape<T>* tape, const Var<T>& volume) const {
  const Shape& s = volume->value.shape();
  if (s.size() != 4 || !(GridDims{s[0], s[1], s[2]} == input_) || s[3] != config_.in_channels) {
    throw PreconditionError("swin: input " + to_string(s) + " does not match configured extent " + to_string(input_) +
                            " with " + std::to_string(config_.in_channels) + " channels");
  }
  const GridDims grid = stage_dims_[0];
  const std::int64_t patch_values = config_.in_channels * config_.patch[0] * config_.patch[1] * config_.patch[2];
  auto tokens = ag::gather(tape, volume, config_.in_channels, geo::patch_partition_map(input_, config_.patch),
                           Shape{grid.d, grid.h, grid.w, patch_values});
  auto x = linear_embed(tape, tokens, embed_weight_, embed_bias_);
  EncoderTaps<T> out;
  for (int st = 0; st < kStages; ++st) {
    for (int l = 0; l < kLayersPerStage; ++l) x = swin_block(tape, x, plans_[st][l], blocks_[st][l], config_.heads[st]);
    out.taps[st] = ag::layer_norm(tape, x, tap_gamma_[st], tap_beta_[st]);
    out.downsampling[st] = config_.patch[0] << st;
    if (st + 1 < kStages) x = patch_merge_reduce(tape, x, merge_weight_[st]);
  }
  return out;
}

#define CATS_SWIN_INSTANTIATE(T)                                                                                     \
  template BlockWeights<T> make_block_weights<T>(ag::ParameterSet<T>&, const std::string&, std::int64_t, std::int64_t, \
                                                 Extent3, double, bool, std::uint64_t);                              \
  template Var<T> linear_embed<T>(Tape<T>*, const Var<T>&, const Var<T>&, const Var<T>&);                          \
  template Var<T> window_attention<T>(Tape<T>*, const Var<T>&, const geo::AttentionMask*, const BlockWeights<T>&,   \
                                      std::int64_t, std::span<const std::int64_t>, Tensor<T>*);                     \
  template Var<T> swin_block<T>(Tape<T>*, const Var<T>&, const BlockPlan&, const BlockWeights<T>&, std::int64_t);   \
  template Var<T> swin_block<T>(Tape<T>*, const Var<T>&, const geo::WindowSpec&, const BlockWeights<T>&,            \
                                std::int64_t, bool);                                                                \
  template Var<T> patch_merge_reduce<T>(Tape<T>*, const Var<T>&, const Var<T>&);                                   \
  template class SwinEncoder<T>;

CATS_SWIN_INSTANTIATE(float)
CATS_SWIN_INSTANTIATE(double)

#undef CATS_SWIN_INSTANTIATE

}  // namespace cats::swin
