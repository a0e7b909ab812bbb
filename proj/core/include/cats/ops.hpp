#pragma once

// Differentiable tensor operations used by both encoder paths and the
// decoder. Spatial tensors are channel-last (D, H, W, C).

#include <cstdint>
#include <span>

#include "cats/autograd.hpp"
#include "cats/geometry.hpp"

namespace cats::ag {

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kLeakySlope = 0.01;
// Smoothing constant of the soft-Dice term, numerator and denominator.
inline constexpr double kDiceSmoothing = 1e-5;

// Row gather: the input is viewed as rows of `row_size` values and output row
// r copies input row map[r] (zeros for negative entries). Backward scatter-adds.
template <typename T>
Var<T> gather(Tape<T>* tape, const Var<T>& x, std::int64_t row_size, const geometry::RowMap& map, Shape out_shape);

// y = x W + b over the last axis. W is (in, out); b may be null.
template <typename T>
Var<T> linear(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> add(Tape<T>* tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(Tape<T>* tape, const Var<T>& x, T factor);

// Concatenation along the last axis.
template <typename T>
Var<T> concat_channels(Tape<T>* tape, const Var<T>& a, const Var<T>& b);

// Normalisation over the last axis with affine gamma/beta.
template <typename T>
Var<T> layer_norm(Tape<T>* tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

// Per-channel normalisation over all spatial positions of (D, H, W, C).
template <typename T>
Var<T> instance_norm(Tape<T>* tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);

// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Tape<T>* tape, const Var<T>& x);

template <typename T>
Var<T> leaky_relu(Tape<T>* tape, const Var<T>& x, T slope = static_cast<T>(kLeakySlope));

// Stride-1 same-padded 3D convolution with a cubic odd kernel. Weight layout is
// (kd, kh, kw, in) x out, flattened to (k^3 * in, out).
template <typename T>
Var<T> conv3d(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::int64_t kernel);

// Kernel-2 stride-2 transposed convolution. Weight layout is in x (a, b, c, out)
// flattened to (in, 8 * out); output extents double.
template <typename T>
Var<T> conv_transpose2(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// 2x2x2 max pooling, stride 2. Ties resolve to the first voxel in raster order.
template <typename T>
Var<T> max_pool2(Tape<T>* tape, const Var<T>& x);

// Multi-head scaled dot-product attention inside each window.
// qkv: (windows, tokens, 3C) laid out [q | k | v], heads split each block.
// bias_table: (table_size, heads) relative-position bias, may be null.
// rel_index: (tokens x tokens) into the table; mask: may be null.
// probs, when non-null, receives the softmax weights (windows, heads, t, t).
template <typename T>
Var<T> window_attention_core(Tape<T>* tape, const Var<T>& qkv, const Var<T>& bias_table,
                             std::span<const std::int64_t> rel_index, const geometry::AttentionMask* mask,
                             std::int64_t heads, Tensor<T>* probs = nullptr);

template <typename T>
Var<T> sum(Tape<T>* tape, const Var<T>& x);

// Token grids enter the differentiable world as (D, H, W, C) tensors.
template <typename T>
Var<T> grid_variable(const geometry::TokenGrid<T>& grid, bool requires_grad = false) {
  auto v = constant(Tensor<T>(Shape{grid.dims.d, grid.dims.h, grid.dims.w, grid.channels}, grid.values));
  v->requires_grad = requires_grad;
  return v;
}

template <typename T>
geometry::TokenGrid<T> grid_of(const Var<T>& v) {
  const Shape& s = v->value.shape();
  if (s.size() != 4) throw PreconditionError("grid_of: expected a (D,H,W,C) tensor, got " + to_string(s));
  geometry::TokenGrid<T> g;
  g.dims = {s[0], s[1], s[2]};
  g.channels = s[3];
  g.values.assign(v->value.values().begin(), v->value.values().end());
  return g;
}

struct LossParts {
  double total = 0.0;
  double dice = 0.0;
  double cross_entropy = 0.0;
};

// Segmentation loss: mean of the soft-Dice loss (averaged over all K classes)
// and voxel-wise cross-entropy. logits: (..., K); labels: one per voxel.
template <typename T>
Var<T> segmentation_loss(Tape<T>* tape, const Var<T>& logits, std::span<const std::uint8_t> labels,
                         LossParts* parts = nullptr);

}  // namespace cats::ag
