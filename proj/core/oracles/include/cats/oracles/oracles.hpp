#pragma once

// Reference implementations written for clarity rather than speed. They share
// data types with the library but none of its index or kernel code.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cats/autograd.hpp"
#include "cats/geometry.hpp"
#include "cats/metrics.hpp"
#include "cats/tensor.hpp"

namespace cats::oracles {

// ---- geometry ----

// (windows, tokens, C) by direct coordinate arithmetic; dims divisible by window.
template <typename T>
std::vector<T> window_partition(const geometry::TokenGrid<T>& grid, Extent3 window);

// out(p) = in((p + shift) mod D) per axis.
template <typename T>
geometry::TokenGrid<T> cyclic_shift(const geometry::TokenGrid<T>& grid, geometry::Offset3 shift);

// Mask of the shifted grid from first principles: two tokens of one window
// may attend iff, on every axis, both or neither wrapped around during the
// shift. `fault` moves the wrap boundary by that many tokens (harness self-test).
geometry::AttentionMask shift_mask(GridDims dims, const geometry::WindowSpec& spec, int fault = 0);

// ---- kernels ----

// x: (D, H, W, Cin); weight (k, k, k, Cin, Cout) flattened; zero padding k/2.
Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& weight, const Tensor<double>& bias,
                      std::int64_t kernel);
// weight (Cin, 2, 2, 2, Cout) flattened; output voxel (2i+a, 2j+b, 2k+c).
Tensor<double> conv_transpose2(const Tensor<double>& x, const Tensor<double>& weight, const Tensor<double>& bias);
// Same map computed as zero insertion (stride 2) followed by a 2x2x2 convolution.
Tensor<double> conv_transpose2_zero_stuffed(const Tensor<double>& x, const Tensor<double>& weight,
                                            const Tensor<double>& bias);
// Concatenate the 2x2x2 neighbourhood in (a, b, c) raster order, then x W.
Tensor<double> patch_merge(const Tensor<double>& x, const Tensor<double>& weight);

// One window of multi-head attention with explicit loops. qkv: (tokens, 3C);
// bias: (table, heads) or empty; mask: tokens x tokens additive or empty.
// Returns (tokens, C); probs receives (heads, tokens, tokens).
Tensor<double> attention(const Tensor<double>& qkv, const Tensor<double>& bias_table, Extent3 window,
                         const std::vector<double>& mask, std::int64_t heads, Tensor<double>* probs = nullptr);

// ---- metrics ----

double dice(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t k);
std::vector<Extent3> surface(const metrics::Mask& mask);
// All-pairs nearest distances, pred->gt then gt->pred.
std::vector<double> pooled_distances(const metrics::Mask& pred, const metrics::Mask& gt, Spacing spacing);
std::optional<double> asd(const metrics::Mask& pred, const metrics::Mask& gt, Spacing spacing);
std::optional<double> hd95(const metrics::Mask& pred, const metrics::Mask& gt, Spacing spacing);

// ---- gradients ----

struct GradCheckResult {
  int sampled = 0;
  int replaced = 0;  // samples dropped because the two step sizes disagreed (non-smooth point)
  double max_relative_error = 0.0;
  std::string worst;
};

// Central differences on `samples` randomly chosen scalar parameters against
// the analytic gradient of `loss`. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult check_gradients(ag::ParameterSet<double>& params,
                                const std::function<ag::Var<double>(ag::Tape<double>*)>& loss, int samples,
                                std::uint64_t seed, double step = 1e-5, double floor = 1e-6);

}  // namespace cats::oracles
