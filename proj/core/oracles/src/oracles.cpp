#include "cats/oracles/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cats/random.hpp"

namespace cats::oracles {

namespace {

std::int64_t wrap(std::int64_t x, std::int64_t n) { return ((x % n) + n) % n; }

}  // namespace

template <typename T>
std::vector<T> window_partition(const geometry::TokenGrid<T>& grid, Extent3 window) {
  const GridDims g = grid.dims;
  const std::int64_t nd = g.d / window[0], nh = g.h / window[1], nw = g.w / window[2];
  std::vector<T> out;
  out.reserve(grid.values.size());
  for (std::int64_t a = 0; a < nd; ++a)
    for (std::int64_t b = 0; b < nh; ++b)
      for (std::int64_t c = 0; c < nw; ++c)
        for (std::int64_t i = 0; i < window[0]; ++i)
          for (std::int64_t j = 0; j < window[1]; ++j)
            for (std::int64_t k = 0; k < window[2]; ++k)
              for (std::int64_t ch = 0; ch < grid.channels; ++ch)
                out.push_back(grid.at(a * window[0] + i, b * window[1] + j, c * window[2] + k, ch));
  return out;
}

template <typename T>
geometry::TokenGrid<T> cyclic_shift(const geometry::TokenGrid<T>& grid, geometry::Offset3 shift) {
  geometry::TokenGrid<T> out(grid.dims, grid.channels);
  const GridDims g = grid.dims;
  for (std::int64_t i = 0; i < g.d; ++i)
    for (std::int64_t j = 0; j < g.h; ++j)
      for (std::int64_t k = 0; k < g.w; ++k)
        for (std::int64_t ch = 0; ch < grid.channels; ++ch)
          out.at(i, j, k, ch) = grid.at(wrap(i + shift[0], g.d), wrap(j + shift[1], g.h), wrap(k + shift[2], g.w), ch);
  return out;
}

template std::vector<float> window_partition<float>(const geometry::TokenGrid<float>&, Extent3);
template std::vector<double> window_partition<double>(const geometry::TokenGrid<double>&, Extent3);
template std::vector<int> window_partition<int>(const geometry::TokenGrid<int>&, Extent3);
template geometry::TokenGrid<float> cyclic_shift<float>(const geometry::TokenGrid<float>&, geometry::Offset3);
template geometry::TokenGrid<double> cyclic_shift<double>(const geometry::TokenGrid<double>&, geometry::Offset3);
template geometry::TokenGrid<int> cyclic_shift<int>(const geometry::TokenGrid<int>&, geometry::Offset3);

geometry::AttentionMask shift_mask(GridDims dims, const geometry::WindowSpec& spec, int fault) {
  const Extent3 w = spec.window;
  const std::int64_t nd = dims.d / w[0], nh = dims.h / w[1], nw = dims.w / w[2];
  const std::int64_t tokens = w[0] * w[1] * w[2];
  geometry::AttentionMask mask;
  mask.num_windows = nd * nh * nw;
  mask.tokens = tokens;
  mask.values.assign(static_cast<std::size_t>(mask.num_windows * tokens * tokens), 0.0f);
  // Shifted-frame position p on an axis of extent n came from (p + s) mod n;
  // it wrapped iff p + s >= n.
  auto wrapped = [&](std::int64_t p, int axis) {
    const std::int64_t s = spec.shift[axis];
    return s != 0 && p + s >= dims[axis] - fault;
  };
  std::int64_t win = 0;
  for (std::int64_t a = 0; a < nd; ++a)
    for (std::int64_t b = 0; b < nh; ++b)
      for (std::int64_t c = 0; c < nw; ++c, ++win) {
        std::vector<std::array<bool, 3>> flags;
        for (std::int64_t i = 0; i < w[0]; ++i)
          for (std::int64_t j = 0; j < w[1]; ++j)
            for (std::int64_t k = 0; k < w[2]; ++k)
              flags.push_back({wrapped(a * w[0] + i, 0), wrapped(b * w[1] + j, 1), wrapped(c * w[2] + k, 2)});
        for (std::int64_t p = 0; p < tokens; ++p)
          for (std::int64_t q = 0; q < tokens; ++q)
            if (flags[static_cast<std::size_t>(p)] != flags[static_cast<std::size_t>(q)]) {
              mask.values[static_cast<std::size_t>((win * tokens + p) * tokens + q)] =
                  static_cast<float>(geometry::kMaskedLogit);
            }
      }
  return mask;
}

Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& weight, const Tensor<double>& bias,
                      std::int64_t kernel) {
  const std::int64_t D = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  const std::int64_t cout = weight.dim(1);
  const std::int64_t r = kernel / 2;
  Tensor<double> y(Shape{D, H, W, cout});
  for (std::int64_t i = 0; i < D; ++i)
    for (std::int64_t j = 0; j < H; ++j)
      for (std::int64_t k = 0; k < W; ++k)
        for (std::int64_t o = 0; o < cout; ++o) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::int64_t a = 0; a < kernel; ++a)
            for (std::int64_t b = 0; b < kernel; ++b)
              for (std::int64_t c = 0; c < kernel; ++c) {
                const std::int64_t si = i + a - r, sj = j + b - r, sk = k + c - r;
                if (si < 0 || sj < 0 || sk < 0 || si >= D || sj >= H || sk >= W) continue;
                for (std::int64_t ch = 0; ch < cin; ++ch) {
                  const std::int64_t row = ((a * kernel + b) * kernel + c) * cin + ch;
                  acc += x[((si * H + sj) * W + sk) * cin + ch] * weight[row * cout + o];
                }
              }
          y[((i * H + j) * W + k) * cout + o] = acc;
        }
  return y;
}

Tensor<double> conv_transpose2(const Tensor<double>& x, const Tensor<double>& weight, const Tensor<double>& bias) {
  const std::int64_t D = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  const std::int64_t cout = weight.dim(1) / 8;
  Tensor<double> y(Shape{2 * D, 2 * H, 2 * W, cout});
  for (std::int64_t v = 0; v < y.size() / cout; ++v)
    for (std::int64_t o = 0; o < cout; ++o) y[v * cout + o] = bias.empty() ? 0.0 : bias[o];
  for (std::int64_t i = 0; i < D; ++i)
    for (std::int64_t j = 0; j < H; ++j)
      for (std::int64_t k = 0; k < W; ++k)
        for (std::int64_t a = 0; a < 2; ++a)
          for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t c = 0; c < 2; ++c)
              for (std::int64_t o = 0; o < cout; ++o) {
                double acc = 0.0;
                for (std::int64_t ch = 0; ch < cin; ++ch)
                  acc += x[((i * H + j) * W + k) * cin + ch] * weight[ch * 8 * cout + ((a * 2 + b) * 2 + c) * cout + o];
                y[(((2 * i + a) * 2 * H + (2 * j + b)) * 2 * W + (2 * k + c)) * cout + o] += acc;
              }
  return y;
}

Tensor<double> conv_transpose2_zero_stuffed(const Tensor<double>& x, const Tensor<double>& weight,
                                            const Tensor<double>& bias) {
  const std::int64_t D = x.dim(0), H = x.dim(1), W = x.dim(2), cin = x.dim(3);
  const std::int64_t cout = weight.dim(1) / 8;
  const std::int64_t D2 = 2 * D, H2 = 2 * H, W2 = 2 * W;
  // u holds x at even coordinates and zeros elsewhere.
  Tensor<double> u(Shape{D2, H2, W2, cin});
  for (std::int64_t i = 0; i < D; ++i)
    for (std::int64_t j = 0; j < H; ++j)
      for (std::int64_t k = 0; k < W; ++k)
        for (std::int64_t ch = 0; ch < cin; ++ch) u[(((2 * i) * H2 + 2 * j) * W2 + 2 * k) * cin + ch] = x[((i * H + j) * W + k) * cin + ch];
  Tensor<double> y(Shape{D2, H2, W2, cout});
  for (std::int64_t i = 0; i < D2; ++i)
    for (std::int64_t j = 0; j < H2; ++j)
      for (std::int64_t k = 0; k < W2; ++k)
        for (std::int64_t o = 0; o < cout; ++o) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::int64_t a = 0; a < 2; ++a)
            for (std::int64_t b = 0; b < 2; ++b)
              for (std::int64_t c = 0; c < 2; ++c) {
                const std::int64_t si = i - a, sj = j - b, sk = k - c;
                if (si < 0 || sj < 0 || sk < 0) continue;
                for (std::int64_t ch = 0; ch < cin; ++ch)
                  acc += u[((si * H2 + sj) * W2 + sk) * cin + ch] * weight[ch * 8 * cout + ((a * 2 + b) * 2 + c) * cout + o];
              }
          y[((i * H2 + j) * W2 + k) * cout + o] = acc;
        }
  return y;
}

Tensor<double> patch_merge(const Tensor<double>& x, const Tensor<double>& weight) {
  const std::int64_t D = x.dim(0) / 2, H = x.dim(1) / 2, W = x.dim(2) / 2, C = x.dim(3);
  const std::int64_t out_c = weight.dim(1);
  Tensor<double> y(Shape{D, H, W, out_c});
  std::vector<double> concat(static_cast<std::size_t>(8 * C));
  for (std::int64_t i = 0; i < D; ++i)
    for (std::int64_t j = 0; j < H; ++j)
      for (std::int64_t k = 0; k < W; ++k) {
        std::size_t n = 0;
        for (std::int64_t a = 0; a < 2; ++a)
          for (std::int64_t b = 0; b < 2; ++b)
            for (std::int64_t c = 0; c < 2; ++c)
              for (std::int64_t ch = 0; ch < C; ++ch)
                concat[n++] = x[(((2 * i + a) * x.dim(1) + (2 * j + b)) * x.dim(2) + (2 * k + c)) * C + ch];
        for (std::int64_t o = 0; o < out_c; ++o) {
          double acc = 0.0;
          for (std::int64_t r = 0; r < 8 * C; ++r) acc += concat[static_cast<std::size_t>(r)] * weight[r * out_c + o];
          y[((i * H + j) * W + k) * out_c + o] = acc;
        }
      }
  return y;
}

Tensor<double> attention(const Tensor<double>& qkv, const Tensor<double>& bias_table, Extent3 window,
                         const std::vector<double>& mask, std::int64_t heads, Tensor<double>* probs) {
  const std::int64_t n = qkv.dim(0), C = qkv.dim(1) / 3, dh = C / heads;
  Tensor<double> out(Shape{n, C});
  if (probs) *probs = Tensor<double>(Shape{heads, n, n});
  std::vector<Extent3> pos;
  for (std::int64_t a = 0; a < window[0]; ++a)
    for (std::int64_t b = 0; b < window[1]; ++b)
      for (std::int64_t c = 0; c < window[2]; ++c) pos.push_back({a, b, c});
  const std::int64_t span_h = 2 * window[1] - 1, span_w = 2 * window[2] - 1;
  for (std::int64_t h = 0; h < heads; ++h) {
    for (std::int64_t p = 0; p < n; ++p) {
      std::vector<double> logits(static_cast<std::size_t>(n));
      for (std::int64_t q = 0; q < n; ++q) {
        double dot = 0.0;
        for (std::int64_t e = 0; e < dh; ++e) dot += qkv[p * 3 * C + h * dh + e] * qkv[q * 3 * C + C + h * dh + e];
        double z = dot / std::sqrt(static_cast<double>(dh));
        if (!bias_table.empty()) {
          const auto& u = pos[static_cast<std::size_t>(p)];
          const auto& v = pos[static_cast<std::size_t>(q)];
          const std::int64_t entry = ((u[0] - v[0] + window[0] - 1) * span_h + (u[1] - v[1] + window[1] - 1)) * span_w +
                                     (u[2] - v[2] + window[2] - 1);
          z += bias_table[entry * heads + h];
        }
        if (!mask.empty()) z += mask[static_cast<std::size_t>(p * n + q)];
        logits[static_cast<std::size_t>(q)] = z;
      }
      const double top = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (auto& z : logits) total += (z = std::exp(z - top));
      for (std::int64_t q = 0; q < n; ++q) {
        const double w = logits[static_cast<std::size_t>(q)] / total;
        if (probs) (*probs)[(h * n + p) * n + q] = w;
        for (std::int64_t e = 0; e < dh; ++e) out[p * C + h * dh + e] += w * qkv[q * 3 * C + 2 * C + h * dh + e];
      }
    }
  }
  return out;
}

double dice(const LabelVolume& pred, const LabelVolume& gt, std::uint8_t k) {
  double a = 0, b = 0, both = 0;
  for (std::size_t v = 0; v < pred.voxels.size(); ++v) {
    a += pred.voxels[v] == k;
    b += gt.voxels[v] == k;
    both += pred.voxels[v] == k && gt.voxels[v] == k;
  }
  return a + b == 0 ? 1.0 : 2.0 * both / (a + b);
}

std::vector<Extent3> surface(const metrics::Mask& mask) {
  const GridDims g = mask.dims;
  std::vector<Extent3> out;
  const std::int64_t offsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (std::int64_t i = 0; i < g.d; ++i)
    for (std::int64_t j = 0; j < g.h; ++j)
      for (std::int64_t k = 0; k < g.w; ++k) {
        if (mask.at(i, j, k) == 0) continue;
        int solid = 0;
        for (const auto& o : offsets) {
          const std::int64_t a = i + o[0], b = j + o[1], c = k + o[2];
          if (a >= 0 && b >= 0 && c >= 0 && a < g.d && b < g.h && c < g.w && mask.at(a, b, c) != 0) ++solid;
        }
        if (solid < 6) out.push_back({i, j, k});
      }
  return out;
}

std::vector<double> pooled_distances(const metrics::Mask& pred, const metrics::Mask& gt, Spacing spacing) {
  const auto sp = surface(pred);
  const auto sg = surface(gt);
  std::vector<double> out;
  if (sp.empty() || sg.empty()) return out;
  auto nearest = [&](const Extent3& p, const std::vector<Extent3>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) {
      const double a = static_cast<double>(p[0] - q[0]) * spacing.d;
      const double b = static_cast<double>(p[1] - q[1]) * spacing.h;
      const double c = static_cast<double>(p[2] - q[2]) * spacing.w;
      best = std::min(best, std::sqrt(a * a + b * b + c * c));
    }
    return best;
  };
  for (const auto& p : sp) out.push_back(nearest(p, sg));
  for (const auto& q : sg) out.push_back(nearest(q, sp));
  return out;
}

std::optional<double> asd(const metrics::Mask& pred, const metrics::Mask& gt, Spacing spacing) {
  const auto d = pooled_distances(pred, gt, spacing);
  if (d.empty()) return std::nullopt;
  const auto n_pred = static_cast<std::ptrdiff_t>(surface(pred).size());
  const double to_gt = std::accumulate(d.begin(), d.begin() + n_pred, 0.0);
  const double to_pred = std::accumulate(d.begin() + n_pred, d.end(), 0.0);
  return (to_gt + to_pred) / static_cast<double>(d.size());
}

std::optional<double> hd95(const metrics::Mask& pred, const metrics::Mask& gt, Spacing spacing) {
  auto d = pooled_distances(pred, gt, spacing);
  if (d.empty()) return std::nullopt;
  std::sort(d.begin(), d.end());
  // Rank position (n - 1) * 0.95 split into integer and hundredths.
  const std::size_t hundredths = (d.size() - 1) * 95;
  const std::size_t lo = hundredths / 100;
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + static_cast<double>(hundredths % 100) / 100.0 * (d[hi] - d[lo]);
}

GradCheckResult check_gradients(ag::ParameterSet<double>& params,
                                const std::function<ag::Var<double>(ag::Tape<double>*)>& loss, int samples,
                                std::uint64_t seed, double step, double floor) {
  params.zero_grad();
  {
    ag::Tape<double> tape;
    auto l = loss(&tape);
    tape.backward(l);
  }
  const auto& items = params.items();
  auto evaluate = [&]() { return loss(nullptr)->value[0]; };
  auto rel = [floor](double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); };

  GradCheckResult result;
  Rng rng(derive_seed(seed, "gradcheck"));
  int attempts = 0;
  while (result.sampled < samples && attempts < 4 * samples) {
    ++attempts;
    const auto& [name, var] = items[rng.below(items.size())];
    const std::int64_t idx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(var->value.size())));
    const double analytic = var->grad.empty() ? 0.0 : var->grad[idx];
    const double original = var->value[idx];
    auto central = [&](double h) {
      var->value[idx] = original + h;
      const double up = evaluate();
      var->value[idx] = original - h;
      const double down = evaluate();
      var->value[idx] = original;
      return (up - down) / (2.0 * h);
    };
    const double fd = central(step);
    const double fd_half = central(step / 2);
    // Disagreement between step sizes means a kink lies inside the stencil.
    if (rel(fd, fd_half) > 1e-5) {
      ++result.replaced;
      continue;
    }
    ++result.sampled;
    const double err = rel(analytic, fd);
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst = name + "[" + std::to_string(idx) + "] analytic " + std::to_string(analytic) + " numeric " +
                     std::to_string(fd);
    }
  }
  return result;
}

}  // namespace cats::oracles
