#include "cats/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <string>

namespace cats::ag {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
Var<T> make_output(Tensor<T> value, bool requires_grad) {
  auto out = constant(std::move(value));
  out->requires_grad = requires_grad;
  return out;
}

template <typename T>
bool any_tracked(const Tape<T>* tape, std::initializer_list<const Var<T>*> vars) {
  for (const auto* v : vars)
    if (tracked(tape, *v)) return true;
  return false;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw PreconditionError(message);
}

std::int64_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require_spatial(const Shape& s, const char* op) {
  require(s.size() == 4, std::string(op) + ": expected a (D,H,W,C) tensor, got " + to_string(s));
}

}  // namespace

template <typename T>
Var<T> gather(Tape<T>* tape, const Var<T>& x, std::int64_t row_size, const geometry::RowMap& map, Shape out_shape) {
  require(row_size > 0 && x->value.size() % row_size == 0, "gather: row size does not divide input");
  require(element_count(out_shape) == static_cast<std::int64_t>(map.size()) * row_size,
          "gather: output shape " + to_string(out_shape) + " does not match map");
  const std::int64_t in_rows = x->value.size() / row_size;
  for (auto r : map) require(r < in_rows, "gather: map index out of range");
  Tensor<T> y(std::move(out_shape), geometry::gather_rows<T>(x->value.values(), row_size, map));
  auto out = make_output(std::move(y), tracked(tape, x));
  if (out->requires_grad) {
    tape->record([x, out, row_size, map] {
      if (out->grad.empty()) return;
      auto& gx = x->grad_buffer();
      const T* go = out->grad.data();
      for (std::size_t r = 0; r < map.size(); ++r) {
        if (map[r] < 0) continue;
        T* dst = gx.data() + map[r] * row_size;
        const T* src = go + static_cast<std::int64_t>(r) * row_size;
        for (std::int64_t c = 0; c < row_size; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> linear(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& ws = weight->value.shape();
  require(ws.size() == 2, "linear: weight must be 2-D");
  const std::int64_t cin = ws[0];
  const std::int64_t cout = ws[1];
  require(last_dim(x->value.shape()) == cin, "linear: input channels " + std::to_string(last_dim(x->value.shape())) +
                                                 " do not match weight rows " + std::to_string(cin));
  if (bias) require(bias->value.size() == cout, "linear: bias size mismatch");
  const std::int64_t rows = x->value.size() / cin;
  Shape out_shape = x->value.shape();
  if (out_shape.empty()) out_shape = {1};
  out_shape.back() = cout;
  Tensor<T> y(out_shape);
  MatMap<T> Y(y.data(), rows, cout);
  Y.noalias() = CMatMap<T>(x->value.data(), rows, cin) * CMatMap<T>(weight->value.data(), cin, cout);
  if (bias) Y.rowwise() += Eigen::Map<const RowVec<T>>(bias->value.data(), cout);
  auto out = make_output(std::move(y), any_tracked(tape, {&x, &weight, &bias}));
  if (out->requires_grad) {
    tape->record([x, weight, bias, out, rows, cin, cout, tape] {
      if (out->grad.empty()) return;
      CMatMap<T> dY(out->grad.data(), rows, cout);
      if (tracked(tape, x)) {
        MatMap<T>(x->grad_buffer().data(), rows, cin).noalias() +=
            dY * CMatMap<T>(weight->value.data(), cin, cout).transpose();
      }
      if (tracked(tape, weight)) {
        MatMap<T>(weight->grad_buffer().data(), cin, cout).noalias() +=
            CMatMap<T>(x->value.data(), rows, cin).transpose() * dY;
      }
      if (tracked(tape, bias)) {
        Eigen::Map<RowVec<T>>(bias->grad_buffer().data(), cout) += dY.colwise().sum();
      }
    });
  }
  return out;
}

template <typename T>
Var<T> add(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  require(a->value.shape() == b->value.shape(),
          "add: shape mismatch " + to_string(a->value.shape()) + " vs " + to_string(b->value.shape()));
  Tensor<T> y = a->value;
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] += b->value[i];
  auto out = make_output(std::move(y), any_tracked(tape, {&a, &b}));
  if (out->requires_grad) {
    tape->record([a, b, out, tape] {
      if (out->grad.empty()) return;
      for (const auto* v : {&a, &b}) {
        if (!tracked(tape, *v)) continue;
        auto& g = (*v)->grad_buffer();
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> scale(Tape<T>* tape, const Var<T>& x, T factor) {
  Tensor<T> y = x->value;
  for (auto& v : y.values()) v *= factor;
  auto out = make_output(std::move(y), tracked(tape, x));
  if (out->requires_grad) {
    tape->record([x, out, factor] {
      if (out->grad.empty()) return;
      auto& g = x->grad_buffer();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += factor * out->grad[i];
    });
  }
  return out;
}

template <typename T>
Var<T> concat_channels(Tape<T>* tape, const Var<T>& a, const Var<T>& b) {
  Shape sa = a->value.shape();
  Shape sb = b->value.shape();
  require(!sa.empty() && sa.size() == sb.size() && std::equal(sa.begin(), sa.end() - 1, sb.begin()),
          "concat_channels: leading shapes differ " + to_string(sa) + " vs " + to_string(sb));
  const std::int64_t ca = sa.back();
  const std::int64_t cb = sb.back();
  const std::int64_t rows = a->value.size() / ca;
  Shape so = sa;
  so.back() = ca + cb;
  Tensor<T> y(so);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(y.data() + r * (ca + cb), a->value.data() + r * ca, sizeof(T) * ca);
    std::memcpy(y.data() + r * (ca + cb) + ca, b->value.data() + r * cb, sizeof(T) * cb);
  }
  auto out = make_output(std::move(y), any_tracked(tape, {&a, &b}));
  if (out->requires_grad) {
    tape->record([a, b, out, rows, ca, cb, tape] {
      if (out->grad.empty()) return;
      const T* go = out->grad.data();
      if (tracked(tape, a)) {
        T* ga = a->grad_buffer().data();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < ca; ++c) ga[r * ca + c] += go[r * (ca + cb) + c];
      }
      if (tracked(tape, b)) {
        T* gb = b->grad_buffer().data();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < cb; ++c) gb[r * cb + c] += go[r * (ca + cb) + ca + c];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> layer_norm(Tape<T>* tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  const std::int64_t c = last_dim(x->value.shape());
  require(gamma->value.size() == c && beta->value.size() == c, "layer_norm: affine size mismatch");
  const std::int64_t rows = x->value.size() / c;
  Tensor<T> y(x->value.shape());
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x->value.size()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const T eps = static_cast<T>(kNormEpsilon);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x->value.data() + r * c;
    T mean = 0;
    for (std::int64_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::int64_t i = 0; i < c; ++i) {
      const T h = (xr[i] - mean) * is;
      (*xhat)[r * c + i] = h;
      y[r * c + i] = h * gamma->value[i] + beta->value[i];
    }
  }
  auto out = make_output(std::move(y), any_tracked(tape, {&x, &gamma, &beta}));
  if (out->requires_grad) {
    tape->record([x, gamma, beta, out, xhat, inv_std, rows, c, tape] {
      if (out->grad.empty()) return;
      const T* go = out->grad.data();
      const bool gx = tracked(tape, x);
      T* dx = gx ? x->grad_buffer().data() : nullptr;
      T* dg = tracked(tape, gamma) ? gamma->grad_buffer().data() : nullptr;
      T* db = tracked(tape, beta) ? beta->grad_buffer().data() : nullptr;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* h = xhat->data() + r * c;
        const T* g = go + r * c;
        if (dg)
          for (std::int64_t i = 0; i < c; ++i) dg[i] += g[i] * h[i];
        if (db)
          for (std::int64_t i = 0; i < c; ++i) db[i] += g[i];
        if (!gx) continue;
        T mean_dh = 0, mean_dh_h = 0;
        for (std::int64_t i = 0; i < c; ++i) {
          const T dh = g[i] * gamma->value[i];
          mean_dh += dh;
          mean_dh_h += dh * h[i];
        }
        mean_dh /= static_cast<T>(c);
        mean_dh_h /= static_cast<T>(c);
        for (std::int64_t i = 0; i < c; ++i) {
          const T dh = g[i] * gamma->value[i];
          dx[r * c + i] += (*inv_std)[r] * (dh - mean_dh - h[i] * mean_dh_h);
        }
      }
    });
  }
  return out;
}

template <typename T>
Var<T> instance_norm(Tape<T>* tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  require_spatial(x->value.shape(), "instance_norm");
  const std::int64_t c = x->value.dim(-1);
  require(gamma->value.size() == c && beta->value.size() == c, "instance_norm: affine size mismatch");
  const std::int64_t n = x->value.size() / c;
  const T eps = static_cast<T>(kNormEpsilon);
  std::vector<T> mean(static_cast<std::size_t>(c), T{0});
  std::vector<T> var(static_cast<std::size_t>(c), T{0});
  const T* xv = x->value.data();
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t i = 0; i < c; ++i) mean[i] += xv[r * c + i];
  for (auto& m : mean) m /= static_cast<T>(n);
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t i = 0; i < c; ++i) {
      const T d = xv[r * c + i] - mean[i];
      var[i] += d * d;
    }
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < c; ++i) (*inv_std)[i] = T{1} / std::sqrt(var[i] / static_cast<T>(n) + eps);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x->value.size()));
  Tensor<T> y(x->value.shape());
  for (std::int64_t r = 0; r < n; ++r)
    for (std::int64_t i = 0; i < c; ++i) {
      const T h = (xv[r * c + i] - mean[i]) * (*inv_std)[i];
      (*xhat)[r * c + i] = h;
      y[r * c + i] = h * gamma->value[i] + beta->value[i];
    }
  auto out = make_output(std::move(y), any_tracked(tape, {&x, &gamma, &beta}));
  if (out->requires_grad) {
    tape->record([x, gamma, beta, out, xhat, inv_std, n, c, tape] {
      if (out->grad.empty()) return;
      const T* go = out->grad.data();
      const T* h = xhat->data();
      std::vector<T> sum_g(static_cast<std::size_t>(c), T{0});
      std::vector<T> sum_gh(static_cast<std::size_t>(c), T{0});
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t i = 0; i < c; ++i) {
          sum_g[i] += go[r * c + i];
          sum_gh[i] += go[r * c + i] * h[r * c + i];
        }
      if (tracked(tape, gamma)) {
        T* dg = gamma->grad_buffer().data();
        for (std::int64_t i = 0; i < c; ++i) dg[i] += sum_gh[i];
      }
      if (tracked(tape, beta)) {
        T* db = beta->grad_buffer().data();
        for (std::int64_t i = 0; i < c; ++i) db[i] += sum_g[i];
      }
      if (tracked(tape, x)) {
        T* dx = x->grad_buffer().data();
        for (std::int64_t r = 0; r < n; ++r)
          for (std::int64_t i = 0; i < c; ++i) {
            const T gi = gamma->value[i];
            const T mean_dh = gi * sum_g[i] / static_cast<T>(n);
            const T mean_dh_h = gi * sum_gh[i] / static_cast<T>(n);
            dx[r * c + i] += (*inv_std)[i] * (gi * go[r * c + i] - mean_dh - h[r * c + i] * mean_dh_h);
          }
      }
    });
  }
  return out;
}

template <typename T>
Var<T> gelu(Tape<T>* tape, const Var<T>& x) {
  Tensor<T> y(x->value.shape());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (std::int64_t i = 0; i < y.size(); ++i) {
    const T v = x->value[i];
    y[i] = T{0.5} * v * (T{1} + std::erf(v * inv_sqrt2));
  }
  auto out = make_output(std::move(y), tracked(tape, x));
  if (out->requires_grad) {
    tape->record([x, out, inv_sqrt2] {
      if (out->grad.empty()) return;
      auto& g = x->grad_buffer();
      const T inv_sqrt_2pi = static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
      for (std::int64_t i = 0; i < g.size(); ++i) {
        const T v = x->value[i];
        const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v * v);
        g[i] += out->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Var<T> leaky_relu(Tape<T>* tape, const Var<T>& x, T slope) {
  Tensor<T> y(x->value.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) {
    const T v = x->value[i];
    y[i] = v > T{0} ? v : slope * v;
  }
  auto out = make_output(std::move(y), tracked(tape, x));
  if (out->requires_grad) {
    tape->record([x, out, slope] {
      if (out->grad.empty()) return;
      auto& g = x->grad_buffer();
      for (std::int64_t i = 0; i < g.size(); ++i) g[i] += out->grad[i] * (x->value[i] > T{0} ? T{1} : slope);
    });
  }
  return out;
}

namespace {

// Rows of the im2col matrix for planes [d0, d1) of a same-padded convolution.
template <typename T>
void im2col(const T* x, const Shape& s, std::int64_t kernel, std::int64_t d0, std::int64_t d1, T* col) {
  const std::int64_t D = s[0], H = s[1], W = s[2], C = s[3];
  const std::int64_t pad = kernel / 2;
  T* dst = col;
  for (std::int64_t d = d0; d < d1; ++d)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t a = 0; a < kernel; ++a) {
          const std::int64_t id = d + a - pad;
          for (std::int64_t b = 0; b < kernel; ++b) {
            const std::int64_t ih = h + b - pad;
            const bool row_ok = id >= 0 && id < D && ih >= 0 && ih < H;
            for (std::int64_t c = 0; c < kernel; ++c, dst += C) {
              const std::int64_t iw = w + c - pad;
              if (row_ok && iw >= 0 && iw < W) {
                std::memcpy(dst, x + ((id * H + ih) * W + iw) * C, sizeof(T) * C);
              } else {
                std::memset(dst, 0, sizeof(T) * C);
              }
            }
          }
        }
}

template <typename T>
void col2im_add(const T* col, const Shape& s, std::int64_t kernel, std::int64_t d0, std::int64_t d1, T* x) {
  const std::int64_t D = s[0], H = s[1], W = s[2], C = s[3];
  const std::int64_t pad = kernel / 2;
  const T* src = col;
  for (std::int64_t d = d0; d < d1; ++d)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        for (std::int64_t a = 0; a < kernel; ++a) {
          const std::int64_t id = d + a - pad;
          for (std::int64_t b = 0; b < kernel; ++b) {
            const std::int64_t ih = h + b - pad;
            const bool row_ok = id >= 0 && id < D && ih >= 0 && ih < H;
            for (std::int64_t c = 0; c < kernel; ++c, src += C) {
              const std::int64_t iw = w + c - pad;
              if (!(row_ok && iw >= 0 && iw < W)) continue;
              T* dst = x + ((id * H + ih) * W + iw) * C;
              for (std::int64_t ch = 0; ch < C; ++ch) dst[ch] += src[ch];
            }
          }
        }
}

// Planes per im2col chunk: keeps the column buffer near 2k rows.
std::int64_t planes_per_chunk(const Shape& s) { return std::max<std::int64_t>(1, 2048 / (s[1] * s[2])); }

}  // namespace

template <typename T>
Var<T> conv3d(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::int64_t kernel) {
  const Shape& s = x->value.shape();
  require_spatial(s, "conv3d");
  require(kernel > 0 && kernel % 2 == 1, "conv3d: kernel must be odd");
  const std::int64_t cin = s[3];
  const std::int64_t k3c = kernel * kernel * kernel * cin;
  const auto& ws = weight->value.shape();
  require(ws.size() == 2 && ws[0] == k3c,
          "conv3d: weight " + to_string(ws) + " does not match kernel " + std::to_string(kernel) + " x " +
              std::to_string(cin) + " input channels");
  const std::int64_t cout = ws[1];
  if (bias) require(bias->value.size() == cout, "conv3d: bias size mismatch");
  const std::int64_t plane = s[1] * s[2];
  const std::int64_t chunk = planes_per_chunk(s);
  Tensor<T> y(Shape{s[0], s[1], s[2], cout});
  std::vector<T> col(static_cast<std::size_t>(chunk * plane * k3c));
  CMatMap<T> Wm(weight->value.data(), k3c, cout);
  for (std::int64_t d0 = 0; d0 < s[0]; d0 += chunk) {
    const std::int64_t d1 = std::min(s[0], d0 + chunk);
    const std::int64_t rows = (d1 - d0) * plane;
    im2col(x->value.data(), s, kernel, d0, d1, col.data());
    MatMap<T> Y(y.data() + d0 * plane * cout, rows, cout);
    Y.noalias() = CMatMap<T>(col.data(), rows, k3c) * Wm;
    if (bias) Y.rowwise() += Eigen::Map<const RowVec<T>>(bias->value.data(), cout);
  }
  auto out = make_output(std::move(y), any_tracked(tape, {&x, &weight, &bias}));
  if (out->requires_grad) {
    tape->record([x, weight, bias, out, kernel, k3c, cout, plane, chunk, tape] {
      if (out->grad.empty()) return;
      const Shape& s = x->value.shape();
      const bool gx = tracked(tape, x), gw = tracked(tape, weight), gb = tracked(tape, bias);
      std::vector<T> col(static_cast<std::size_t>(chunk * plane * k3c));
      CMatMap<T> Wm(weight->value.data(), k3c, cout);
      for (std::int64_t d0 = 0; d0 < s[0]; d0 += chunk) {
        const std::int64_t d1 = std::min(s[0], d0 + chunk);
        const std::int64_t rows = (d1 - d0) * plane;
        CMatMap<T> dY(out->grad.data() + d0 * plane * cout, rows, cout);
        if (gb) Eigen::Map<RowVec<T>>(bias->grad_buffer().data(), cout) += dY.colwise().sum();
        if (gw) {
          im2col(x->value.data(), s, kernel, d0, d1, col.data());
          MatMap<T>(weight->grad_buffer().data(), k3c, cout).noalias() +=
              CMatMap<T>(col.data(), rows, k3c).transpose() * dY;
        }
        if (gx) {
          MatMap<T>(col.data(), rows, k3c).noalias() = dY * Wm.transpose();
          col2im_add(col.data(), s, kernel, d0, d1, x->grad_buffer().data());
        }
      }
    });
  }
  return out;
}

template <typename T>
Var<T> conv_transpose2(Tape<T>* tape, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& s = x->value.shape();
  require_spatial(s, "conv_transpose2");
  const std::int64_t cin = s[3];
  const auto& ws = weight->value.shape();
  require(ws.size() == 2 && ws[0] == cin && ws[1] % 8 == 0,
          "conv_transpose2: weight " + to_string(ws) + " does not match " + std::to_string(cin) + " input channels");
  const std::int64_t cout = ws[1] / 8;
  if (bias) require(bias->value.size() == cout, "conv_transpose2: bias size mismatch");
  const std::int64_t n = s[0] * s[1] * s[2];
  Mat<T> blocks = CMatMap<T>(x->value.data(), n, cin) * CMatMap<T>(weight->value.data(), cin, 8 * cout);
  const Shape so{2 * s[0], 2 * s[1], 2 * s[2], cout};
  Tensor<T> y(so);
  // Output voxel (2i+a, 2j+b, 2k+c) receives block column group (a, b, c).
  auto out_offset = [so, cout](std::int64_t i, std::int64_t j, std::int64_t k, int g) {
    const std::int64_t a = g >> 2, b = (g >> 1) & 1, c = g & 1;
    return (((2 * i + a) * so[1] + (2 * j + b)) * so[2] + (2 * k + c)) * cout;
  };
  for (std::int64_t i = 0, r = 0; i < s[0]; ++i)
    for (std::int64_t j = 0; j < s[1]; ++j)
      for (std::int64_t k = 0; k < s[2]; ++k, ++r)
        for (int g = 0; g < 8; ++g) {
          T* dst = y.data() + out_offset(i, j, k, g);
          const T* src = blocks.data() + r * 8 * cout + g * cout;
          for (std::int64_t ch = 0; ch < cout; ++ch) dst[ch] = src[ch] + (bias ? bias->value[ch] : T{0});
        }
  auto out = make_output(std::move(y), any_tracked(tape, {&x, &weight, &bias}));
  if (out->requires_grad) {
    tape->record([x, weight, bias, out, n, cin, cout, out_offset, tape] {
      if (out->grad.empty()) return;
      const Shape& s = x->value.shape();
      Mat<T> dblocks(n, 8 * cout);
      for (std::int64_t i = 0, r = 0; i < s[0]; ++i)
        for (std::int64_t j = 0; j < s[1]; ++j)
          for (std::int64_t k = 0; k < s[2]; ++k, ++r)
            for (int g = 0; g < 8; ++g)
              std::memcpy(dblocks.data() + r * 8 * cout + g * cout, out->grad.data() + out_offset(i, j, k, g),
                          sizeof(T) * cout);
      if (tracked(tape, x)) {
        MatMap<T>(x->grad_buffer().data(), n, cin).noalias() +=
            dblocks * CMatMap<T>(weight->value.data(), cin, 8 * cout).transpose();
      }
      if (tracked(tape, weight)) {
        MatMap<T>(weight->grad_buffer().data(), cin, 8 * cout).noalias() +=
            CMatMap<T>(x->value.data(), n, cin).transpose() * dblocks;
      }
      if (tracked(tape, bias)) {
        T* db = bias->grad_buffer().data();
        const std::int64_t voxels = out->grad.size() / cout;
        for (std::int64_t v = 0; v < voxels; ++v)
          for (std::int64_t ch = 0; ch < cout; ++ch) db[ch] += out->grad[v * cout + ch];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> max_pool2(Tape<T>* tape, const Var<T>& x) {
  const Shape& s = x->value.shape();
  require_spatial(s, "max_pool2");
  for (int a = 0; a < 3; ++a) {
    require(s[a] % 2 == 0, "max_pool2: odd extent " + std::to_string(s[a]) + " on axis " + "dhw"[a] +
                               "; pad the input to a multiple of 2^(levels-1)");
  }
  const std::int64_t C = s[3];
  const Shape so{s[0] / 2, s[1] / 2, s[2] / 2, C};
  Tensor<T> y(so);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(y.size()));
  const T* xv = x->value.data();
  for (std::int64_t i = 0; i < so[0]; ++i)
    for (std::int64_t j = 0; j < so[1]; ++j)
      for (std::int64_t k = 0; k < so[2]; ++k)
        for (std::int64_t c = 0; c < C; ++c) {
          std::int64_t best = -1;
          T best_v = -std::numeric_limits<T>::infinity();
          for (int g = 0; g < 8; ++g) {
            const std::int64_t off = (((2 * i + (g >> 2)) * s[1] + 2 * j + ((g >> 1) & 1)) * s[2] + 2 * k + (g & 1)) * C + c;
            if (best < 0 || xv[off] > best_v) {
              best = off;
              best_v = xv[off];
            }
          }
          const std::int64_t o = ((i * so[1] + j) * so[2] + k) * C + c;
          y[o] = best_v;
          (*argmax)[o] = best;
        }
  auto out = make_output(std::move(y), tracked(tape, x));
  if (out->requires_grad) {
    tape->record([x, out, argmax] {
      if (out->grad.empty()) return;
      auto& g = x->grad_buffer();
      for (std::size_t o = 0; o < argmax->size(); ++o) g[(*argmax)[o]] += out->grad[static_cast<std::int64_t>(o)];
    });
  }
  return out;
}

template <typename T>
Var<T> window_attention_core(Tape<T>* tape, const Var<T>& qkv, const Var<T>& bias_table,
                             std::span<const std::int64_t> rel_index, const geometry::AttentionMask* mask,
                             std::int64_t heads, Tensor<T>* probs_out) {
  const Shape& s = qkv->value.shape();
  require(s.size() == 3 && s[2] % 3 == 0, "window_attention: qkv must be (windows, tokens, 3C), got " + to_string(s));
  const std::int64_t nw = s[0], tk = s[1], c = s[2] / 3;
  require(heads > 0 && c % heads == 0,
          "window_attention: " + std::to_string(c) + " channels are not divisible by " + std::to_string(heads) + " heads");
  const std::int64_t dh = c / heads;
  if (mask) {
    require(mask->num_windows == nw && mask->tokens == tk, "window_attention: mask window count " +
                                                               std::to_string(mask->num_windows) + " does not match batch " +
                                                               std::to_string(nw));
  }
  if (bias_table) {
    require(static_cast<std::int64_t>(rel_index.size()) == tk * tk, "window_attention: relative index size mismatch");
    require(bias_table->value.rank() == 2 && bias_table->value.dim(1) == heads,
            "window_attention: bias table must be (entries, heads)");
  }
  const T scale_qk = T{1} / std::sqrt(static_cast<T>(dh));
  const std::int64_t ld = 3 * c;

  // Relative bias expanded per head, shared by all windows.
  std::vector<Mat<T>> bias(static_cast<std::size_t>(heads), Mat<T>::Zero(tk, tk));
  if (bias_table) {
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t p = 0; p < tk * tk; ++p) bias[h].data()[p] = bias_table->value[rel_index[p] * heads + h];
  }

  auto probs = std::make_shared<Tensor<T>>(Shape{nw, heads, tk, tk});
  Tensor<T> y(Shape{nw, tk, c});
  Mat<T> scores(tk, tk);
  for (std::int64_t w = 0; w < nw; ++w) {
    const T* base = qkv->value.data() + w * tk * ld;
    for (std::int64_t h = 0; h < heads; ++h) {
      CStridedMap<T> Q(base + h * dh, tk, dh, Eigen::OuterStride<>(ld));
      CStridedMap<T> K(base + c + h * dh, tk, dh, Eigen::OuterStride<>(ld));
      CStridedMap<T> V(base + 2 * c + h * dh, tk, dh, Eigen::OuterStride<>(ld));
      scores.noalias() = scale_qk * (Q * K.transpose());
      scores += bias[h];
      if (mask) {
        const float* mw = mask->values.data() + w * tk * tk;
        for (std::int64_t p = 0; p < tk * tk; ++p) scores.data()[p] += static_cast<T>(mw[p]);
      }
      MatMap<T> P(probs->data() + (w * heads + h) * tk * tk, tk, tk);
      for (std::int64_t i = 0; i < tk; ++i) {
        const T m = scores.row(i).maxCoeff();
        T total = 0;
        for (std::int64_t j = 0; j < tk; ++j) {
          const T e = std::exp(scores(i, j) - m);
          P(i, j) = e;
          total += e;
        }
        P.row(i) /= total;
      }
      StridedMap<T>(y.data() + w * tk * c + h * dh, tk, dh, Eigen::OuterStride<>(c)).noalias() = P * V;
    }
  }
  if (probs_out) *probs_out = *probs;
  auto out = make_output(std::move(y), any_tracked(tape, {&qkv, &bias_table}));
  if (out->requires_grad) {
    std::vector<std::int64_t> index(rel_index.begin(), rel_index.end());
    tape->record([qkv, bias_table, out, probs, index = std::move(index), nw, tk, c, heads, dh, ld, scale_qk, tape] {
      if (out->grad.empty()) return;
      const bool gq = tracked(tape, qkv);
      const bool gb = tracked(tape, bias_table);
      T* dqkv = gq ? qkv->grad_buffer().data() : nullptr;
      std::vector<Mat<T>> dbias(gb ? static_cast<std::size_t>(heads) : 0, Mat<T>::Zero(tk, tk));
      Mat<T> dP(tk, tk), dS(tk, tk);
      for (std::int64_t w = 0; w < nw; ++w) {
        const T* base = qkv->value.data() + w * tk * ld;
        for (std::int64_t h = 0; h < heads; ++h) {
          CStridedMap<T> Q(base + h * dh, tk, dh, Eigen::OuterStride<>(ld));
          CStridedMap<T> K(base + c + h * dh, tk, dh, Eigen::OuterStride<>(ld));
          CStridedMap<T> V(base + 2 * c + h * dh, tk, dh, Eigen::OuterStride<>(ld));
          CStridedMap<T> dO(out->grad.data() + w * tk * c + h * dh, tk, dh, Eigen::OuterStride<>(c));
          CMatMap<T> P(probs->data() + (w * heads + h) * tk * tk, tk, tk);
          dP.noalias() = dO * V.transpose();
          for (std::int64_t i = 0; i < tk; ++i) {
            const T dot = P.row(i).dot(dP.row(i));
            dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix());
          }
          if (gb) dbias[h] += dS;
          if (gq) {
            T* gbase = dqkv + w * tk * ld;
            StridedMap<T>(gbase + h * dh, tk, dh, Eigen::OuterStride<>(ld)).noalias() += scale_qk * (dS * K);
            StridedMap<T>(gbase + c + h * dh, tk, dh, Eigen::OuterStride<>(ld)).noalias() +=
                scale_qk * (dS.transpose() * Q);
            StridedMap<T>(gbase + 2 * c + h * dh, tk, dh, Eigen::OuterStride<>(ld)).noalias() += P.transpose() * dO;
          }
        }
      }
      if (gb) {
        T* gt = bias_table->grad_buffer().data();
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t p = 0; p < tk * tk; ++p) gt[index[p] * heads + h] += dbias[h].data()[p];
      }
    });
  }
  return out;
}

template <typename T>
Var<T> sum(Tape<T>* tape, const Var<T>& x) {
  T total = 0;
  for (auto v : x->value.values()) total += v;
  auto out = make_output(Tensor<T>(Shape{1}, total), tracked(tape, x));
  if (out->requires_grad) {
    tape->record([x, out] {
      if (out->grad.empty()) return;
      auto& g = x->grad_buffer();
      for (auto& v : g.values()) v += out->grad[0];
    });
  }
  return out;
}

template <typename T>
Var<T> segmentation_loss(Tape<T>* tape, const Var<T>& logits, std::span<const std::uint8_t> labels, LossParts* parts) {
  const std::int64_t k = last_dim(logits->value.shape());
  require(k >= 2, "segmentation_loss: need at least two classes");
  const std::int64_t n = logits->value.size() / k;
  require(static_cast<std::int64_t>(labels.size()) == n, "segmentation_loss: " + std::to_string(labels.size()) +
                                                              " labels for " + std::to_string(n) + " voxels");
  for (auto l : labels) {
    if (l >= k) throw PreconditionError("segmentation_loss: label " + std::to_string(l) + " out of range for " +
                                        std::to_string(k) + " classes");
  }
  // Softmax probabilities, accumulated statistics in double for stability.
  auto prob = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * k));
  std::vector<double> inter(static_cast<std::size_t>(k), 0.0), psum(static_cast<std::size_t>(k), 0.0),
      gsum(static_cast<std::size_t>(k), 0.0);
  double ce = 0.0;
  const T* z = logits->value.data();
  for (std::int64_t v = 0; v < n; ++v) {
    const T* zr = z + v * k;
    T m = zr[0];
    for (std::int64_t j = 1; j < k; ++j) m = std::max(m, zr[j]);
    T total = 0;
    for (std::int64_t j = 0; j < k; ++j) total += std::exp(zr[j] - m);
    const T log_total = std::log(total);
    const std::int64_t y = labels[static_cast<std::size_t>(v)];
    ce -= static_cast<double>(zr[y] - m - log_total);
    for (std::int64_t j = 0; j < k; ++j) {
      const T p = std::exp(zr[j] - m - log_total);
      (*prob)[v * k + j] = p;
      psum[j] += p;
    }
    inter[y] += (*prob)[v * k + y];
    gsum[y] += 1.0;
  }
  ce /= static_cast<double>(n);
  double mean_dice = 0.0;
  for (std::int64_t j = 0; j < k; ++j) {
    mean_dice += (2.0 * inter[j] + kDiceSmoothing) / (psum[j] + gsum[j] + kDiceSmoothing);
  }
  mean_dice /= static_cast<double>(k);
  const double dice_loss = 1.0 - mean_dice;
  const double total = 0.5 * (dice_loss + ce);
  if (parts) *parts = {total, dice_loss, ce};
  auto out = make_output(Tensor<T>(Shape{1}, static_cast<T>(total)), tracked(tape, logits));
  if (out->requires_grad) {
    std::vector<std::uint8_t> lab(labels.begin(), labels.end());
    tape->record([logits, out, prob, lab = std::move(lab), inter, psum, gsum, n, k] {
      if (out->grad.empty()) return;
      auto& g = logits->grad_buffer();
      const double seed = static_cast<double>(out->grad[0]);
      std::vector<double> dpg(static_cast<std::size_t>(k));
      for (std::int64_t v = 0; v < n; ++v) {
        const std::int64_t y = lab[static_cast<std::size_t>(v)];
        // d(dice term)/d p_vj, then back through the softmax.
        double dot = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
          const double den = psum[j] + gsum[j] + kDiceSmoothing;
          const double num = 2.0 * inter[j] + kDiceSmoothing;
          const double yj = j == y ? 1.0 : 0.0;
          dpg[j] = -(2.0 * yj * den - num) / (den * den) / static_cast<double>(k);
          dot += dpg[j] * static_cast<double>((*prob)[v * k + j]);
        }
        for (std::int64_t j = 0; j < k; ++j) {
          const double p = static_cast<double>((*prob)[v * k + j]);
          const double d_dice = p * (dpg[j] - dot);
          const double d_ce = (p - (j == y ? 1.0 : 0.0)) / static_cast<double>(n);
          g[v * k + j] += static_cast<T>(seed * 0.5 * (d_dice + d_ce));
        }
      }
    });
  }
  return out;
}

#define CATS_OPS_INSTANTIATE(T)                                                                                  \
  template Var<T> gather<T>(Tape<T>*, const Var<T>&, std::int64_t, const geometry::RowMap&, Shape);             \
  template Var<T> linear<T>(Tape<T>*, const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template Var<T> add<T>(Tape<T>*, const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale<T>(Tape<T>*, const Var<T>&, T);                                                        \
  template Var<T> concat_channels<T>(Tape<T>*, const Var<T>&, const Var<T>&);                                  \
  template Var<T> layer_norm<T>(Tape<T>*, const Var<T>&, const Var<T>&, const Var<T>&);                        \
  template Var<T> instance_norm<T>(Tape<T>*, const Var<T>&, const Var<T>&, const Var<T>&);                     \
  template Var<T> gelu<T>(Tape<T>*, const Var<T>&);                                                            \
  template Var<T> leaky_relu<T>(Tape<T>*, const Var<T>&, T);                                                   \
  template Var<T> conv3d<T>(Tape<T>*, const Var<T>&, const Var<T>&, const Var<T>&, std::int64_t);              \
  template Var<T> conv_transpose2<T>(Tape<T>*, const Var<T>&, const Var<T>&, const Var<T>&);                   \
  template Var<T> max_pool2<T>(Tape<T>*, const Var<T>&);                                                       \
  template Var<T> window_attention_core<T>(Tape<T>*, const Var<T>&, const Var<T>&, std::span<const std::int64_t>, \
                                           const geometry::AttentionMask*, std::int64_t, Tensor<T>*);           \
  template Var<T> sum<T>(Tape<T>*, const Var<T>&);                                                             \
  template Var<T> segmentation_loss<T>(Tape<T>*, const Var<T>&, std::span<const std::uint8_t>, LossParts*);

CATS_OPS_INSTANTIATE(float)
CATS_OPS_INSTANTIATE(double)

#undef CATS_OPS_INSTANTIATE

}  // namespace cats::ag
