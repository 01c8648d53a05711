#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/kernels.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/tensor.hpp"

namespace pearl::ad {

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  PEARL_REQUIRE(a == b, ShapeError,
                std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline bool is_suffix(const Shape& whole, const Shape& tail) {
  if (tail.size() > whole.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), whole.rbegin());
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* src = a.data();
  T* dst = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

/// Product of all but the last `trailing_axes` dimensions.
inline std::size_t leading(const Shape& s, std::size_t trailing_axes) {
  std::size_t n = 1;
  for (std::size_t i = 0; i + trailing_axes < s.size(); ++i) n *= s[i];
  return n;
}

}  // namespace detail

template <class T>
using Grad = const Tensor<T>&;

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  detail::require_same_shape(va.shape(), vb.shape(), "add");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return a.graph->record("add", std::move(out), {a, b},
                         [a, b](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           g.accumulate(a, gy);
                           g.accumulate(b, gy);
                         });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  detail::require_same_shape(va.shape(), vb.shape(), "sub");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
  return a.graph->record("sub", std::move(out), {a, b},
                         [a, b](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           g.accumulate(a, gy);
                           if (!g.needs_grad(b)) return;
                           Tensor<T>& gb = g.grad_buffer(b);
                           for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
                         });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  detail::require_same_shape(va.shape(), vb.shape(), "mul");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return a.graph->record("mul", std::move(out), {a, b},
                         [a, b](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           const Tensor<T>& va = g.value(a);
                           const Tensor<T>& vb = g.value(b);
                           if (g.needs_grad(a)) {
                             Tensor<T>& ga = g.grad_buffer(a);
                             for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * vb[i];
                           }
                           if (g.needs_grad(b)) {
                             Tensor<T>& gb = g.grad_buffer(b);
                             for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * va[i];
                           }
                         });
}

template <class T>
Var<T> div(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  detail::require_same_shape(va.shape(), vb.shape(), "div");
  Tensor<T> out(va.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] / vb[i];
  return a.graph->record("div", std::move(out), {a, b},
                         [a, b](Graph<T>& g, Grad<T> gy, Grad<T> y) {
                           const Tensor<T>& vb = g.value(b);
                           if (g.needs_grad(a)) {
                             Tensor<T>& ga = g.grad_buffer(a);
                             for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / vb[i];
                           }
                           if (g.needs_grad(b)) {
                             Tensor<T>& gb = g.grad_buffer(b);
                             for (std::size_t i = 0; i < gy.size(); ++i)
                               gb[i] -= gy[i] * y[i] / vb[i];
                           }
                         });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = detail::map(a.value(), [factor](T x) { return x * factor; });
  return a.graph->record("scale", std::move(out), {a},
                         [a, factor](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * factor;
                         });
}

template <class T>
Var<T> add_scalar(Var<T> a, T offset) {
  Tensor<T> out = detail::map(a.value(), [offset](T x) { return x + offset; });
  return a.graph->record("add_scalar", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T>) { g.accumulate(a, gy); });
}

/// a + b where b's shape is a trailing suffix of a's shape (bias, positions).
template <class T>
Var<T> add_broadcast(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  PEARL_REQUIRE(detail::is_suffix(va.shape(), vb.shape()), ShapeError,
                "add_broadcast: " + to_string(vb.shape()) + " is not a suffix of " +
                    to_string(va.shape()));
  const std::size_t inner = vb.size();
  Tensor<T> out(va.shape());
  for (std::size_t o = 0; o < out.size(); o += inner)
    for (std::size_t i = 0; i < inner; ++i) out[o + i] = va[o + i] + vb[i];
  return a.graph->record("add_broadcast", std::move(out), {a, b},
                         [a, b, inner](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           g.accumulate(a, gy);
                           if (!g.needs_grad(b)) return;
                           Tensor<T>& gb = g.grad_buffer(b);
                           for (std::size_t o = 0; o < gy.size(); o += inner)
                             for (std::size_t i = 0; i < inner; ++i) gb[i] += gy[o + i];
                         });
}

template <class T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = detail::map(a.value(), [](T x) { return std::exp(x); });
  return a.graph->record("exp", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T> y) {
                           if (!g.needs_grad(a)) return;
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * y[i];
                         });
}

template <class T>
Var<T> log(Var<T> a) {
  const Tensor<T>& va = a.value();
  for (std::size_t i = 0; i < va.size(); ++i)
    PEARL_REQUIRE(va[i] > T{0}, NumericError, "log of a non-positive value");
  Tensor<T> out = detail::map(va, [](T x) { return std::log(x); });
  return a.graph->record("log", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           const Tensor<T>& x = g.value(a);
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / x[i];
                         });
}

template <class T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out = detail::map(a.value(), [](T x) { return std::tanh(x); });
  return a.graph->record("tanh", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T> y) {
                           if (!g.needs_grad(a)) return;
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i)
                             ga[i] += gy[i] * (T{1} - y[i] * y[i]);
                         });
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = detail::map(a.value(), [](T x) { return x > T{0} ? x : T{0}; });
  return a.graph->record("relu", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           const Tensor<T>& x = g.value(a);
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i)
                             if (x[i] > T{0}) ga[i] += gy[i];
                         });
}

/// GELU, tanh approximation as in GPT-2.
template <class T>
Var<T> gelu(Var<T> a) {
  static constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = static_cast<T>(0.044715);
  Tensor<T> out = detail::map(a.value(), [](T x) {
    return T{0.5} * x * (T{1} + std::tanh(c * (x + k * x * x * x)));
  });
  return a.graph->record("gelu", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           const Tensor<T>& x = g.value(a);
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i) {
                             const T xi = x[i];
                             const T t = std::tanh(c * (xi + k * xi * xi * xi));
                             const T dt = (T{1} - t * t) * c * (T{1} + T{3} * k * xi * xi);
                             ga[i] += gy[i] * (T{0.5} * (T{1} + t) + T{0.5} * xi * dt);
                           }
                         });
}

template <class T>
Var<T> square(Var<T> a) {
  Tensor<T> out = detail::map(a.value(), [](T x) { return x * x; });
  return a.graph->record("square", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           const Tensor<T>& x = g.value(a);
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i)
                             ga[i] += T{2} * x[i] * gy[i];
                         });
}

/// x[..., K] * w[K, N] -> [..., N]
template <class T>
Var<T> matmul(Var<T> x, Var<T> w) {
  const Tensor<T>& vx = x.value();
  const Tensor<T>& vw = w.value();
  PEARL_REQUIRE(vw.rank() == 2 && vx.rank() >= 1 && vx.shape().back() == vw.dim(0),
                ShapeError,
                "matmul: cannot multiply " + to_string(vx.shape()) + " by " +
                    to_string(vw.shape()));
  const std::size_t K = vw.dim(0), N = vw.dim(1), M = vx.size() / K;
  Shape shape = vx.shape();
  shape.back() = N;
  Tensor<T> out(shape);
  kernels::gemm_nn(M, N, K, vx.data(), vw.data(), out.data(), false);
  return x.graph->record(
      "matmul", std::move(out), {x, w}, [x, w, M, N, K](Graph<T>& g, Grad<T> gy, Grad<T>) {
        if (g.needs_grad(x)) {
          std::vector<T> scratch;
          kernels::gemm_nt(M, K, N, gy.data(), g.value(w).data(), g.grad_buffer(x).data(),
                           true, scratch);
        }
        if (g.needs_grad(w)) {
          kernels::gemm_tn(K, N, M, g.value(x).data(), gy.data(), g.grad_buffer(w).data(),
                           true);
        }
      });
}

/// Batched product over leading axes: a[..., M, K] * b[..., K, N], or with
/// transpose_b, a[..., M, K] * b[..., N, K]^T.
template <class T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  PEARL_REQUIRE(va.rank() >= 2 && va.rank() == vb.rank(), ShapeError,
                "bmm: rank mismatch " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
  const std::size_t r = va.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    PEARL_REQUIRE(va.dim(i) == vb.dim(i), ShapeError,
                  "bmm: batch dimensions differ " + to_string(va.shape()) + " vs " +
                      to_string(vb.shape()));
  const std::size_t M = va.dim(r - 2), K = va.dim(r - 1);
  const std::size_t N = transpose_b ? vb.dim(r - 2) : vb.dim(r - 1);
  PEARL_REQUIRE((transpose_b ? vb.dim(r - 1) : vb.dim(r - 2)) == K, ShapeError,
                "bmm: inner dimensions differ " + to_string(va.shape()) + " vs " +
                    to_string(vb.shape()));
  const std::size_t batch = detail::leading(va.shape(), 2);
  Shape shape = va.shape();
  shape[r - 1] = N;
  Tensor<T> out(shape);
  std::vector<T> scratch;
  for (std::size_t s = 0; s < batch; ++s) {
    const T* pa = va.data() + s * M * K;
    const T* pb = vb.data() + s * K * N;
    T* pc = out.data() + s * M * N;
    if (transpose_b)
      kernels::gemm_nt(M, N, K, pa, pb, pc, false, scratch);
    else
      kernels::gemm_nn(M, N, K, pa, pb, pc, false);
  }
  return a.graph->record(
      "bmm", std::move(out), {a, b},
      [a, b, M, N, K, batch, transpose_b](Graph<T>& g, Grad<T> gy, Grad<T>) {
        const Tensor<T>& va = g.value(a);
        const Tensor<T>& vb = g.value(b);
        std::vector<T> scratch;
        if (g.needs_grad(a)) {
          Tensor<T>& ga = g.grad_buffer(a);
          for (std::size_t s = 0; s < batch; ++s) {
            const T* pg = gy.data() + s * M * N;
            const T* pb = vb.data() + s * K * N;
            T* pa = ga.data() + s * M * K;
            if (transpose_b)  // B is [N, K]: dA = dC B
              kernels::gemm_nn(M, K, N, pg, pb, pa, true);
            else  // B is [K, N]: dA = dC B^T
              kernels::gemm_nt(M, K, N, pg, pb, pa, true, scratch);
          }
        }
        if (g.needs_grad(b)) {
          Tensor<T>& gb = g.grad_buffer(b);
          for (std::size_t s = 0; s < batch; ++s) {
            const T* pg = gy.data() + s * M * N;
            const T* pa = va.data() + s * M * K;
            T* pb = gb.data() + s * K * N;
            if (transpose_b)  // dB = dC^T A, [N, K]
              kernels::gemm_tn(N, K, M, pg, pa, pb, true);
            else  // dB = A^T dC, [K, N]
              kernels::gemm_tn(K, N, M, pa, pg, pb, true);
          }
        }
      });
}

/// Softmax over the last axis. With causal = true the last two axes must be
/// square and entry (t, s) is exactly zero for s > t.
template <class T>
Var<T> softmax(Var<T> a, bool causal = false) {
  const Tensor<T>& va = a.value();
  PEARL_REQUIRE(va.rank() >= 1, ShapeError, "softmax of a scalar");
  const std::size_t n = va.shape().back();
  if (causal) {
    PEARL_REQUIRE(va.rank() >= 2 && va.dim(va.rank() - 2) == n, ShapeError,
                  "causal softmax needs square trailing axes, got " + to_string(va.shape()));
  }
  const std::size_t rows = va.size() / n;
  Tensor<T> out(va.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = va.data() + r * n;
    T* y = out.data() + r * n;
    const std::size_t live = causal ? (r % n) + 1 : n;
    T mx = x[0];
    for (std::size_t j = 1; j < live; ++j) mx = std::max(mx, x[j]);
    T sum{0};
    for (std::size_t j = 0; j < live; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::size_t j = 0; j < live; ++j) y[j] /= sum;
  }
  return a.graph->record("softmax", std::move(out), {a},
                         [a, n, rows](Graph<T>& g, Grad<T> gy, Grad<T> y) {
                           if (!g.needs_grad(a)) return;
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* py = y.data() + r * n;
                             const T* pg = gy.data() + r * n;
                             T dot{0};
                             for (std::size_t j = 0; j < n; ++j) dot += py[j] * pg[j];
                             T* pa = ga.data() + r * n;
                             for (std::size_t j = 0; j < n; ++j) pa[j] += py[j] * (pg[j] - dot);
                           }
                         });
}

namespace detail {

template <class T>
struct LayerNormStats {
  std::vector<T> inv_std;
  Tensor<T> normalized;
};

template <class T>
LayerNormStats<T> normalize_rows(const Tensor<T>& x, T eps) {
  const std::size_t h = x.shape().back();
  const std::size_t rows = x.size() / h;
  LayerNormStats<T> s{std::vector<T>(rows), Tensor<T>(x.shape())};
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = x.data() + r * h;
    T mean{0};
    for (std::size_t j = 0; j < h; ++j) mean += px[j];
    mean /= static_cast<T>(h);
    T var{0};
    for (std::size_t j = 0; j < h; ++j) var += (px[j] - mean) * (px[j] - mean);
    var /= static_cast<T>(h);
    const T inv = T{1} / std::sqrt(var + eps);
    s.inv_std[r] = inv;
    T* pn = s.normalized.data() + r * h;
    for (std::size_t j = 0; j < h; ++j) pn[j] = (px[j] - mean) * inv;
  }
  return s;
}

/// dx for x_hat = (x - mean) / std given d x_hat, row by row.
template <class T>
void layer_norm_input_grad(const Tensor<T>& xhat, const std::vector<T>& inv_std,
                           const std::vector<T>& dxhat, Tensor<T>& gx) {
  const std::size_t h = xhat.shape().back();
  const std::size_t rows = xhat.size() / h;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* pn = xhat.data() + r * h;
    const T* pd = dxhat.data() + r * h;
    T mean_d{0}, mean_dn{0};
    for (std::size_t j = 0; j < h; ++j) {
      mean_d += pd[j];
      mean_dn += pd[j] * pn[j];
    }
    mean_d /= static_cast<T>(h);
    mean_dn /= static_cast<T>(h);
    T* pg = gx.data() + r * h;
    for (std::size_t j = 0; j < h; ++j)
      pg[j] += inv_std[r] * (pd[j] - mean_d - pn[j] * mean_dn);
  }
}

}  // namespace detail

/// Layer normalisation over the last axis, without affine parameters.
template <class T>
Var<T> layer_norm(Var<T> x, T eps = static_cast<T>(1e-5)) {
  auto stats = detail::normalize_rows(x.value(), eps);
  Tensor<T> out = stats.normalized;
  return x.graph->record(
      "layer_norm", std::move(out), {x},
      [x, inv = std::move(stats.inv_std)](Graph<T>& g, Grad<T> gy, Grad<T> y) {
        if (!g.needs_grad(x)) return;
        detail::layer_norm_input_grad(y, inv, gy.storage(), g.grad_buffer(x));
      });
}

/// Layer normalisation over the last axis followed by gamma * x_hat + beta.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = static_cast<T>(1e-5)) {
  const std::size_t h = x.value().shape().back();
  PEARL_REQUIRE(gamma.value().shape() == Shape{h} && beta.value().shape() == Shape{h},
                ShapeError, "layer_norm: affine parameters must have shape [" +
                                std::to_string(h) + "]");
  auto stats = detail::normalize_rows(x.value(), eps);
  const Tensor<T>& gm = gamma.value();
  const Tensor<T>& bt = beta.value();
  Tensor<T> out(stats.normalized.shape());
  for (std::size_t o = 0; o < out.size(); o += h)
    for (std::size_t i = 0; i < h; ++i) out[o + i] = gm[i] * stats.normalized[o + i] + bt[i];
  return x.graph->record(
      "layer_norm_affine", std::move(out), {x, gamma, beta},
      [x, gamma, beta, h, xhat = std::move(stats.normalized),
       inv = std::move(stats.inv_std)](Graph<T>& g, Grad<T> gy, Grad<T>) {
        if (g.needs_grad(gamma)) {
          Tensor<T>& gg = g.grad_buffer(gamma);
          for (std::size_t o = 0; o < gy.size(); o += h)
            for (std::size_t i = 0; i < h; ++i) gg[i] += gy[o + i] * xhat[o + i];
        }
        if (g.needs_grad(beta)) {
          Tensor<T>& gb = g.grad_buffer(beta);
          for (std::size_t o = 0; o < gy.size(); o += h)
            for (std::size_t i = 0; i < h; ++i) gb[i] += gy[o + i];
        }
        if (g.needs_grad(x)) {
          const Tensor<T>& gm = g.value(gamma);
          std::vector<T> dxhat(gy.size());
          for (std::size_t o = 0; o < gy.size(); o += h)
            for (std::size_t i = 0; i < h; ++i) dxhat[o + i] = gy[o + i] * gm[i];
          detail::layer_norm_input_grad(xhat, inv, dxhat, g.grad_buffer(x));
        }
      });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.graph->record("reshape", std::move(out), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           Tensor<T>& ga = g.grad_buffer(a);
                           for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                         });
}

/// [A, B, C, D] -> [A, C, B, D]; splits or merges attention heads.
template <class T>
Var<T> swap_axes_12(Var<T> a) {
  const Tensor<T>& va = a.value();
  PEARL_REQUIRE(va.rank() == 4, ShapeError, "swap_axes_12 needs a rank-4 tensor");
  const std::size_t A = va.dim(0), B = va.dim(1), C = va.dim(2), D = va.dim(3);
  Tensor<T> out(Shape{A, C, B, D});
  auto permute = [A, B, C, D](const T* src, T* dst, bool accumulate) {
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t j = 0; j < B; ++j)
        for (std::size_t k = 0; k < C; ++k) {
          const T* s = src + ((i * B + j) * C + k) * D;
          T* d = dst + ((i * C + k) * B + j) * D;
          for (std::size_t l = 0; l < D; ++l) d[l] = accumulate ? d[l] + s[l] : s[l];
        }
  };
  permute(va.data(), out.data(), false);
  return a.graph->record("swap_axes_12", std::move(out), {a},
                         [a, A, B, C, D](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           Tensor<T>& ga = g.grad_buffer(a);
                           // gy is [A, C, B, D]; scatter back to [A, B, C, D].
                           for (std::size_t i = 0; i < A; ++i)
                             for (std::size_t k = 0; k < C; ++k)
                               for (std::size_t j = 0; j < B; ++j) {
                                 const T* s = gy.data() + ((i * C + k) * B + j) * D;
                                 T* d = ga.data() + ((i * B + j) * C + k) * D;
                                 for (std::size_t l = 0; l < D; ++l) d[l] += s[l];
                               }
                         });
}

/// Concatenate rank-3 tensors [B, T1, H] and [B, T2, H] along axis 1.
template <class T>
Var<T> concat_axis1(Var<T> a, Var<T> b) {
  const Tensor<T>& va = a.value();
  const Tensor<T>& vb = b.value();
  PEARL_REQUIRE(va.rank() == 3 && vb.rank() == 3 && va.dim(0) == vb.dim(0) &&
                    va.dim(2) == vb.dim(2),
                ShapeError,
                "concat_axis1: incompatible " + to_string(va.shape()) + " and " +
                    to_string(vb.shape()));
  const std::size_t B = va.dim(0), T1 = va.dim(1), T2 = vb.dim(1), H = va.dim(2);
  Tensor<T> out(Shape{B, T1 + T2, H});
  for (std::size_t s = 0; s < B; ++s) {
    std::copy_n(va.data() + s * T1 * H, T1 * H, out.data() + s * (T1 + T2) * H);
    std::copy_n(vb.data() + s * T2 * H, T2 * H, out.data() + (s * (T1 + T2) + T1) * H);
  }
  return a.graph->record("concat", std::move(out), {a, b},
                         [a, b, B, T1, T2, H](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           for (std::size_t s = 0; s < B; ++s) {
                             const T* src = gy.data() + s * (T1 + T2) * H;
                             if (g.needs_grad(a)) {
                               T* d = g.grad_buffer(a).data() + s * T1 * H;
                               for (std::size_t i = 0; i < T1 * H; ++i) d[i] += src[i];
                             }
                             if (g.needs_grad(b)) {
                               T* d = g.grad_buffer(b).data() + s * T2 * H;
                               for (std::size_t i = 0; i < T2 * H; ++i) d[i] += src[T1 * H + i];
                             }
                           }
                         });
}

/// Gather positions along axis 1 of a [B, T, H] tensor.
template <class T>
Var<T> select_axis1(Var<T> a, std::vector<std::size_t> positions) {
  const Tensor<T>& va = a.value();
  PEARL_REQUIRE(va.rank() == 3, ShapeError, "select_axis1 needs a rank-3 tensor");
  const std::size_t B = va.dim(0), Tn = va.dim(1), H = va.dim(2), P = positions.size();
  for (std::size_t p : positions)
    PEARL_REQUIRE(p < Tn, ShapeError, "select_axis1: position out of range");
  Tensor<T> out(Shape{B, P, H});
  for (std::size_t s = 0; s < B; ++s)
    for (std::size_t i = 0; i < P; ++i)
      std::copy_n(va.data() + (s * Tn + positions[i]) * H, H, out.data() + (s * P + i) * H);
  return a.graph->record(
      "select", std::move(out), {a},
      [a, B, Tn, H, pos = std::move(positions)](Graph<T>& g, Grad<T> gy, Grad<T>) {
        if (!g.needs_grad(a)) return;
        Tensor<T>& ga = g.grad_buffer(a);
        const std::size_t P = pos.size();
        for (std::size_t s = 0; s < B; ++s)
          for (std::size_t i = 0; i < P; ++i) {
            const T* src = gy.data() + (s * P + i) * H;
            T* d = ga.data() + (s * Tn + pos[i]) * H;
            for (std::size_t l = 0; l < H; ++l) d[l] += src[l];
          }
      });
}

/// Row lookup into an embedding table [V, H] -> [indices.size(), H].
template <class T>
Var<T> embedding(Var<T> table, std::vector<std::size_t> indices) {
  const Tensor<T>& vt = table.value();
  PEARL_REQUIRE(vt.rank() == 2, ShapeError, "embedding table must be rank 2");
  const std::size_t V = vt.dim(0), H = vt.dim(1);
  Tensor<T> out(Shape{indices.size(), H});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    PEARL_REQUIRE(indices[i] < V, ShapeError,
                  "embedding index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(vt.data() + indices[i] * H, H, out.data() + i * H);
  }
  return table.graph->record(
      "embedding", std::move(out), {table},
      [table, H, idx = std::move(indices)](Graph<T>& g, Grad<T> gy, Grad<T>) {
        if (!g.needs_grad(table)) return;
        Tensor<T>& gt = g.grad_buffer(table);
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t l = 0; l < H; ++l) gt[idx[i] * H + l] += gy[i * H + l];
      });
}

template <class T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& va = a.value();
  T total{0};
  for (std::size_t i = 0; i < va.size(); ++i) total += va[i];
  return a.graph->record("sum", Tensor<T>::scalar(total), {a},
                         [a](Graph<T>& g, Grad<T> gy, Grad<T>) {
                           if (!g.needs_grad(a)) return;
                           Tensor<T>& ga = g.grad_buffer(a);
                           const T s = gy[0];
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s;
                         });
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  PEARL_REQUIRE(n > 0, ShapeError, "mean of an empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

/// Mean squared difference over all elements.
template <class T>
Var<T> mse(Var<T> pred, Var<T> target) {
  return mean(square(sub(pred, target)));
}

}  // namespace pearl::ad
