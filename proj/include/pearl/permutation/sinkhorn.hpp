#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/ops.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/core/tensor.hpp"

namespace pearl {

/// Row/column sums of every soft permutation stay within this of 1.
inline constexpr double kDoublyStochasticTolerance = 1e-5;

struct SinkhornConfig {
  /// Log-space row/column sweeps before Newton refinement.
  std::size_t iterations = 80;
  double temperature = 0.1;
  double noise_scale = 0.3;
  /// Stabiliser inside the entropy's logarithm.
  double epsilon = 1e-9;

  void validate() const {
    PEARL_REQUIRE(iterations >= 1, ConfigError, "sinkhorn iterations must be >= 1");
    PEARL_REQUIRE(temperature > 0.0 && std::isfinite(temperature), ConfigError,
                  "sinkhorn temperature must be positive");
    PEARL_REQUIRE(noise_scale >= 0.0, ConfigError, "gumbel noise scale must be >= 0");
    PEARL_REQUIRE(epsilon > 0.0 && epsilon <= 1e-6, ConfigError,
                  "entropy epsilon must lie in (0, 1e-6]");
  }
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

struct BalanceResult {
  std::vector<double> P;  // n x n, row-major
  double residual = 0.0;  // max |row/col sum - 1|
  std::size_t newton_steps = 0;
};

inline double marginal_residual(const std::vector<double>& P, std::size_t n,
                                std::vector<double>* grad = nullptr) {
  double worst = 0.0;
  if (grad) grad->assign(2 * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double r = 0.0, c = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      r += P[i * n + j];
      c += P[j * n + i];
    }
    if (grad) {
      (*grad)[i] = r - 1.0;
      (*grad)[n + i] = c - 1.0;
    }
    worst = std::max({worst, std::abs(r - 1.0), std::abs(c - 1.0)});
  }
  return worst;
}

/// Symmetric PSD system [[diag(r), P], [P^T, diag(c)]]; its null direction
/// (1, -1) is removed with an eigenvalue-thresholded pseudo-inverse.
inline Eigen::VectorXd scaling_system_solve(const std::vector<double>& P, std::size_t n,
                                            const Eigen::VectorXd& rhs) {
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(2 * n, 2 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double p = P[i * n + j];
      H(i, i) += p;
      H(n + j, n + j) += p;
      H(i, n + j) = p;
      H(n + j, i) = p;
    }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(H);
  const Eigen::VectorXd& w = eig.eigenvalues();
  const double cutoff = w.maxCoeff() * 1e-13;
  Eigen::VectorXd coeff = eig.eigenvectors().transpose() * rhs;
  for (Eigen::Index k = 0; k < coeff.size(); ++k) coeff(k) = w(k) > cutoff ? coeff(k) / w(k) : 0.0;
  return eig.eigenvectors() * coeff;
}

inline void scaled_exp(const std::vector<double>& X, const std::vector<double>& u,
                       const std::vector<double>& v, std::size_t n, std::vector<double>& P) {
  P.resize(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) P[i * n + j] = std::exp(X[i * n + j] + u[i] + v[j]);
}

/// Doubly stochastic matrix diag(e^u) exp(X) diag(e^v): `sweeps` log-space
/// row-then-column normalisations, then damped Newton on the dual scalings
/// until the marginal residual reaches `target`.
inline BalanceResult balance(std::span<const double> logits, std::size_t n, std::size_t sweeps,
                             double target = 1e-10, std::size_t max_newton = 200) {
  std::vector<double> X(logits.begin(), logits.end());
  std::vector<double> u(n, 0.0), v(n, 0.0), buf(n);
  for (std::size_t s = 0; s < sweeps; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) buf[j] = X[i * n + j] + v[j];
      u[i] = -log_sum_exp(buf);
    }
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < n; ++i) buf[i] = X[i * n + j] + u[i];
      v[j] = -log_sum_exp(buf);
    }
  }

  BalanceResult out;
  std::vector<double> g;
  scaled_exp(X, u, v, n, out.P);
  out.residual = marginal_residual(out.P, n, &g);

  auto objective = [&](const std::vector<double>& uu, const std::vector<double>& vv) {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) f += std::exp(X[i * n + j] + uu[i] + vv[j]);
    for (std::size_t i = 0; i < n; ++i) f -= uu[i] + vv[i];
    return f;
  };

  std::vector<double> un(n), vn(n), Pn;
  while (out.residual > target && out.newton_steps < max_newton) {
    Eigen::VectorXd rhs(2 * n);
    for (std::size_t k = 0; k < 2 * n; ++k) rhs(static_cast<Eigen::Index>(k)) = g[k];
    const Eigen::VectorXd d = -scaling_system_solve(out.P, n, rhs);
    const double slope = rhs.dot(d);
    const double f0 = objective(u, v);
    double t = 1.0;
    bool accepted = false;
    for (int tries = 0; tries < 60; ++tries, t *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) {
        un[i] = u[i] + t * d(static_cast<Eigen::Index>(i));
        vn[i] = v[i] + t * d(static_cast<Eigen::Index>(n + i));
      }
      scaled_exp(X, un, vn, n, Pn);
      std::vector<double> gn;
      const double res = marginal_residual(Pn, n, &gn);
      if (!std::isfinite(res)) continue;
      const double f = objective(un, vn);
      if (res < out.residual || f <= f0 + 1e-4 * t * slope) {
        u.swap(un);
        v.swap(vn);
        out.P.swap(Pn);
        g.swap(gn);
        out.residual = res;
        accepted = true;
        break;
      }
    }
    ++out.newton_steps;
    if (!accepted) break;
  }
  return out;
}

/// Gradient of a loss through the balanced matrix, by implicit differentiation
/// of the row/column constraints: dX = P .* (G - a 1^T - 1 b^T).
inline void balance_backward(const std::vector<double>& P, std::size_t n,
                             std::span<const double> G, std::span<double> dX) {
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(2 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double pg = P[i * n + j] * G[i * n + j];
      rhs(static_cast<Eigen::Index>(i)) += pg;
      rhs(static_cast<Eigen::Index>(n + j)) += pg;
    }
  const Eigen::VectorXd ab = scaling_system_solve(P, n, rhs);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      dX[i * n + j] += P[i * n + j] * (G[i * n + j] - ab(static_cast<Eigen::Index>(i)) -
                                       ab(static_cast<Eigen::Index>(n + j)));
}

inline void require_square_batch(const Shape& s, const char* op) {
  PEARL_REQUIRE((s.size() == 2 || s.size() == 3) && s[s.size() - 1] == s[s.size() - 2] &&
                    s.back() > 0,
                ShapeError,
                std::string(op) + ": expected [n, n] or [B, n, n] with n >= 1, got " +
                    to_string(s));
}

}  // namespace detail

/// Balances exp(logits) into a doubly stochastic matrix, independently for
/// each trailing n x n block. Differentiable with respect to the logits.
template <class T>
ad::Var<T> sinkhorn_balance(ad::Var<T> logits, std::size_t sweeps) {
  const Tensor<T>& x = logits.value();
  detail::require_square_batch(x.shape(), "sinkhorn");
  const std::size_t n = x.shape().back();
  const std::size_t count = x.size() / (n * n);
  Tensor<T> out(x.shape());
  std::vector<std::vector<double>> balanced(count);
  std::vector<double> block(n * n);
  for (std::size_t b = 0; b < count; ++b) {
    for (std::size_t k = 0; k < n * n; ++k) block[k] = static_cast<double>(x[b * n * n + k]);
    detail::BalanceResult r = detail::balance(block, n, sweeps);
    PEARL_REQUIRE(r.residual <= kDoublyStochasticTolerance, NumericError,
                  "sinkhorn failed to reach the doubly stochastic tolerance (residual " +
                      std::to_string(r.residual) + ")");
    for (std::size_t k = 0; k < n * n; ++k) out[b * n * n + k] = static_cast<T>(r.P[k]);
    balanced[b] = std::move(r.P);
  }
  return logits.graph->record(
      "sinkhorn", std::move(out), {logits},
      [logits, n, bal = std::move(balanced)](ad::Graph<T>& g, ad::Grad<T> gy, ad::Grad<T>) {
        if (!g.needs_grad(logits)) return;
        Tensor<T>& gx = g.grad_buffer(logits);
        std::vector<double> G(n * n), dX(n * n);
        for (std::size_t b = 0; b < bal.size(); ++b) {
          for (std::size_t k = 0; k < n * n; ++k) G[k] = static_cast<double>(gy[b * n * n + k]);
          std::fill(dX.begin(), dX.end(), 0.0);
          detail::balance_backward(bal[b], n, G, dX);
          for (std::size_t k = 0; k < n * n; ++k) gx[b * n * n + k] += static_cast<T>(dX[k]);
        }
      });
}

/// S(R / tau): the doubly stochastic limit of alternating row/column
/// normalisation of exp(R / tau).
template <class T>
ad::Var<T> sinkhorn(ad::Var<T> relation, const SinkhornConfig& cfg) {
  cfg.validate();
  return sinkhorn_balance(ad::scale(relation, static_cast<T>(1.0 / cfg.temperature)),
                          cfg.iterations);
}

/// Plain-tensor convenience wrapper around sinkhorn().
template <class T>
Tensor<T> sinkhorn(const Tensor<T>& relation, const SinkhornConfig& cfg) {
  ad::Graph<T> g;
  return sinkhorn(g.constant(relation), cfg).value();
}

/// Standard Gumbel variate from a uniform draw u in (0, 1).
inline double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

/// Matrix (or batch of matrices) of i.i.d. scale * Gumbel(0, 1) entries.
/// With scale 0 the result is all zeros and no draws are consumed.
template <class T = double>
Tensor<T> gumbel_sample(Shape shape, double scale, Rng& rng) {
  PEARL_REQUIRE(scale >= 0.0, ConfigError, "gumbel noise scale must be >= 0");
  Tensor<T> out(std::move(shape));
  if (scale == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(scale * gumbel_from_uniform(rng.uniform()));
  return out;
}

template <class T = double>
Tensor<T> gumbel_sample(std::size_t n, double scale, Rng& rng) {
  return gumbel_sample<T>(Shape{n, n}, scale, rng);
}

/// S((R + noise) / tau) where `noise` already carries the configured scale
/// (see gumbel_sample). Noise is a constant; gradients flow through R only.
template <class T>
ad::Var<T> gumbel_sinkhorn(ad::Var<T> relation, const SinkhornConfig& cfg,
                           const Tensor<T>& noise) {
  cfg.validate();
  PEARL_REQUIRE(noise.shape() == relation.shape(), ShapeError,
                "gumbel noise shape " + to_string(noise.shape()) + " does not match " +
                    to_string(relation.shape()));
  ad::Var<T> perturbed = ad::add(relation, relation.graph->constant(noise));
  return sinkhorn(perturbed, cfg);
}

/// Draws the noise from `rng` and applies gumbel_sinkhorn.
template <class T>
ad::Var<T> gumbel_sinkhorn(ad::Var<T> relation, const SinkhornConfig& cfg, Rng& rng) {
  return gumbel_sinkhorn(relation, cfg, gumbel_sample<T>(relation.shape(), cfg.noise_scale, rng));
}

/// Element-wise entropy sum_ij -P_ij log((P_ij + eps) / (1 + eps)) of each
/// n x n block. The 1 + eps keeps hard matrices at exactly zero.
/// Rank-2 input gives a scalar, rank-3 input a vector of per-block entropies.
template <class T>
ad::Var<T> entropy(ad::Var<T> P, double epsilon = 1e-9) {
  const Tensor<T>& p = P.value();
  detail::require_square_batch(p.shape(), "entropy");
  const std::size_t n = p.shape().back();
  const std::size_t count = p.size() / (n * n);
  const T eps = static_cast<T>(epsilon);
  Tensor<T> out(p.rank() == 2 ? Shape{} : Shape{count});
  for (std::size_t b = 0; b < count; ++b) {
    T h{0};
    for (std::size_t k = 0; k < n * n; ++k) {
      const T x = p[b * n * n + k];
      PEARL_REQUIRE(x >= T{0}, NumericError, "entropy of a matrix with negative entries");
      h -= std::min(T{0}, x * std::log((x + eps) / (T{1} + eps)));
    }
    out[b] = h;
  }
  return P.graph->record("entropy", std::move(out), {P},
                         [P, n, eps](ad::Graph<T>& g, ad::Grad<T> gy, ad::Grad<T>) {
                           if (!g.needs_grad(P)) return;
                           const Tensor<T>& p = g.value(P);
                           Tensor<T>& gp = g.grad_buffer(P);
                           for (std::size_t k = 0; k < p.size(); ++k) {
                             const T x = p[k];
                             gp[k] += gy[k / (n * n)] *
                                      (-std::log((x + eps) / (T{1} + eps)) - x / (x + eps));
                           }
                         });
}

template <class T>
double entropy(const Tensor<T>& P, double epsilon = 1e-9) {
  ad::Graph<T> g;
  return static_cast<double>(entropy(g.constant(P), epsilon).value().item());
}

/// Largest deviation of any row or column sum from 1, over all blocks.
template <class T>
double doubly_stochastic_error(const Tensor<T>& P) {
  detail::require_square_batch(P.shape(), "doubly_stochastic_error");
  const std::size_t n = P.shape().back();
  double worst = 0.0;
  for (std::size_t b = 0; b < P.size() / (n * n); ++b) {
    std::vector<double> block(P.data() + b * n * n, P.data() + (b + 1) * n * n);
    worst = std::max(worst, detail::marginal_residual(block, n));
  }
  return worst;
}

/// Output block i is sum_j P_ij * block_j (per batch entry when rank 3).
template <class T>
ad::Var<T> apply_soft(ad::Var<T> P, ad::Var<T> blocks) {
  const Shape& ps = P.shape();
  const Shape& bs = blocks.shape();
  detail::require_square_batch(ps, "apply_soft");
  PEARL_REQUIRE(bs.size() == ps.size() && bs[bs.size() - 2] == ps.back() &&
                    (ps.size() == 2 || ps[0] == bs[0]),
                ShapeError,
                "apply_soft: permutation " + to_string(ps) + " does not match blocks " +
                    to_string(bs));
  return ad::bmm(P, blocks);
}

}  // namespace pearl
