#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/ops.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/core/tensor.hpp"

namespace pearl::testing {

using Builder = std::function<ad::Var<double>(ad::Graph<double>&, const std::vector<ad::Var<double>>&)>;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// ||a - b|| / max(||a|| + ||b||, floor), the usual norm-based relative error.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nb), floor);
}

/// Compares the reverse-mode gradient of sum(build(inputs) * W) against central
/// differences, W being a fixed random weighting of the output.
inline double gradcheck(std::vector<Tensor<double>> inputs, const Builder& build,
                        std::uint64_t seed, double h = 1e-4) {
  Tensor<double> weights;
  auto scalar = [&](const std::vector<Tensor<double>>& xs) {
    ad::Graph<double> g;
    std::vector<ad::Var<double>> vs;
    for (const auto& x : xs) vs.push_back(g.constant(x));
    const Tensor<double>& out = build(g, vs).value();
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
    return s;
  };

  std::vector<double> analytic, numeric;
  {
    ad::Graph<double> g;
    std::vector<ad::Var<double>> vs;
    for (const auto& x : inputs) vs.push_back(g.input(x));
    ad::Var<double> out = build(g, vs);
    Rng rng(seed);
    weights = random_tensor(out.shape(), rng);
    ad::Var<double> loss = ad::sum(ad::mul(out, g.constant(weights)));
    g.backward(loss);
    for (const auto& v : vs)
      for (double x : g.grad(v).values()) analytic.push_back(x);
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = scalar(inputs);
      inputs[k][i] = orig - h;
      const double down = scalar(inputs);
      inputs[k][i] = orig;
      numeric.push_back((up - down) / (2.0 * h));
    }
  }
  return relative_error(analytic, numeric);
}

/// Builds a scalar loss on a fresh graph; `track` selects whether parameters
/// receive gradients.
using LossFn = std::function<ad::Var<double>(ad::Graph<double>&, bool track)>;

/// Reverse-mode parameter gradients of `loss` against central differences.
/// At most `per_param` randomly chosen entries of each parameter are probed
/// (0 probes all of them).
inline double param_gradcheck(ad::ParameterSet<double>& ps, const LossFn& loss, Rng& rng,
                              std::size_t per_param = 0, double h = 1e-4) {
  ps.zero_grad();
  {
    ad::Graph<double> g;
    g.backward(loss(g, true));
  }
  auto eval = [&] {
    ad::Graph<double> g;
    return loss(g, false).value().item();
  };
  std::vector<double> analytic, numeric;
  for (auto& p : ps) {
    std::vector<std::size_t> probe;
    if (per_param == 0 || per_param >= p.value.size()) {
      for (std::size_t i = 0; i < p.value.size(); ++i) probe.push_back(i);
    } else {
      for (std::size_t i = 0; i < per_param; ++i) probe.push_back(rng.index(p.value.size()));
    }
    for (std::size_t i : probe) {
      analytic.push_back(p.grad[i]);
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = eval();
      p.value[i] = orig - h;
      const double down = eval();
      p.value[i] = orig;
      numeric.push_back((up - down) / (2.0 * h));
    }
  }
  return relative_error(analytic, numeric);
}

}  // namespace pearl::testing
