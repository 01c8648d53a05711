#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/ops.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/core/tensor.hpp"

namespace pearl::models {

template <class T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

/// Affine map y = x W + b over the last axis.
template <class T>
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;

  static Linear create(ad::ParameterSet<T>& ps, const std::string& name, std::size_t in,
                       std::size_t out, double stddev, Rng& rng) {
    Linear l;
    l.weight = ps.add(name + ".w", normal_init<T>({in, out}, stddev, rng));
    l.bias = ps.add(name + ".b", Tensor<T>({out}));
    return l;
  }

  ad::Var<T> operator()(ad::Scope<T>& s, ad::Var<T> x) const {
    return ad::add_broadcast(ad::matmul(x, s(weight)), s(bias));
  }
};

template <class T>
struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;

  static LayerNorm create(ad::ParameterSet<T>& ps, const std::string& name, std::size_t dim) {
    LayerNorm l;
    l.gamma = ps.add(name + ".gamma", Tensor<T>({dim}, T{1}));
    l.beta = ps.add(name + ".beta", Tensor<T>({dim}));
    return l;
  }

  ad::Var<T> operator()(ad::Scope<T>& s, ad::Var<T> x) const {
    return ad::layer_norm(x, s(gamma), s(beta));
  }
};

/// Multi-head self-attention over x[B, T, H].
template <class T>
struct SelfAttention {
  Linear<T> q, k, v, out;
  std::size_t heads = 1;
  bool causal = true;

  static SelfAttention create(ad::ParameterSet<T>& ps, const std::string& name, std::size_t hidden,
                              std::size_t heads, bool causal, double stddev, double out_stddev,
                              Rng& rng) {
    PEARL_REQUIRE(heads >= 1 && hidden % heads == 0, ConfigError,
                  "hidden size " + std::to_string(hidden) + " is not divisible by " +
                      std::to_string(heads) + " heads");
    SelfAttention a;
    a.q = Linear<T>::create(ps, name + ".q", hidden, hidden, stddev, rng);
    a.k = Linear<T>::create(ps, name + ".k", hidden, hidden, stddev, rng);
    a.v = Linear<T>::create(ps, name + ".v", hidden, hidden, stddev, rng);
    a.out = Linear<T>::create(ps, name + ".out", hidden, hidden, out_stddev, rng);
    a.heads = heads;
    a.causal = causal;
    return a;
  }

  ad::Var<T> operator()(ad::Scope<T>& s, ad::Var<T> x) const {
    const Shape shape = x.shape();
    const std::size_t B = shape[0], Tn = shape[1], H = shape[2], hd = H / heads;
    auto split = [&](ad::Var<T> t) {  // [B, T, H] -> [B, heads, T, hd]
      return ad::swap_axes_12(ad::reshape(t, {B, Tn, heads, hd}));
    };
    ad::Var<T> qh = split(q(s, x));
    ad::Var<T> kh = split(k(s, x));
    ad::Var<T> vh = split(v(s, x));
    ad::Var<T> scores = ad::scale(ad::bmm(qh, kh, true), static_cast<T>(1.0 / std::sqrt(double(hd))));
    ad::Var<T> ctx = ad::bmm(ad::softmax(scores, causal), vh);
    return out(s, ad::reshape(ad::swap_axes_12(ctx), {B, Tn, H}));
  }
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <class T>
struct Block {
  LayerNorm<T> ln1, ln2;
  SelfAttention<T> attn;
  Linear<T> fc, proj;

  static Block create(ad::ParameterSet<T>& ps, const std::string& name, std::size_t hidden,
                      std::size_t heads, std::size_t mlp_ratio, bool causal, double stddev,
                      double out_stddev, Rng& rng) {
    Block b;
    b.ln1 = LayerNorm<T>::create(ps, name + ".ln1", hidden);
    b.attn = SelfAttention<T>::create(ps, name + ".attn", hidden, heads, causal, stddev, out_stddev, rng);
    b.ln2 = LayerNorm<T>::create(ps, name + ".ln2", hidden);
    b.fc = Linear<T>::create(ps, name + ".fc", hidden, mlp_ratio * hidden, stddev, rng);
    b.proj = Linear<T>::create(ps, name + ".proj", mlp_ratio * hidden, hidden, out_stddev, rng);
    return b;
  }

  ad::Var<T> operator()(ad::Scope<T>& s, ad::Var<T> x) const {
    x = ad::add(x, attn(s, ln1(s, x)));
    return ad::add(x, proj(s, ad::gelu(fc(s, ln2(s, x)))));
  }
};

}  // namespace pearl::models
