#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/ops.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/models/layers.hpp"
#include "pearl/permutation/sinkhorn.hpp"
#include "pearl/task/icl_task.hpp"

namespace pearl::models {

struct PNetConfig {
  std::size_t dim = 5;
  std::size_t max_demos = 5;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 32;
  std::size_t mlp_ratio = 4;
  /// Initial spread of the bilinear weight W. 0 gives R = 0 (uniform proposals).
  double relation_init = 0.02;

  void validate() const {
    PEARL_REQUIRE(dim >= 1 && max_demos >= 2, ConfigError, "p-net needs dim >= 1 and max_demos >= 2");
    PEARL_REQUIRE(hidden >= 1 && mlp_ratio >= 1, ConfigError, "p-net hidden size must be positive");
    PEARL_REQUIRE(heads >= 1 && hidden % heads == 0, ConfigError,
                  "p-net hidden size must be divisible by the head count");
    PEARL_REQUIRE(relation_init >= 0.0, ConfigError, "relation_init must be >= 0");
  }
};

/// Pair features [x_i, y_i] for the demonstrations followed by the query pair.
template <class T>
Tensor<T> pair_features(const std::vector<PromptInstance>& batch) {
  PEARL_REQUIRE(!batch.empty(), ShapeError, "empty batch");
  const std::size_t n = batch.front().size(), d = batch.front().dim(), F = d + 1;
  Tensor<T> f({batch.size(), n + 1, F});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PromptInstance& p = batch[b];
    PEARL_REQUIRE(p.size() == n && p.dim() == d, ShapeError,
                  "batch mixes instances of different shot counts or dimensions");
    T* row = f.data() + b * (n + 1) * F;
    for (std::size_t i = 0; i <= n; ++i) {
      const auto& x = i < n ? p.demos[i].x : p.query_x;
      for (std::size_t j = 0; j < d; ++j) row[i * F + j] = static_cast<T>(x[j]);
      row[i * F + d] = static_cast<T>(i < n ? p.demos[i].y : p.query_y);
    }
  }
  return f;
}

/// Permutation proposer: an MLP pools each (x_i, y_i) pair, a bidirectional
/// encoder contextualises the pooled vectors together with the query pair,
/// and R = tanh(H W H^T) over the demonstrations.
template <class T = float>
class PNet {
 public:
  PNet(const PNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, Stream::pnet_init));
    const double sd = 0.02, out_sd = 0.02 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg_.layers, 1)));
    pool_in_ = Linear<T>::create(params_, "pnet.pool.in", cfg_.dim + 1, cfg_.hidden, sd, rng);
    pool_out_ = Linear<T>::create(params_, "pnet.pool.out", cfg_.hidden, cfg_.hidden, sd, rng);
    pos_ = params_.add("pnet.pos", normal_init<T>({cfg_.max_demos + 1, cfg_.hidden}, sd, rng));
    for (std::size_t l = 0; l < cfg_.layers; ++l)
      blocks_.push_back(Block<T>::create(params_, "pnet.enc" + std::to_string(l), cfg_.hidden,
                                         cfg_.heads, cfg_.mlp_ratio, false, sd, out_sd, rng));
    ln_f_ = LayerNorm<T>::create(params_, "pnet.ln_f", cfg_.hidden);
    relation_ = params_.add("pnet.relation",
                            normal_init<T>({cfg_.hidden, cfg_.hidden}, cfg_.relation_init, rng));
  }

  const PNetConfig& config() const { return cfg_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }
  std::size_t relation_index() const { return relation_; }

  /// R [B, n, n] with entries in (-1, 1).
  ad::Var<T> relation(ad::Scope<T>& s, const std::vector<PromptInstance>& batch) const {
    PEARL_REQUIRE(!batch.empty(), ShapeError, "empty batch");
    const std::size_t n = batch.front().size();
    PEARL_REQUIRE(n >= 2, ShapeError, "p-net needs at least 2 demonstrations");
    PEARL_REQUIRE(n <= cfg_.max_demos, ShapeError,
                  std::to_string(n) + " demonstrations exceed p-net capacity " +
                      std::to_string(cfg_.max_demos));
    PEARL_REQUIRE(batch.front().dim() == cfg_.dim, ShapeError,
                  "instance dimension " + std::to_string(batch.front().dim()) +
                      " does not match p-net dimension " + std::to_string(cfg_.dim));
    ad::Graph<T>& g = s.graph();
    ad::Var<T> h = pool_out_(s, ad::gelu(pool_in_(s, g.constant(pair_features<T>(batch)))));
    std::vector<std::size_t> slots(n + 1);
    for (std::size_t i = 0; i < n; ++i) slots[i] = i;
    slots[n] = cfg_.max_demos;
    h = ad::add_broadcast(h, ad::embedding(s(pos_), slots));
    for (const auto& block : blocks_) h = block(s, h);
    h = ln_f_(s, h);
    std::vector<std::size_t> demo(n);
    for (std::size_t i = 0; i < n; ++i) demo[i] = i;
    ad::Var<T> hd = ad::select_axis1(h, demo);  // [B, n, H]
    return ad::tanh(ad::bmm(ad::matmul(hd, s(relation_)), hd, true));
  }

  /// gumbel_sinkhorn(R, cfg) with the given pre-scaled noise [B, n, n].
  ad::Var<T> propose(ad::Scope<T>& s, const std::vector<PromptInstance>& batch,
                     const SinkhornConfig& cfg, const Tensor<T>& noise) const {
    return gumbel_sinkhorn(relation(s, batch), cfg, noise);
  }

  /// Soft permutations [B, n, n] with noise drawn from `rng`; no gradients.
  Tensor<T> propose_permutation(const std::vector<PromptInstance>& batch, const SinkhornConfig& cfg,
                                Rng& rng) {
    ad::Graph<T> g;
    ad::Scope<T> s(g, params_, false);
    ad::Var<T> r = relation(s, batch);
    return gumbel_sinkhorn(r, cfg, rng).value();
  }

 private:
  PNetConfig cfg_;
  ad::ParameterSet<T> params_;
  Linear<T> pool_in_, pool_out_;
  std::size_t pos_ = 0;
  std::vector<Block<T>> blocks_;
  LayerNorm<T> ln_f_;
  std::size_t relation_ = 0;
};

}  // namespace pearl::models
