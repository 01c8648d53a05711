#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
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

struct LearnerConfig {
  std::size_t dim = 5;
  std::size_t max_demos = 5;
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t mlp_ratio = 4;

  std::size_t max_seq() const { return 2 * max_demos + 1; }

  void validate() const {
    PEARL_REQUIRE(dim >= 1 && max_demos >= 1, ConfigError, "learner needs dim >= 1 and max_demos >= 1");
    PEARL_REQUIRE(layers >= 1 && hidden >= 1 && mlp_ratio >= 1, ConfigError,
                  "learner layers, hidden size and mlp ratio must be positive");
    PEARL_REQUIRE(heads >= 1 && hidden % heads == 0, ConfigError,
                  "learner hidden size must be divisible by the head count");
  }
};

/// Prompt x_1, y_1, ..., x_k, y_k, x_query as (d + 1)-dim tokens: [x, 0] and [0, y].
template <class T>
Tensor<T> prompt_tokens(const std::vector<PromptInstance>& batch) {
  PEARL_REQUIRE(!batch.empty(), ShapeError, "empty batch");
  const std::size_t k = batch.front().size(), d = batch.front().dim();
  const std::size_t Tn = 2 * k + 1, F = d + 1;
  Tensor<T> tok({batch.size(), Tn, F});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const PromptInstance& p = batch[b];
    PEARL_REQUIRE(p.size() == k && p.dim() == d, ShapeError,
                  "batch mixes instances of different shot counts or dimensions");
    T* row = tok.data() + b * Tn * F;
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < d; ++j) row[(2 * i) * F + j] = static_cast<T>(p.demos[i].x[j]);
      row[(2 * i + 1) * F + d] = static_cast<T>(p.demos[i].y);
    }
    for (std::size_t j = 0; j < d; ++j) row[(2 * k) * F + j] = static_cast<T>(p.query_x[j]);
  }
  return tok;
}

/// Decoder-only causal transformer reading the prompt and predicting y at every
/// x position.
template <class T = float>
class Learner {
 public:
  Learner(const LearnerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, Stream::learner_init));
    const double sd = 0.02, out_sd = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    in_ = Linear<T>::create(params_, "learner.in", cfg_.dim + 1, cfg_.hidden, sd, rng);
    pos_ = params_.add("learner.pos", normal_init<T>({cfg_.max_seq(), cfg_.hidden}, sd, rng));
    for (std::size_t l = 0; l < cfg_.layers; ++l)
      blocks_.push_back(Block<T>::create(params_, "learner.h" + std::to_string(l), cfg_.hidden,
                                         cfg_.heads, cfg_.mlp_ratio, true, sd, out_sd, rng));
    ln_f_ = LayerNorm<T>::create(params_, "learner.ln_f", cfg_.hidden);
    head_ = Linear<T>::create(params_, "learner.head", cfg_.hidden, 1, sd, rng);
  }

  const LearnerConfig& config() const { return cfg_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }

  /// Predictions [B, k + 1]. With `perm` ([B, k, k] doubly stochastic) the
  /// embedded (x_i, y_i) blocks are mixed as apply_soft(perm, blocks) before
  /// position embeddings are added.
  ad::Var<T> forward(ad::Scope<T>& s, const std::vector<PromptInstance>& batch,
                     std::optional<ad::Var<T>> perm = std::nullopt) const {
    PEARL_REQUIRE(!batch.empty(), ShapeError, "empty batch");
    const std::size_t B = batch.size(), k = batch.front().size();
    PEARL_REQUIRE(batch.front().dim() == cfg_.dim, ShapeError,
                  "instance dimension " + std::to_string(batch.front().dim()) +
                      " does not match learner dimension " + std::to_string(cfg_.dim));
    PEARL_REQUIRE(k <= cfg_.max_demos, ShapeError,
                  "sequence of " + std::to_string(2 * k + 1) + " tokens exceeds maximum length " +
                      std::to_string(cfg_.max_seq()));
    const std::size_t Tn = 2 * k + 1, H = cfg_.hidden;
    ad::Graph<T>& g = s.graph();
    ad::Var<T> x = in_(s, g.constant(prompt_tokens<T>(batch)));
    if (perm) {
      PEARL_REQUIRE(perm->shape() == (Shape{B, k, k}), ShapeError,
                    "soft permutation of shape " + to_string(perm->shape()) + " for a batch of " +
                        std::to_string(B) + " prompts with " + std::to_string(k) + " demonstrations");
      std::vector<std::size_t> demo_pos(2 * k);
      for (std::size_t i = 0; i < 2 * k; ++i) demo_pos[i] = i;
      ad::Var<T> blocks = ad::reshape(ad::select_axis1(x, demo_pos), {B, k, 2 * H});
      ad::Var<T> mixed = ad::reshape(apply_soft(*perm, blocks), {B, 2 * k, H});
      x = ad::concat_axis1(mixed, ad::select_axis1(x, {2 * k}));
    }
    std::vector<std::size_t> positions(Tn);
    for (std::size_t t = 0; t < Tn; ++t) positions[t] = t;
    x = ad::add_broadcast(x, ad::embedding(s(pos_), positions));
    for (const auto& block : blocks_) x = block(s, x);
    ad::Var<T> y = head_(s, ln_f_(s, x));
    std::vector<std::size_t> x_pos(k + 1);
    for (std::size_t i = 0; i <= k; ++i) x_pos[i] = 2 * i;
    return ad::reshape(ad::select_axis1(y, x_pos), {B, k + 1});
  }

  /// Inference without gradients. Returns [B, k + 1].
  Tensor<T> predict(const std::vector<PromptInstance>& batch) {
    ad::Graph<T> g;
    ad::Scope<T> s(g, params_, false);
    return forward(s, batch).value();
  }

 private:
  LearnerConfig cfg_;
  ad::ParameterSet<T> params_;
  Linear<T> in_;
  std::size_t pos_ = 0;
  std::vector<Block<T>> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_;
};

}  // namespace pearl::models
