#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <string>
#include <vector>

#include "pearl/autodiff/adamw.hpp"
#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/ops.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/models/learner.hpp"
#include "pearl/models/pnet.hpp"
#include "pearl/permutation/hard_permutation.hpp"
#include "pearl/permutation/sinkhorn.hpp"
#include "pearl/task/icl_task.hpp"
#include "pearl/training/config.hpp"
#include "pearl/training/losses.hpp"

namespace pearl::training {

namespace detail {

inline void require_batch(const std::vector<PromptInstance>& batch) {
  PEARL_REQUIRE(!batch.empty(), ConfigError, "training step on an empty batch");
}

inline double finite_loss(double v, const char* what) {
  PEARL_REQUIRE(std::isfinite(v), NumericError,
                std::string(what) + " is not finite (" + std::to_string(v) + ")");
  return v;
}

/// Builds the loss on a fresh graph, backpropagates and applies one update.
template <class T, class Build>
double descend(ad::ParameterSet<T>& params, ad::AdamW<T>& opt, Build&& build) {
  ad::Graph<T> g;
  ad::Scope<T> s(g, params, true);
  ad::Var<T> loss = build(s);
  const double v = finite_loss(static_cast<double>(loss.value().item()), "training loss");
  params.zero_grad();
  g.backward(loss);
  opt.step();
  return v;
}

inline LossRecord lm_record(double lm, std::size_t shots, Regime regime) {
  LossRecord r;
  r.shots = shots;
  r.lm = lm;
  r.objective = lm;
  r.regime = regime;
  return r;
}

}  // namespace detail

/// One AdamW step on the mean icl_loss of the batch in its sampled order.
template <class T>
LossRecord erm_step(models::Learner<T>& learner, const std::vector<PromptInstance>& batch,
                    ad::AdamW<T>& opt) {
  detail::require_batch(batch);
  const double lm = detail::descend(learner.params(), opt, [&](ad::Scope<T>& s) {
    return lm_loss(s, learner, batch);
  });
  return detail::lm_record(lm, batch.front().size(), Regime::erm);
}

/// Independent uniform orders, one per sample.
inline std::vector<HardPermutation> random_orders(std::size_t count, std::size_t n, Rng& rng) {
  std::vector<HardPermutation> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(HardPermutation::random(n, rng));
  return out;
}

inline std::vector<PromptInstance> shuffled(const std::vector<PromptInstance>& batch, Rng& rng) {
  detail::require_batch(batch);
  const auto orders = random_orders(batch.size(), batch.front().size(), rng);
  std::vector<PromptInstance> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out.push_back(permuted(batch[i], orders[i]));
  return out;
}

/// erm_step after shuffling the demonstrations of every sample.
template <class T>
LossRecord erm_ds_step(models::Learner<T>& learner, const std::vector<PromptInstance>& batch,
                       ad::AdamW<T>& opt, Rng& rng) {
  LossRecord r = erm_step(learner, shuffled(batch, rng), opt);
  r.regime = Regime::erm_ds;
  return r;
}

/// Every sample repeated in `copies` random orders, or in all n! orders when
/// `exhaustive` is set. Copies of sample i are contiguous.
inline std::vector<PromptInstance> mixup_copies(const std::vector<PromptInstance>& batch, Rng& rng,
                                                std::size_t copies, bool exhaustive,
                                                std::size_t cap = 6) {
  detail::require_batch(batch);
  PEARL_REQUIRE(exhaustive || copies >= 1, ConfigError, "erm_im needs copies >= 1");
  const std::size_t n = batch.front().size();
  std::vector<HardPermutation> all;
  if (exhaustive) all = enumerate_permutations(n, cap);
  std::vector<PromptInstance> out;
  for (const auto& p : batch) {
    if (exhaustive) {
      for (const auto& perm : all) out.push_back(permuted(p, perm));
    } else {
      for (std::size_t c = 0; c < copies; ++c) out.push_back(permuted(p, HardPermutation::random(n, rng)));
    }
  }
  return out;
}

/// Mean loss over several demonstration orders per sample, one backward pass.
template <class T>
LossRecord erm_im_step(models::Learner<T>& learner, const std::vector<PromptInstance>& batch,
                       ad::AdamW<T>& opt, Rng& rng, std::size_t copies, bool exhaustive = false) {
  LossRecord r = erm_step(learner, mixup_copies(batch, rng, copies, exhaustive), opt);
  r.regime = Regime::erm_im;
  return r;
}

/// Inputs of one PEARL round: m adversary batches with their Gumbel noise and
/// the batch and noise of the learner step.
template <class T>
struct PearlBatches {
  std::vector<std::vector<PromptInstance>> inner;
  std::vector<Tensor<T>> inner_noise;
  std::vector<PromptInstance> theta;
  Tensor<T> theta_noise;
};

struct PearlResult {
  std::vector<LossRecord> inner;
  LossRecord theta;
};

/// Identity matrices [B, n, n].
template <class T>
Tensor<T> identity_batch(std::size_t B, std::size_t n) {
  Tensor<T> out({B, n, n});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i) out[(b * n + i) * n + i] = T{1};
  return out;
}

/// Mean element-wise entropy of a batch of matrices [B, n, n].
template <class T>
double mean_entropy(const Tensor<T>& P, double epsilon) {
  ad::Graph<T> g;
  return static_cast<double>(ad::mean(entropy(g.constant(P), epsilon)).value().item());
}

/// One ascent step of the adversary on L_lm - beta * L_ent with the learner frozen.
template <class T>
LossRecord adversary_step(models::Learner<T>& learner, models::PNet<T>& pnet, ad::AdamW<T>& opt,
                          const std::vector<PromptInstance>& batch, const Tensor<T>& noise,
                          const TrainConfig& cfg) {
  detail::require_batch(batch);
  ad::Graph<T> g;
  ad::Scope<T> phi(g, pnet.params(), true);
  ad::Scope<T> theta(g, learner.params(), false);
  ad::Var<T> P = pnet.propose(phi, batch, cfg.sinkhorn, noise);
  ad::Var<T> lm = lm_loss(theta, learner, batch, P);
  ad::Var<T> ent = ad::mean(entropy(P, cfg.sinkhorn.epsilon));
  ad::Var<T> objective = ad::sub(lm, ad::scale(ent, static_cast<T>(cfg.beta)));
  LossRecord r;
  r.shots = batch.front().size();
  r.lm = detail::finite_loss(static_cast<double>(lm.value().item()), "L_lm");
  r.ent = detail::finite_loss(static_cast<double>(ent.value().item()), "L_ent");
  r.objective = detail::finite_loss(static_cast<double>(objective.value().item()), "objective");
  r.regime = Regime::pearl;
  pnet.params().zero_grad();
  g.backward(ad::scale(objective, T{-1}));
  opt.step();
  return r;
}

/// Learner descent on L_lm under permutations proposed by the frozen adversary
/// (or identity matrices when `force_identity` is set).
template <class T>
LossRecord pearl_theta_step(models::Learner<T>& learner, models::PNet<T>& pnet, ad::AdamW<T>& opt,
                            const std::vector<PromptInstance>& batch, const Tensor<T>& noise,
                            const TrainConfig& cfg) {
  detail::require_batch(batch);
  const std::size_t B = batch.size(), n = batch.front().size();
  Tensor<T> perm;
  if (cfg.force_identity) {
    perm = identity_batch<T>(B, n);
  } else {
    ad::Graph<T> pg;
    ad::Scope<T> phi(pg, pnet.params(), false);
    perm = pnet.propose(phi, batch, cfg.sinkhorn, noise).value();
  }
  const double ent = detail::finite_loss(mean_entropy(perm, cfg.sinkhorn.epsilon), "L_ent");
  double lm = 0.0;
  if (cfg.freeze_learner) {
    ad::Graph<T> g;
    ad::Scope<T> s(g, learner.params(), false);
    lm = detail::finite_loss(
        static_cast<double>(lm_loss(s, learner, batch, g.constant(perm)).value().item()), "L_lm");
  } else {
    lm = detail::descend(learner.params(), opt, [&](ad::Scope<T>& s) {
      return lm_loss(s, learner, batch, s.graph().constant(perm));
    });
  }
  LossRecord r = detail::lm_record(lm, n, Regime::pearl);
  r.ent = ent;
  r.objective = lm - cfg.beta * ent;
  return r;
}

/// m adversary ascent steps followed by one learner descent step on a fresh
/// batch with fresh proposals.
template <class T>
PearlResult pearl_round(models::Learner<T>& learner, models::PNet<T>& pnet,
                        ad::AdamW<T>& opt_theta, ad::AdamW<T>& opt_phi,
                        const PearlBatches<T>& data, const TrainConfig& cfg) {
  PEARL_REQUIRE(data.inner.size() == cfg.inner_steps && data.inner_noise.size() == cfg.inner_steps,
                ConfigError,
                "pearl round needs " + std::to_string(cfg.inner_steps) + " adversary batches");
  detail::require_batch(data.theta);
  PEARL_REQUIRE(data.theta.front().size() >= 2, ConfigError,
                "pearl round needs at least 2 demonstrations");
  PearlResult out;
  for (std::size_t t = 0; t < cfg.inner_steps; ++t) {
    if (cfg.force_identity) {
      ad::Graph<T> g;
      ad::Scope<T> s(g, learner.params(), false);
      const std::size_t B = data.inner[t].size(), n = data.inner[t].front().size();
      const double lm = detail::finite_loss(
          static_cast<double>(
              lm_loss(s, learner, data.inner[t], g.constant(identity_batch<T>(B, n))).value().item()),
          "L_lm");
      out.inner.push_back(detail::lm_record(lm, n, Regime::pearl));
    } else {
      out.inner.push_back(
          adversary_step(learner, pnet, opt_phi, data.inner[t], data.inner_noise[t], cfg));
    }
  }
  out.theta = pearl_theta_step(learner, pnet, opt_theta, data.theta, data.theta_noise, cfg);
  return out;
}

/// Per-instance icl_loss of the learner on `batch` (no gradients).
template <class T>
std::vector<double> instance_losses(models::Learner<T>& learner,
                                    const std::vector<PromptInstance>& batch) {
  const Tensor<T> pred = learner.predict(batch);
  const std::size_t k = batch.front().size();
  std::vector<double> out;
  out.reserve(batch.size());
  std::vector<double> row(k + 1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t i = 0; i <= k; ++i) row[i] = static_cast<double>(pred[b * (k + 1) + i]);
    const auto targets = batch[b].targets();
    out.push_back(icl_loss(row, targets));
  }
  return out;
}

struct WorstCase {
  double value = 0.0;
  double average = 0.0;
  HardPermutation argmax;
};

/// Exact sup over the convex hull of permuted empirical distributions: the
/// largest mean loss when one order is applied to every instance.
template <class T>
WorstCase dro_worstcase_estimate(models::Learner<T>& learner,
                                 const std::vector<PromptInstance>& instances,
                                 std::size_t cap = 6) {
  detail::require_batch(instances);
  const std::size_t n = instances.front().size();
  const auto perms = enumerate_permutations(n, cap);
  WorstCase out;
  out.value = -std::numeric_limits<double>::infinity();
  for (const auto& perm : perms) {
    std::vector<PromptInstance> batch;
    batch.reserve(instances.size());
    for (const auto& p : instances) batch.push_back(permuted(p, perm));
    const auto losses = instance_losses(learner, batch);
    double mean = 0.0;
    for (double l : losses) mean += l;
    mean /= static_cast<double>(losses.size());
    out.average += mean;
    if (mean > out.value) {
      out.value = mean;
      out.argmax = perm;
    }
  }
  out.average /= static_cast<double>(perms.size());
  return out;
}

/// Flags an adversary whose proposals have become hard while the learner loss
/// no longer moves.
class CollapseDetector {
 public:
  explicit CollapseDetector(std::size_t window = 100, double ent_threshold = 0.01,
                            double flat_tolerance = 0.05)
      : window_(window), threshold_(ent_threshold), flat_(flat_tolerance) {}

  /// Returns true on the step where the condition first holds for a full window.
  bool observe(const LossRecord& r) {
    if (r.ent >= threshold_) {
      lm_.clear();
      fired_ = false;
      return false;
    }
    lm_.push_back(r.lm);
    if (lm_.size() > window_) lm_.pop_front();
    if (fired_ || lm_.size() < window_) return false;
    const auto [lo, hi] = std::minmax_element(lm_.begin(), lm_.end());
    double mean = 0.0;
    for (double v : lm_) mean += v;
    mean /= static_cast<double>(lm_.size());
    if (*hi - *lo <= flat_ * std::max(std::abs(mean), 1e-12)) {
      fired_ = true;
      return true;
    }
    return false;
  }

  std::size_t streak() const { return lm_.size(); }

 private:
  std::size_t window_;
  double threshold_;
  double flat_;
  std::deque<double> lm_;
  bool fired_ = false;
};

}  // namespace pearl::training
