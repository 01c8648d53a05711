#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/models/learner.hpp"
#include "pearl/models/pnet.hpp"
#include "pearl/permutation/assignment.hpp"
#include "pearl/permutation/hard_permutation.hpp"
#include "pearl/permutation/sinkhorn.hpp"
#include "pearl/task/icl_task.hpp"

namespace pearl::attack {

/// Largest demonstration count for exhaustive search (6! = 720 orders).
inline constexpr std::size_t kDefaultEnumerationCap = 6;

/// Samples with mu at or below this are left out of ASR.
inline constexpr double kMuFloor = 1e-12;

/// Threshold grid 0.1, 0.2, ..., 0.9.
inline std::array<double, 9> delta_grid() {
  std::array<double, 9> g{};
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i + 1) / 10.0;
  return g;
}

/// Normalized query error of the learner on every instance of `batch`.
template <class T>
std::vector<double> query_errors(models::Learner<T>& learner,
                                 const std::vector<PromptInstance>& batch) {
  const Tensor<T> pred = learner.predict(batch);
  const std::size_t k = batch.front().size();
  std::vector<double> out(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b)
    out[b] = normalized_error(static_cast<double>(pred[b * (k + 1) + k]), batch[b]);
  return out;
}

struct ExhaustiveResult {
  double mu = 0.0;
  double omega = 0.0;
  double best = 0.0;
  double worst = 0.0;
  HardPermutation argmax;
  std::size_t evaluations = 0;
};

/// Mean of a multiset of errors, summed in ascending order so the result does
/// not depend on the order the errors were produced in.
inline double ordered_mean(std::vector<double> v) {
  PEARL_REQUIRE(!v.empty(), ConfigError, "mean of no errors");
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

inline ExhaustiveResult summarize_errors(const std::vector<double>& err,
                                         const std::vector<HardPermutation>& perms) {
  ExhaustiveResult r;
  r.evaluations = err.size();
  r.best = std::numeric_limits<double>::infinity();
  r.worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < err.size(); ++i) {
    r.best = std::min(r.best, err[i]);
    if (err[i] > r.worst) {
      r.worst = err[i];
      r.argmax = perms[i];
    }
  }
  r.mu = ordered_mean(err);
  r.omega = r.worst;
  return r;
}

/// Error under every order of the demonstrations. mu is the mean, omega = worst
/// the maximum; argmax is the first order (lexicographically) attaining it.
template <class T>
ExhaustiveResult exhaustive_attack(models::Learner<T>& learner, const PromptInstance& instance,
                                   std::size_t cap = kDefaultEnumerationCap) {
  const auto perms = enumerate_permutations(instance.size(), cap);
  std::vector<PromptInstance> batch;
  batch.reserve(perms.size());
  for (const auto& p : perms) batch.push_back(permuted(instance, p));
  return summarize_errors(query_errors(learner, batch), perms);
}

/// Monte-Carlo version for demonstration counts above the enumeration cap:
/// mean, min and max over `draws` uniform orders.
template <class T>
ExhaustiveResult sampled_attack(models::Learner<T>& learner, const PromptInstance& instance,
                                std::size_t draws, Rng& rng) {
  PEARL_REQUIRE(draws >= 1, ConfigError, "sampled attack needs at least one draw");
  std::vector<HardPermutation> perms;
  std::vector<PromptInstance> batch;
  for (std::size_t i = 0; i < draws; ++i) {
    perms.push_back(HardPermutation::random(instance.size(), rng));
    batch.push_back(permuted(instance, perms.back()));
  }
  return summarize_errors(query_errors(learner, batch), perms);
}

struct NeuralResult {
  double omega = 0.0;
  HardPermutation perm;
};

/// Single-attempt attack: the learner is evaluated once, on the hard rounding
/// of the adversary's proposal.
template <class T>
NeuralResult neural_attack(models::Learner<T>& learner, models::PNet<T>& pnet,
                           const PromptInstance& instance, const SinkhornConfig& cfg, Rng& rng) {
  PEARL_REQUIRE(instance.dim() == pnet.config().dim && instance.dim() == learner.config().dim,
                ShapeError,
                "instance dimension " + std::to_string(instance.dim()) +
                    " does not match the learner/p-net dimension");
  const std::vector<PromptInstance> one{instance};
  const Tensor<T> P = pnet.propose_permutation(one, cfg, rng);
  const std::size_t n = instance.size();
  Tensor<T> block({n, n});
  std::copy(P.data(), P.data() + n * n, block.data());
  NeuralResult r;
  r.perm = round_to_hard(block);
  r.omega = query_errors(learner, {permuted(instance, r.perm)}).front();
  return r;
}

struct AsrResult {
  double value = 0.0;
  std::size_t counted = 0;
  std::size_t excluded = 0;
};

/// Fraction of samples with (omega - mu) / mu >= delta. Samples with
/// mu <= kMuFloor are excluded and counted separately.
inline AsrResult asr(const std::vector<std::pair<double, double>>& mu_omega, double delta) {
  AsrResult r;
  std::size_t hits = 0;
  for (const auto& [mu, omega] : mu_omega) {
    if (!(mu > kMuFloor)) {
      ++r.excluded;
      continue;
    }
    ++r.counted;
    if ((omega - mu) / mu >= delta) ++hits;
  }
  r.value = r.counted == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(r.counted);
  return r;
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers. Each index is
/// handled by exactly one call, so results stored per index do not depend on
/// scheduling. The first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace pearl::attack
