#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "pearl/models/learner.hpp"
#include "pearl/task/icl_task.hpp"

namespace pearl::testing {

struct OracleResult {
  double mu = 0.0;
  double best = 0.0;
  double worst = 0.0;
  std::size_t evaluations = 0;
};

/// Recursive enumeration of every demonstration order: position `depth` takes
/// each unused demonstration in turn. Every order is evaluated on its own.
template <class T>
OracleResult recursive_attack_oracle(models::Learner<T>& learner, const PromptInstance& p) {
  const std::size_t n = p.size();
  std::vector<double> errors;
  std::vector<bool> used(n, false);
  PromptInstance current = p;
  auto visit = [&](auto& self, std::size_t depth) -> void {
    if (depth == n) {
      const Tensor<T> pred = learner.predict({current});
      errors.push_back(normalized_error(static_cast<double>(pred[n]), current));
      return;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      used[j] = true;
      current.demos[depth] = p.demos[j];
      self(self, depth + 1);
      used[j] = false;
    }
  };
  visit(visit, 0);

  OracleResult r;
  r.evaluations = errors.size();
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  double sum = 0.0;
  for (double e : sorted) sum += e;
  r.mu = sum / static_cast<double>(sorted.size());
  r.best = sorted.front();
  r.worst = sorted.back();
  return r;
}

}  // namespace pearl::testing
