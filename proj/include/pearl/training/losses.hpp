#pragma once

#include <optional>
#include <vector>

#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/ops.hpp"
#include "pearl/models/learner.hpp"
#include "pearl/task/icl_task.hpp"

namespace pearl::training {

/// Labels y_1 .. y_k as [B, k, 1] and query labels as [B, 1, 1].
template <class T>
std::pair<Tensor<T>, Tensor<T>> label_tensors(const std::vector<PromptInstance>& batch) {
  const std::size_t B = batch.size(), k = batch.front().size();
  Tensor<T> demo({B, k, 1}), query({B, 1, 1});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < k; ++i) demo[b * k + i] = static_cast<T>(batch[b].demos[i].y);
    query[b] = static_cast<T>(batch[b].query_y);
  }
  return {std::move(demo), std::move(query)};
}

/// Mean over the batch of icl_loss. With a soft permutation P the whole prompt
/// is permuted, so the demonstration targets become P y.
template <class T>
ad::Var<T> lm_loss(ad::Scope<T>& s, const models::Learner<T>& learner,
                   const std::vector<PromptInstance>& batch, std::optional<ad::Var<T>> perm) {
  ad::Graph<T>& g = s.graph();
  const std::size_t B = batch.size(), k = batch.front().size();
  ad::Var<T> pred = learner.forward(s, batch, perm);
  auto [demo, query] = label_tensors<T>(batch);
  ad::Var<T> y = g.constant(std::move(demo));
  if (perm) y = ad::bmm(*perm, y);
  ad::Var<T> target = ad::reshape(ad::concat_axis1(y, g.constant(std::move(query))), {B, k + 1});
  return ad::mse(pred, target);
}

template <class T>
ad::Var<T> lm_loss(ad::Scope<T>& s, const models::Learner<T>& learner,
                   const std::vector<PromptInstance>& batch) {
  return lm_loss(s, learner, batch, std::optional<ad::Var<T>>{});
}

template <class T>
ad::Var<T> lm_loss(ad::Scope<T>& s, const models::Learner<T>& learner,
                   const std::vector<PromptInstance>& batch, ad::Var<T> perm) {
  return lm_loss(s, learner, batch, std::optional<ad::Var<T>>{perm});
}

}  // namespace pearl::training
