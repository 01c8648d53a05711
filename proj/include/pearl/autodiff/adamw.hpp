#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pearl/autodiff/graph.hpp"
#include "pearl/core/error.hpp"

namespace pearl::ad {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    PEARL_REQUIRE(lr > 0.0, ConfigError, "AdamW learning rate must be positive");
    PEARL_REQUIRE(weight_decay >= 0.0, ConfigError, "AdamW weight decay must be >= 0");
    PEARL_REQUIRE(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ConfigError,
                  "AdamW betas must lie in [0, 1)");
  }
};

/// First/second moment estimates for one tensor.
template <class T>
struct AdamWState {
  std::vector<T> m;
  std::vector<T> v;
  std::uint64_t step = 0;
};

/// One AdamW update with decoupled weight decay:
///   p <- p - lr * wd * p
///   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
template <class T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamWState<T>& state,
                const AdamWOptions& opt) {
  opt.validate();
  PEARL_REQUIRE(params.size() == grads.size(), ShapeError,
                "AdamW: parameter and gradient sizes differ");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), T{0});
    state.v.assign(params.size(), T{0});
  }
  PEARL_REQUIRE(state.m.size() == params.size() && state.v.size() == params.size(),
                ShapeError, "AdamW: optimizer state does not match parameter size");
  ++state.step;
  const T b1 = static_cast<T>(opt.beta1);
  const T b2 = static_cast<T>(opt.beta2);
  const T lr = static_cast<T>(opt.lr);
  const T decay = static_cast<T>(1.0 - opt.lr * opt.weight_decay);
  const T bias1 = static_cast<T>(1.0 - std::pow(opt.beta1, static_cast<double>(state.step)));
  const T bias2 = static_cast<T>(1.0 - std::pow(opt.beta2, static_cast<double>(state.step)));
  const T eps = static_cast<T>(opt.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    PEARL_REQUIRE(std::isfinite(g), NumericError, "AdamW: non-finite gradient");
    state.m[i] = b1 * state.m[i] + (T{1} - b1) * g;
    state.v[i] = b2 * state.v[i] + (T{1} - b2) * g * g;
    const T m_hat = state.m[i] / bias1;
    const T v_hat = state.v[i] / bias2;
    params[i] = params[i] * decay - lr * m_hat / (std::sqrt(v_hat) + eps);
  }
}

/// AdamW over a whole ParameterSet. Consumes and clears accumulated gradients.
template <class T>
class AdamW {
 public:
  AdamW(ParameterSet<T>& params, AdamWOptions options)
      : params_(&params), options_(options), states_(params.size()) {
    options_.validate();
  }

  void step() {
    PEARL_REQUIRE(states_.size() == params_->size(), ShapeError,
                  "AdamW bound to a different parameter set");
    for (std::size_t i = 0; i < params_->size(); ++i) {
      Parameter<T>& p = (*params_)[i];
      if (p.grad.size() != p.value.size()) p.zero_grad();
      adamw_step<T>(p.value.values(), p.grad.values(), states_[i], options_);
    }
    params_->zero_grad();
  }

  void rebind(ParameterSet<T>& params) {
    PEARL_REQUIRE(params.size() == states_.size(), ShapeError,
                  "AdamW rebind: parameter count changed");
    params_ = &params;
  }

  const AdamWOptions& options() const { return options_; }
  std::uint64_t steps_taken() const { return states_.empty() ? 0 : states_.front().step; }
  std::vector<AdamWState<T>>& states() { return states_; }
  const std::vector<AdamWState<T>>& states() const { return states_; }

 private:
  ParameterSet<T>* params_;
  AdamWOptions options_;
  std::vector<AdamWState<T>> states_;
};

}  // namespace pearl::ad
