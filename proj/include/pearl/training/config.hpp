#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "pearl/autodiff/adamw.hpp"
#include "pearl/core/error.hpp"
#include "pearl/permutation/sinkhorn.hpp"

namespace pearl::training {

enum class Regime { erm, erm_cl, erm_ds, erm_im, pearl };

inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::erm: return "erm";
    case Regime::erm_cl: return "erm_cl";
    case Regime::erm_ds: return "erm_ds";
    case Regime::erm_im: return "erm_im";
    case Regime::pearl: return "pearl";
  }
  return "unknown";
}

inline Regime parse_regime(std::string_view s) {
  for (Regime r : {Regime::erm, Regime::erm_cl, Regime::erm_ds, Regime::erm_im, Regime::pearl})
    if (to_string(r) == s) return r;
  throw ConfigError("unknown regime '" + std::string(s) +
                    "' (expected erm, erm_cl, erm_ds, erm_im or pearl)");
}

/// Shot schedule: 1 shot at step 0, one more every total_steps / max_shots steps.
/// When disabled every step uses max_shots.
struct Curriculum {
  bool enabled = true;
  std::size_t max_shots = 5;
  std::size_t total_steps = 20000;

  std::size_t shots(std::size_t step) const {
    if (!enabled) return max_shots;
    const std::size_t grown = 1 + (std::min(step, total_steps - 1) * max_shots) / total_steps;
    return std::min(max_shots, grown);
  }
};

struct TrainConfig {
  Regime regime = Regime::erm_cl;
  double eta_theta = 1e-3;
  double eta_phi = 1e-4;
  double weight_decay = 0.0;
  std::size_t inner_steps = 1;
  double beta = 1.0;
  std::size_t batch_size = 64;
  std::size_t total_steps = 20000;
  /// Shot schedule for regimes other than erm (always max shots) and erm_cl
  /// (always scheduled).
  bool curriculum = true;
  /// Augmented copies per sample for erm_im.
  std::size_t copies = 2;
  /// erm_im over every order of each sample instead of random copies.
  bool exhaustive_copies = false;
  /// PEARL with identity permutations in place of P-Net proposals.
  bool force_identity = false;
  /// PEARL with the learner held fixed; only the adversary trains.
  bool freeze_learner = false;
  SinkhornConfig sinkhorn{};
  std::uint64_t seed = 0;

  void validate(std::size_t max_shots) const {
    PEARL_REQUIRE(eta_theta > 0.0 && eta_phi > 0.0, ConfigError, "learning rates must be positive");
    PEARL_REQUIRE(weight_decay >= 0.0, ConfigError, "weight decay must be >= 0");
    PEARL_REQUIRE(inner_steps >= 1, ConfigError, "inner_steps must be >= 1");
    PEARL_REQUIRE(beta >= 0.0, ConfigError, "beta must be >= 0");
    PEARL_REQUIRE(batch_size >= 1, ConfigError, "batch_size must be >= 1");
    PEARL_REQUIRE(total_steps >= 1, ConfigError, "total_steps must be >= 1");
    PEARL_REQUIRE(max_shots >= 1, ConfigError, "max shots must be >= 1");
    PEARL_REQUIRE(regime != Regime::erm_im || exhaustive_copies || copies >= 2, ConfigError,
                  "erm_im needs copies >= 2");
    sinkhorn.validate();
  }

  Curriculum schedule(std::size_t max_shots) const {
    const bool on = regime == Regime::erm_cl || (regime != Regime::erm && curriculum);
    return Curriculum{on, max_shots, total_steps};
  }

  ad::AdamWOptions theta_optimizer() const {
    ad::AdamWOptions o;
    o.lr = eta_theta;
    o.weight_decay = weight_decay;
    return o;
  }

  ad::AdamWOptions phi_optimizer() const {
    ad::AdamWOptions o;
    o.lr = eta_phi;
    o.weight_decay = weight_decay;
    return o;
  }
};

/// One logged update. objective = L_lm - beta * L_ent.
struct LossRecord {
  std::size_t step = 0;
  std::size_t shots = 0;
  double lm = 0.0;
  double ent = 0.0;
  double objective = 0.0;
  Regime regime = Regime::erm;
};

inline void to_json(nlohmann::json& j, const LossRecord& r) {
  j = {{"step", r.step},     {"regime", to_string(r.regime)},
       {"shots", r.shots},   {"L_lm", r.lm},
       {"L_ent", r.ent},     {"objective", r.objective}};
}

inline void from_json(const nlohmann::json& j, LossRecord& r) {
  r.step = j.at("step").get<std::size_t>();
  r.regime = parse_regime(j.at("regime").get<std::string>());
  r.shots = j.at("shots").get<std::size_t>();
  r.lm = j.at("L_lm").get<double>();
  r.ent = j.at("L_ent").get<double>();
  r.objective = j.at("objective").get<double>();
}

}  // namespace pearl::training
