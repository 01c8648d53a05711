#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/attack/attack.hpp"
#include "pearl/core/error.hpp"
#include "pearl/models/learner.hpp"
#include "pearl/models/pnet.hpp"
#include "pearl/permutation/sinkhorn.hpp"
#include "pearl/task/icl_task.hpp"
#include "pearl/training/config.hpp"

namespace pearl::cli {

inline constexpr const char* kRunConfigFormat = "pearl-run-config-v1";
inline constexpr const char* kOutputRootEnv = "PEARL_OUTPUT_ROOT";

struct AttackSettings {
  std::size_t samples = 100;
  std::vector<std::size_t> shots{3, 4, 5};
  std::size_t cap = attack::kDefaultEnumerationCap;
  bool sampled_mu = false;
  std::size_t mu_draws = 720;
  std::size_t threads = 1;
};

/// Everything a command needs. One master seed drives the task, the
/// initializations and every random stream.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::size_t dim = 5;
  std::size_t max_demos = 5;
  models::LearnerConfig learner{};
  models::PNetConfig pnet{};
  training::TrainConfig train{};
  std::size_t checkpoint_every = 1000;
  AttackSettings attack{};

  TaskSpec task() const {
    TaskSpec t;
    t.dim = dim;
    t.max_demos = max_demos;
    t.seed = seed;
    return t;
  }

  models::LearnerConfig learner_config() const {
    models::LearnerConfig c = learner;
    c.dim = dim;
    c.max_demos = max_demos;
    return c;
  }

  models::PNetConfig pnet_config() const {
    models::PNetConfig c = pnet;
    c.dim = dim;
    c.max_demos = std::max<std::size_t>(2, max_demos);
    return c;
  }

  training::TrainConfig train_config() const {
    training::TrainConfig c = train;
    c.seed = seed;
    return c;
  }

  void validate() const {
    task().validate();
    learner_config().validate();
    if (train.regime == training::Regime::pearl) pnet_config().validate();
    train_config().validate(max_demos);
    PEARL_REQUIRE(!output_dir.empty(), ConfigError, "output_dir must not be empty");
    PEARL_REQUIRE(attack.samples >= 1, ConfigError, "attack.samples must be >= 1");
    PEARL_REQUIRE(!attack.shots.empty(), ConfigError, "attack.shots must not be empty");
    for (std::size_t k : attack.shots)
      PEARL_REQUIRE(k >= 1 && k <= max_demos, ConfigError,
                    "attack shot count " + std::to_string(k) + " outside [1, max_demos]");
    PEARL_REQUIRE(attack.mu_draws >= 1, ConfigError, "attack.mu_draws must be >= 1");
    PEARL_REQUIRE(attack.threads >= 1, ConfigError, "attack.threads must be >= 1");
  }
};

namespace detail {

/// Reads the keys of one JSON object and rejects any key it was not asked for.
class Fields {
 public:
  Fields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    PEARL_REQUIRE(j_.is_object(), ConfigError, where("") + " must be an object");
  }

  template <std::unsigned_integral U>
  void read(const char* key, U& out) {
    if (const auto* v = find(key)) {
      PEARL_REQUIRE(v->is_number_unsigned(), ConfigError,
                    where(key) + " must be a non-negative integer");
      out = v->get<U>();
    }
  }

  void read(const char* key, double& out) {
    if (const auto* v = find(key)) {
      PEARL_REQUIRE(v->is_number(), ConfigError, where(key) + " must be a number");
      out = v->get<double>();
    }
  }

  void read(const char* key, bool& out) {
    if (const auto* v = find(key)) {
      PEARL_REQUIRE(v->is_boolean(), ConfigError, where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }

  void read(const char* key, std::string& out) {
    if (const auto* v = find(key)) {
      PEARL_REQUIRE(v->is_string(), ConfigError, where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  void read(const char* key, std::vector<std::size_t>& out) {
    if (const auto* v = find(key)) {
      PEARL_REQUIRE(v->is_array(), ConfigError, where(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) {
        PEARL_REQUIRE(e.is_number_unsigned(), ConfigError,
                      where(key) + " must hold non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }

  const nlohmann::json* section(const char* key) { return find(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      PEARL_REQUIRE(seen_.count(key) != 0, ConfigError, "unknown configuration key " + where(key));
  }

 private:
  const nlohmann::json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "configuration" : "'" + path_ + "'";
    return "'" + (path_.empty() ? key : path_ + "." + key) + "'";
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_learner(const nlohmann::json& j, const std::string& path,
                         models::LearnerConfig& c) {
  Fields f(j, path);
  f.read("layers", c.layers);
  f.read("heads", c.heads);
  f.read("hidden", c.hidden);
  f.read("mlp_ratio", c.mlp_ratio);
  f.finish();
}

inline void read_pnet(const nlohmann::json& j, const std::string& path, models::PNetConfig& c) {
  Fields f(j, path);
  f.read("layers", c.layers);
  f.read("heads", c.heads);
  f.read("hidden", c.hidden);
  f.read("mlp_ratio", c.mlp_ratio);
  f.read("relation_init", c.relation_init);
  f.finish();
}

inline void read_sinkhorn(const nlohmann::json& j, const std::string& path, SinkhornConfig& c) {
  Fields f(j, path);
  f.read("iterations", c.iterations);
  f.read("temperature", c.temperature);
  f.read("noise_scale", c.noise_scale);
  f.read("epsilon", c.epsilon);
  f.finish();
}

inline void read_train(const nlohmann::json& j, const std::string& path, RunConfig& rc) {
  Fields f(j, path);
  training::TrainConfig& c = rc.train;
  std::string regime(training::to_string(c.regime));
  f.read("regime", regime);
  c.regime = training::parse_regime(regime);
  f.read("eta_theta", c.eta_theta);
  f.read("eta_phi", c.eta_phi);
  f.read("weight_decay", c.weight_decay);
  f.read("inner_steps", c.inner_steps);
  f.read("beta", c.beta);
  f.read("batch_size", c.batch_size);
  f.read("total_steps", c.total_steps);
  f.read("curriculum", c.curriculum);
  f.read("copies", c.copies);
  f.read("exhaustive_copies", c.exhaustive_copies);
  f.read("force_identity", c.force_identity);
  f.read("freeze_learner", c.freeze_learner);
  f.read("checkpoint_every", rc.checkpoint_every);
  if (const auto* s = f.section("sinkhorn")) read_sinkhorn(*s, path + ".sinkhorn", c.sinkhorn);
  f.finish();
}

inline void read_attack(const nlohmann::json& j, const std::string& path, AttackSettings& a) {
  Fields f(j, path);
  f.read("samples", a.samples);
  f.read("shots", a.shots);
  f.read("cap", a.cap);
  f.read("sampled_mu", a.sampled_mu);
  f.read("mu_draws", a.mu_draws);
  f.read("threads", a.threads);
  f.finish();
}

}  // namespace detail

/// Strict parse: every key must be known and correctly typed. Missing keys
/// keep their defaults.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig rc;
  detail::Fields f(j, "");
  std::string format = kRunConfigFormat;
  f.read("format", format);
  PEARL_REQUIRE(format == kRunConfigFormat, ConfigError,
                "unsupported configuration format '" + format + "'");
  f.read("seed", rc.seed);
  f.read("output_dir", rc.output_dir);
  if (const auto* t = f.section("task")) {
    detail::Fields tf(*t, "task");
    tf.read("dim", rc.dim);
    tf.read("max_demos", rc.max_demos);
    tf.finish();
  }
  if (const auto* s = f.section("learner")) detail::read_learner(*s, "learner", rc.learner);
  if (const auto* s = f.section("pnet")) detail::read_pnet(*s, "pnet", rc.pnet);
  if (const auto* s = f.section("train")) detail::read_train(*s, "train", rc);
  if (const auto* s = f.section("attack")) detail::read_attack(*s, "attack", rc.attack);
  f.finish();
  rc.validate();
  return rc;
}

inline RunConfig parse_run_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

/// Settings that determine a training trace. Keys are sorted, so the dump is canonical.
inline nlohmann::json training_identity(const RunConfig& rc) {
  const training::TrainConfig& t = rc.train;
  const SinkhornConfig& s = t.sinkhorn;
  return {{"seed", rc.seed},
          {"task", {{"dim", rc.dim}, {"max_demos", rc.max_demos}}},
          {"learner",
           {{"layers", rc.learner.layers},
            {"heads", rc.learner.heads},
            {"hidden", rc.learner.hidden},
            {"mlp_ratio", rc.learner.mlp_ratio}}},
          {"pnet",
           {{"layers", rc.pnet.layers},
            {"heads", rc.pnet.heads},
            {"hidden", rc.pnet.hidden},
            {"mlp_ratio", rc.pnet.mlp_ratio},
            {"relation_init", rc.pnet.relation_init}}},
          {"train",
           {{"regime", training::to_string(t.regime)},
            {"eta_theta", t.eta_theta},
            {"eta_phi", t.eta_phi},
            {"weight_decay", t.weight_decay},
            {"inner_steps", t.inner_steps},
            {"beta", t.beta},
            {"batch_size", t.batch_size},
            {"total_steps", t.total_steps},
            {"curriculum", t.curriculum},
            {"copies", t.copies},
            {"exhaustive_copies", t.exhaustive_copies},
            {"force_identity", t.force_identity},
            {"freeze_learner", t.freeze_learner},
            {"sinkhorn",
             {{"iterations", s.iterations},
              {"temperature", s.temperature},
              {"noise_scale", s.noise_scale},
              {"epsilon", s.epsilon}}}}}};
}

/// Full config echo; parse_run_config(to_json(rc)) reproduces rc.
inline nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j = training_identity(rc);
  j["format"] = kRunConfigFormat;
  j["output_dir"] = rc.output_dir;
  j["train"]["checkpoint_every"] = rc.checkpoint_every;
  j["attack"] = {{"samples", rc.attack.samples},
                 {"shots", rc.attack.shots},
                 {"cap", rc.attack.cap},
                 {"sampled_mu", rc.attack.sampled_mu},
                 {"mu_draws", rc.attack.mu_draws},
                 {"threads", rc.attack.threads}};
  return j;
}

/// 64-bit FNV-1a of the canonical training identity, as 16 hex digits.
inline std::string config_hash(const RunConfig& rc) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : training_identity(rc).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Relative paths are placed under $PEARL_OUTPUT_ROOT when it is set.
inline std::filesystem::path resolve_output(const std::filesystem::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0')
    return std::filesystem::path(root) / p;
  return p;
}

}  // namespace pearl::cli
