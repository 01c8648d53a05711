#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/permutation/hard_permutation.hpp"

namespace pearl {

// Noiseless linear regression in context: f(x) = w . x with w, x ~ N(0, I_d).

struct TaskSpec {
  std::size_t dim = 5;
  std::size_t max_demos = 5;
  std::uint64_t seed = 0;

  void validate() const {
    PEARL_REQUIRE(dim >= 1, ConfigError, "task dimension must be >= 1");
    PEARL_REQUIRE(max_demos >= 1, ConfigError, "max_demos must be >= 1");
  }
};

struct Demo {
  std::vector<double> x;
  double y = 0.0;

  friend bool operator==(const Demo&, const Demo&) = default;
};

struct PromptInstance {
  std::vector<double> w;
  std::vector<Demo> demos;
  std::vector<double> query_x;
  double query_y = 0.0;

  std::size_t size() const noexcept { return demos.size(); }
  std::size_t dim() const noexcept { return w.size(); }

  /// Labels at every x position: y_1 .. y_k, then the query label.
  std::vector<double> targets() const {
    std::vector<double> t;
    t.reserve(demos.size() + 1);
    for (const auto& d : demos) t.push_back(d.y);
    t.push_back(query_y);
    return t;
  }

  friend bool operator==(const PromptInstance&, const PromptInstance&) = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  PEARL_REQUIRE(a.size() == b.size(), ShapeError, "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Builds an instance from explicit weights and inputs; every label is w . x.
inline PromptInstance make_instance(std::vector<double> w, const std::vector<std::vector<double>>& xs,
                                    std::vector<double> query_x) {
  PEARL_REQUIRE(!w.empty(), ShapeError, "weight vector is empty");
  PEARL_REQUIRE(query_x.size() == w.size(), ShapeError, "query dimension mismatch");
  PromptInstance p;
  for (const auto& x : xs) {
    PEARL_REQUIRE(x.size() == w.size(), ShapeError, "demonstration dimension mismatch");
    p.demos.push_back(Demo{x, dot(w, x)});
  }
  p.query_y = dot(w, query_x);
  p.query_x = std::move(query_x);
  p.w = std::move(w);
  return p;
}

inline std::vector<double> standard_normal(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (auto& x : v) x = rng.normal();
  return v;
}

/// Draws w, then x_1..x_n, then the query input, all i.i.d. N(0, 1).
inline PromptInstance sample_instance(const TaskSpec& spec, std::size_t n_demos, Rng& rng) {
  spec.validate();
  PEARL_REQUIRE(n_demos >= 1 && n_demos <= spec.max_demos, ConfigError,
                "demonstration count " + std::to_string(n_demos) + " outside [1, " +
                    std::to_string(spec.max_demos) + "]");
  std::vector<double> w = standard_normal(spec.dim, rng);
  std::vector<std::vector<double>> xs;
  for (std::size_t i = 0; i < n_demos; ++i) xs.push_back(standard_normal(spec.dim, rng));
  std::vector<double> q = standard_normal(spec.dim, rng);
  return make_instance(std::move(w), xs, std::move(q));
}

/// `count` instances; instance i is drawn from its own stream
/// derive_seed(spec.seed, stream, counter, i), so any instance can be regenerated alone.
inline std::vector<PromptInstance> sample_batch(const TaskSpec& spec, std::size_t n_demos,
                                                std::size_t count, Stream stream,
                                                std::uint64_t counter) {
  std::vector<PromptInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(spec.seed, stream, counter, i));
    out.push_back(sample_instance(spec, n_demos, rng));
  }
  return out;
}

/// Held-out evaluation set. Uses the eval stream, disjoint from training data.
inline std::vector<PromptInstance> sample_eval_set(const TaskSpec& spec, std::size_t n_demos,
                                                   std::size_t count) {
  return sample_batch(spec, n_demos, count, Stream::eval, n_demos);
}

/// Demonstrations reordered so that position i holds demonstration perm[i].
inline PromptInstance permuted(const PromptInstance& p, const HardPermutation& perm) {
  PromptInstance out = p;
  out.demos = apply_hard(perm, p.demos);
  return out;
}

/// Mean squared error over the k + 1 prediction positions.
inline double icl_loss(std::span<const double> preds, std::span<const double> targets) {
  PEARL_REQUIRE(preds.size() == targets.size() && !preds.empty(), ShapeError,
                "icl_loss: " + std::to_string(preds.size()) + " predictions for " +
                    std::to_string(targets.size()) + " targets");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += (preds[i] - targets[i]) * (preds[i] - targets[i]);
  return s / static_cast<double>(preds.size());
}

/// (pred - w . x_query)^2 / d
inline double normalized_error(double pred, std::span<const double> w,
                               std::span<const double> query_x) {
  PEARL_REQUIRE(!w.empty(), ConfigError, "normalized_error needs d >= 1");
  const double e = pred - dot(w, query_x);
  return e * e / static_cast<double>(w.size());
}

inline double normalized_error(double pred, const PromptInstance& p) {
  return normalized_error(pred, p.w, p.query_x);
}

inline void to_json(nlohmann::json& j, const PromptInstance& p) {
  nlohmann::json demos = nlohmann::json::array();
  for (const auto& d : p.demos) demos.push_back({{"x", d.x}, {"y", d.y}});
  j = {{"w", p.w}, {"demos", demos}, {"query_x", p.query_x}, {"query_y", p.query_y}};
}

inline void from_json(const nlohmann::json& j, PromptInstance& p) {
  p.w = j.at("w").get<std::vector<double>>();
  p.demos.clear();
  for (const auto& d : j.at("demos"))
    p.demos.push_back(Demo{d.at("x").get<std::vector<double>>(), d.at("y").get<double>()});
  p.query_x = j.at("query_x").get<std::vector<double>>();
  p.query_y = j.at("query_y").get<double>();
  PEARL_REQUIRE(!p.w.empty() && p.query_x.size() == p.w.size(), ShapeError,
                "instance record has inconsistent dimensions");
  for (const auto& d : p.demos)
    PEARL_REQUIRE(d.x.size() == p.w.size(), ShapeError, "instance record has inconsistent dimensions");
}

/// One JSON record per line.
inline void save_instances(const std::filesystem::path& path, const std::vector<PromptInstance>& set) {
  std::ofstream out(path, std::ios::trunc);
  PEARL_REQUIRE(out.good(), IoError, "cannot write " + path.string());
  for (const auto& p : set) out << nlohmann::json(p).dump() << '\n';
  PEARL_REQUIRE(out.good(), IoError, "write failed for " + path.string());
}

inline std::vector<PromptInstance> load_instances(const std::filesystem::path& path) {
  std::ifstream in(path);
  PEARL_REQUIRE(in.good(), IoError, "cannot open " + path.string());
  std::vector<PromptInstance> set;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      set.push_back(nlohmann::json::parse(line).get<PromptInstance>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed instance record in " + path.string() + ": " + e.what());
    }
  }
  return set;
}

}  // namespace pearl
