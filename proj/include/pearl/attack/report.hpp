#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/attack/attack.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/models/learner.hpp"
#include "pearl/models/pnet.hpp"
#include "pearl/permutation/sinkhorn.hpp"
#include "pearl/task/icl_task.hpp"

namespace pearl::attack {

inline constexpr const char* kReportFormat = "pearl-report-v1";
inline constexpr const char* kDegradation =
    "degradation = (omega - mu) / mu on normalized squared error; omega is the attacked (max) error";

struct AsrPoint {
  double delta = 0.0;
  double asr = 0.0;

  friend bool operator==(const AsrPoint&, const AsrPoint&) = default;
};

struct SampleRecord {
  std::size_t id = 0;
  double mu = 0.0;
  /// Attacked error of the exhaustive attack (equal to worst).
  double omega = 0.0;
  double best = 0.0;
  double worst = 0.0;
  std::vector<std::size_t> argmax;
  std::optional<double> neural_omega;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

/// All samples of one shot count.
struct ShotReport {
  std::size_t shots = 0;
  /// "exact" (enumeration of all orders) or "sampled".
  std::string mu_mode = "exact";
  std::size_t evaluations = 0;
  std::vector<SampleRecord> samples;
  double avg = 0.0;
  double worst = 0.0;
  double best = 0.0;
  std::optional<double> neural_avg;
  std::size_t excluded = 0;
  std::vector<AsrPoint> asr;
  std::vector<AsrPoint> neural_asr;

  friend bool operator==(const ShotReport&, const ShotReport&) = default;
};

struct AttackReport {
  std::string regime;
  nlohmann::json config = nlohmann::json::object();
  std::vector<ShotReport> shots;

  friend bool operator==(const AttackReport&, const AttackReport&) = default;
};

/// Fills the aggregate columns and ASR curves from the per-sample records.
inline void aggregate(ShotReport& r) {
  PEARL_REQUIRE(!r.samples.empty(), ConfigError, "report for " + std::to_string(r.shots) +
                                                     " shots has no samples");
  double mu = 0.0, worst = 0.0, best = 0.0, neural = 0.0;
  bool has_neural = true;
  std::vector<std::pair<double, double>> ex, nn;
  for (const auto& s : r.samples) {
    mu += s.mu;
    worst += s.worst;
    best += s.best;
    ex.emplace_back(s.mu, s.omega);
    if (s.neural_omega) {
      neural += *s.neural_omega;
      nn.emplace_back(s.mu, *s.neural_omega);
    } else {
      has_neural = false;
    }
  }
  const double n = static_cast<double>(r.samples.size());
  r.avg = mu / n;
  r.worst = worst / n;
  r.best = best / n;
  r.neural_avg = has_neural ? std::optional<double>(neural / n) : std::nullopt;
  r.asr.clear();
  r.neural_asr.clear();
  r.excluded = asr(ex, 0.0).excluded;
  for (double d : delta_grid()) {
    r.asr.push_back({d, asr(ex, d).value});
    if (has_neural) r.neural_asr.push_back({d, asr(nn, d).value});
  }
}

struct AttackOptions {
  std::size_t cap = kDefaultEnumerationCap;
  /// Estimate mu by sampling orders when the shot count exceeds the cap.
  bool sampled_mu = false;
  std::size_t mu_draws = 720;
  SinkhornConfig sinkhorn{};
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Exhaustive (or sampled) attack on every instance, plus the neural attack
/// when a P-Net is given. Sample i uses its own random stream, so the report
/// is independent of the thread count.
template <class T>
ShotReport attack_instances(models::Learner<T>& learner, models::PNet<T>* pnet,
                            const std::vector<PromptInstance>& instances,
                            const AttackOptions& opt) {
  PEARL_REQUIRE(!instances.empty(), ConfigError, "attack on an empty instance set");
  const std::size_t n = instances.front().size();
  const bool sampled = n > opt.cap;
  PEARL_REQUIRE(!sampled || opt.sampled_mu, ConfigError,
                std::to_string(n) + " demonstrations exceed the enumeration cap n <= " +
                    std::to_string(opt.cap) + "; enable sampled mu");
  ShotReport r;
  r.shots = n;
  r.mu_mode = sampled ? "sampled" : "exact";
  r.samples.resize(instances.size());
  std::vector<std::size_t> evals(instances.size(), 0);
  parallel_for(instances.size(), opt.threads, [&](std::size_t i) {
    ExhaustiveResult ex;
    if (sampled) {
      Rng rng(derive_seed(opt.seed, Stream::attack, i, 1));
      ex = sampled_attack(learner, instances[i], opt.mu_draws, rng);
    } else {
      ex = exhaustive_attack(learner, instances[i], opt.cap);
    }
    SampleRecord& s = r.samples[i];
    s.id = i;
    s.mu = ex.mu;
    s.omega = ex.omega;
    s.best = ex.best;
    s.worst = ex.worst;
    s.argmax = ex.argmax.indices();
    evals[i] = ex.evaluations;
    if (pnet != nullptr) {
      Rng rng(derive_seed(opt.seed, Stream::attack, i, 0));
      s.neural_omega = neural_attack(learner, *pnet, instances[i], opt.sinkhorn, rng).omega;
    }
  });
  for (std::size_t e : evals) r.evaluations += e;
  aggregate(r);
  return r;
}

inline void to_json(nlohmann::json& j, const AsrPoint& p) { j = {{"delta", p.delta}, {"asr", p.asr}}; }

inline void from_json(const nlohmann::json& j, AsrPoint& p) {
  p.delta = j.at("delta").get<double>();
  p.asr = j.at("asr").get<double>();
}

inline void to_json(nlohmann::json& j, const SampleRecord& s) {
  j = {{"id", s.id},       {"mu", s.mu},       {"omega", s.omega},
       {"best", s.best},   {"worst", s.worst}, {"argmax", s.argmax}};
  if (s.neural_omega) j["neural_omega"] = *s.neural_omega;
}

inline void from_json(const nlohmann::json& j, SampleRecord& s) {
  s.id = j.at("id").get<std::size_t>();
  s.mu = j.at("mu").get<double>();
  s.omega = j.at("omega").get<double>();
  s.best = j.at("best").get<double>();
  s.worst = j.at("worst").get<double>();
  s.argmax = j.at("argmax").get<std::vector<std::size_t>>();
  s.neural_omega = j.contains("neural_omega") ? std::optional<double>(j["neural_omega"].get<double>())
                                              : std::nullopt;
}

inline void to_json(nlohmann::json& j, const ShotReport& r) {
  j = {{"shots", r.shots},
       {"mu_mode", r.mu_mode},
       {"evaluations", r.evaluations},
       {"aggregate", {{"avg", r.avg}, {"worst", r.worst}, {"best", r.best}, {"excluded", r.excluded}}},
       {"asr_curve", r.asr},
       {"samples", r.samples}};
  if (r.neural_avg) {
    j["aggregate"]["neural_avg"] = *r.neural_avg;
    j["neural_asr_curve"] = r.neural_asr;
  }
}

inline void from_json(const nlohmann::json& j, ShotReport& r) {
  r.shots = j.at("shots").get<std::size_t>();
  r.mu_mode = j.at("mu_mode").get<std::string>();
  r.evaluations = j.at("evaluations").get<std::size_t>();
  const auto& a = j.at("aggregate");
  r.avg = a.at("avg").get<double>();
  r.worst = a.at("worst").get<double>();
  r.best = a.at("best").get<double>();
  r.excluded = a.at("excluded").get<std::size_t>();
  r.neural_avg = a.contains("neural_avg") ? std::optional<double>(a["neural_avg"].get<double>())
                                          : std::nullopt;
  r.asr = j.at("asr_curve").get<std::vector<AsrPoint>>();
  r.neural_asr = j.contains("neural_asr_curve") ? j["neural_asr_curve"].get<std::vector<AsrPoint>>()
                                                : std::vector<AsrPoint>{};
  r.samples = j.at("samples").get<std::vector<SampleRecord>>();
}

inline void to_json(nlohmann::json& j, const AttackReport& r) {
  j = {{"format", kReportFormat},
       {"regime", r.regime},
       {"metric", "normalized squared error (lower is better)"},
       {"degradation", kDegradation},
       {"config", r.config},
       {"results", r.shots}};
}

inline void from_json(const nlohmann::json& j, AttackReport& r) {
  PEARL_REQUIRE(j.value("format", "") == kReportFormat, IoError,
                "unsupported report format '" + j.value("format", "") + "'");
  r.regime = j.at("regime").get<std::string>();
  r.config = j.at("config");
  r.shots = j.at("results").get<std::vector<ShotReport>>();
}

inline std::string emit_report(const AttackReport& r) { return nlohmann::json(r).dump(2) + "\n"; }

inline AttackReport parse_report(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<AttackReport>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed report: ") + e.what());
  }
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline constexpr const char* kCsvHeader = "regime,shots,delta,asr,avg,worst,best";

/// One row per (shot count, delta). `neural` selects the neural-attack curve.
inline std::string emit_csv(const AttackReport& r, bool neural = false) {
  std::ostringstream os;
  os << kCsvHeader << '\n';
  for (const auto& s : r.shots) {
    const auto& curve = neural ? s.neural_asr : s.asr;
    for (const auto& p : curve)
      os << r.regime << ',' << s.shots << ',' << format_number(p.delta) << ','
         << format_number(p.asr) << ',' << format_number(s.avg) << ',' << format_number(s.worst)
         << ',' << format_number(s.best) << '\n';
  }
  return os.str();
}

struct SummaryRow {
  std::string regime;
  std::size_t shots = 0;
  double avg = 0.0;
  double worst = 0.0;
  double best = 0.0;
  std::optional<double> neural_avg;
  std::vector<AsrPoint> asr;

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

/// Aggregate avg / worst / best per (regime, shots), in report order.
inline std::vector<SummaryRow> summarize(const std::vector<AttackReport>& reports) {
  PEARL_REQUIRE(!reports.empty(), ConfigError, "summarize needs at least one report");
  std::vector<SummaryRow> rows;
  for (const auto& rep : reports)
    for (const auto& s : rep.shots)
      rows.push_back({rep.regime, s.shots, s.avg, s.worst, s.best, s.neural_avg, s.asr});
  return rows;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  PEARL_REQUIRE(out.good(), IoError, "cannot write " + path.string());
  out << text;
  PEARL_REQUIRE(out.good(), IoError, "write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  PEARL_REQUIRE(in.good(), IoError, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace pearl::attack
