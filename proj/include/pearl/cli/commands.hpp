#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/attack/attack.hpp"
#include "pearl/attack/report.hpp"
#include "pearl/autodiff/checkpoint.hpp"
#include "pearl/cli/run_config.hpp"
#include "pearl/core/error.hpp"
#include "pearl/models/learner.hpp"
#include "pearl/models/pnet.hpp"
#include "pearl/training/trainer.hpp"

namespace pearl::cli {

inline constexpr const char* kCompareFormat = "pearl-compare-v1";

/// Training artifacts live directly in the run directory.
inline std::filesystem::path run_dir(const RunConfig& rc) { return resolve_output(rc.output_dir); }

struct TrainCommandOptions {
  std::optional<std::size_t> halt_after;
  std::function<void(const std::string&)> warn = [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  };
};

/// Trains the configured regime, resuming from the run directory when it
/// holds a checkpoint of the same configuration.
inline training::TrainSummary cmd_train(const RunConfig& rc, const TrainCommandOptions& opt = {}) {
  rc.validate();
  const auto dir = run_dir(rc);
  std::filesystem::create_directories(dir);
  attack::write_text(dir / "config.json", to_json(rc).dump(2) + "\n");
  training::TrainerOptions to;
  to.out_dir = dir;
  to.checkpoint_every = rc.checkpoint_every;
  to.halt_after = opt.halt_after;
  to.config_echo = to_json(rc);
  to.config_hash = config_hash(rc);
  to.warn = opt.warn;
  training::Trainer<float> trainer(rc.task(), rc.learner_config(), rc.pnet_config(),
                                   rc.train_config(), to);
  return trainer.run();
}

struct AttackCommandOptions {
  std::filesystem::path learner_checkpoint;
  std::optional<std::filesystem::path> pnet_checkpoint;
  /// Defaults to <output_dir>/attack.
  std::optional<std::filesystem::path> out_dir;
  /// Forces serial evaluation.
  bool deterministic = false;
};

namespace detail {

inline nlohmann::json checkpoint_summary(const ad::CheckpointData& c) {
  return {{"role", c.meta.value("role", "")},
          {"step", c.meta.value("step", std::size_t{0})},
          {"regime", c.meta.value("regime", "")},
          {"config_hash", c.meta.value("config_hash", "")}};
}

inline void check_dims(const ad::CheckpointData& c, const RunConfig& rc, const std::string& what) {
  const auto it = c.meta.find("config");
  if (it == c.meta.end() || !it->contains("task")) return;
  const auto& task = (*it)["task"];
  const std::size_t dim = task.value("dim", rc.dim);
  const std::size_t demos = task.value("max_demos", rc.max_demos);
  PEARL_REQUIRE(dim == rc.dim && demos == rc.max_demos, ShapeError,
                what + " checkpoint was trained for dim " + std::to_string(dim) + " and " +
                    std::to_string(demos) + " demonstrations, the configuration has dim " +
                    std::to_string(rc.dim) + " and " + std::to_string(rc.max_demos));
}

}  // namespace detail

/// Exhaustive attack (plus the neural attack when a P-Net checkpoint is given)
/// on the held-out set of every configured shot count. Writes report.json,
/// asr.csv and, with a P-Net, neural_asr.csv.
inline attack::AttackReport cmd_attack(const RunConfig& rc, const AttackCommandOptions& opt) {
  rc.validate();
  models::Learner<float> learner(rc.learner_config(), rc.seed);
  const ad::CheckpointData lc = ad::read_checkpoint(opt.learner_checkpoint);
  detail::check_dims(lc, rc, "learner");
  ad::restore_parameters(lc, learner.params());

  std::optional<models::PNet<float>> pnet;
  nlohmann::json pnet_meta = nullptr;
  if (opt.pnet_checkpoint) {
    pnet.emplace(rc.pnet_config(), rc.seed);
    const ad::CheckpointData pc = ad::read_checkpoint(*opt.pnet_checkpoint);
    detail::check_dims(pc, rc, "p-net");
    ad::restore_parameters(pc, pnet->params());
    pnet_meta = detail::checkpoint_summary(pc);
  }

  attack::AttackReport report;
  report.regime = lc.meta.value("regime", std::string(training::to_string(rc.train.regime)));
  report.config = {{"run", to_json(rc)},
                   {"config_hash", config_hash(rc)},
                   {"learner_checkpoint", detail::checkpoint_summary(lc)},
                   {"pnet_checkpoint", pnet_meta}};
  attack::AttackOptions ao;
  ao.cap = rc.attack.cap;
  ao.sampled_mu = rc.attack.sampled_mu;
  ao.mu_draws = rc.attack.mu_draws;
  ao.sinkhorn = rc.train.sinkhorn;
  ao.seed = rc.seed;
  ao.threads = opt.deterministic ? 1 : rc.attack.threads;
  const TaskSpec task = rc.task();
  for (std::size_t k : rc.attack.shots) {
    const auto instances = sample_eval_set(task, k, rc.attack.samples);
    report.shots.push_back(
        attack::attack_instances(learner, pnet ? &*pnet : nullptr, instances, ao));
  }

  const auto dir = opt.out_dir ? resolve_output(*opt.out_dir) : run_dir(rc) / "attack";
  attack::write_text(dir / "report.json", attack::emit_report(report));
  attack::write_text(dir / "asr.csv", attack::emit_csv(report));
  if (pnet) attack::write_text(dir / "neural_asr.csv", attack::emit_csv(report, true));
  return report;
}

struct CompareRow {
  std::string label;
  std::string regime;
  std::size_t shots = 0;
  double avg = 0.0;
  double worst = 0.0;
  double best = 0.0;
  double gap = 0.0;
  double asr_half = 0.0;
  /// Differences to the first report at the same shot count.
  double d_avg = 0.0;
  double d_worst = 0.0;
  double d_best = 0.0;
  double d_gap = 0.0;
  double d_asr_half = 0.0;
};

struct Comparison {
  std::vector<CompareRow> rows;
  std::string table_csv;
  std::string asr_vs_delta_csv;
  std::string asr_vs_shots_csv;
  nlohmann::json document;
};

namespace detail {

inline double asr_at(const attack::ShotReport& s, double delta) {
  for (const auto& p : s.asr)
    if (std::abs(p.delta - delta) < 1e-12) return p.asr;
  throw ConfigError("report for " + std::to_string(s.shots) + " shots has no ASR at delta " +
                    attack::format_number(delta));
}

inline nlohmann::json task_of(const attack::AttackReport& r) {
  const auto run = r.config.find("run");
  if (run == r.config.end() || !run->contains("task")) return nullptr;
  return (*run)["task"];
}

inline std::vector<std::string> labels_for(const std::vector<attack::AttackReport>& reports) {
  std::map<std::string, std::size_t> count, used;
  for (const auto& r : reports) ++count[r.regime];
  std::vector<std::string> out;
  for (const auto& r : reports) {
    const std::size_t i = ++used[r.regime];
    out.push_back(count[r.regime] > 1 ? r.regime + "#" + std::to_string(i) : r.regime);
  }
  return out;
}

}  // namespace detail

/// Merges reports of the same task and shot counts into a regime-by-regime
/// table and two ASR plot tables.
inline Comparison compare_reports(const std::vector<attack::AttackReport>& reports) {
  PEARL_REQUIRE(reports.size() >= 2, ConfigError, "compare needs at least two reports");
  const auto& base = reports.front();
  std::vector<std::size_t> shot_set;
  for (const auto& s : base.shots) shot_set.push_back(s.shots);
  for (std::size_t i = 1; i < reports.size(); ++i) {
    PEARL_REQUIRE(detail::task_of(reports[i]) == detail::task_of(base), ConfigError,
                  "incompatible reports: report " + std::to_string(i) +
                      " was produced for a different task");
    std::vector<std::size_t> other;
    for (const auto& s : reports[i].shots) other.push_back(s.shots);
    PEARL_REQUIRE(other == shot_set, ConfigError,
                  "incompatible reports: report " + std::to_string(i) +
                      " covers different shot counts");
  }

  const auto labels = detail::labels_for(reports);
  Comparison c;
  std::ostringstream table, by_delta, by_shots;
  table << "label,regime,shots,avg,worst,best,gap,asr_0.5,d_avg,d_worst,d_best,d_gap,d_asr_0.5\n";
  by_delta << "label,regime,shots,delta,asr\n";
  by_shots << "label,regime,delta,shots,asr\n";
  const auto fmt = attack::format_number;
  for (std::size_t r = 0; r < reports.size(); ++r) {
    for (std::size_t k = 0; k < shot_set.size(); ++k) {
      const auto& s = reports[r].shots[k];
      const auto& b = base.shots[k];
      CompareRow row{labels[r], reports[r].regime, s.shots, s.avg, s.worst, s.best,
                     s.worst - s.avg, detail::asr_at(s, 0.5)};
      row.d_avg = s.avg - b.avg;
      row.d_worst = s.worst - b.worst;
      row.d_best = s.best - b.best;
      row.d_gap = row.gap - (b.worst - b.avg);
      row.d_asr_half = row.asr_half - detail::asr_at(b, 0.5);
      table << row.label << ',' << row.regime << ',' << row.shots << ',' << fmt(row.avg) << ','
            << fmt(row.worst) << ',' << fmt(row.best) << ',' << fmt(row.gap) << ','
            << fmt(row.asr_half) << ',' << fmt(row.d_avg) << ',' << fmt(row.d_worst) << ','
            << fmt(row.d_best) << ',' << fmt(row.d_gap) << ',' << fmt(row.d_asr_half) << '\n';
      for (const auto& p : s.asr)
        by_delta << row.label << ',' << row.regime << ',' << s.shots << ',' << fmt(p.delta) << ','
                 << fmt(p.asr) << '\n';
      c.rows.push_back(row);
    }
    for (double d : attack::delta_grid())
      for (const auto& s : reports[r].shots)
        by_shots << labels[r] << ',' << reports[r].regime << ',' << fmt(d) << ',' << s.shots << ','
                 << fmt(detail::asr_at(s, d)) << '\n';
  }
  c.table_csv = table.str();
  c.asr_vs_delta_csv = by_delta.str();
  c.asr_vs_shots_csv = by_shots.str();

  nlohmann::json sources = nlohmann::json::array();
  for (std::size_t r = 0; r < reports.size(); ++r)
    sources.push_back({{"label", labels[r]},
                       {"regime", reports[r].regime},
                       {"config", reports[r].config}});
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : c.rows)
    rows.push_back({{"label", row.label},
                    {"regime", row.regime},
                    {"shots", row.shots},
                    {"avg", row.avg},
                    {"worst", row.worst},
                    {"best", row.best},
                    {"gap", row.gap},
                    {"asr_0.5", row.asr_half},
                    {"d_avg", row.d_avg},
                    {"d_worst", row.d_worst},
                    {"d_best", row.d_best},
                    {"d_gap", row.d_gap},
                    {"d_asr_0.5", row.d_asr_half}});
  c.document = {{"format", kCompareFormat},
                {"degradation", attack::kDegradation},
                {"baseline", labels.front()},
                {"sources", sources},
                {"rows", rows}};
  return c;
}

/// Reads the reports, compares them and writes comparison.json,
/// comparison.csv, asr_vs_delta.csv and asr_vs_shots.csv into `out_dir`.
inline Comparison cmd_compare(const std::vector<std::filesystem::path>& report_files,
                              const std::filesystem::path& out_dir) {
  std::vector<attack::AttackReport> reports;
  for (const auto& f : report_files) reports.push_back(attack::parse_report(attack::read_text(f)));
  Comparison c = compare_reports(reports);
  const auto dir = resolve_output(out_dir);
  attack::write_text(dir / "comparison.json", c.document.dump(2) + "\n");
  attack::write_text(dir / "comparison.csv", c.table_csv);
  attack::write_text(dir / "asr_vs_delta.csv", c.asr_vs_delta_csv);
  attack::write_text(dir / "asr_vs_shots.csv", c.asr_vs_shots_csv);
  return c;
}

/// Process exit code for an error escaping a command.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return 2;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const std::filesystem::filesystem_error*>(&e))
    return 4;
  return 1;
}

}  // namespace pearl::cli
