#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/autodiff/adamw.hpp"
#include "pearl/autodiff/checkpoint.hpp"
#include "pearl/core/error.hpp"
#include "pearl/core/rng.hpp"
#include "pearl/models/learner.hpp"
#include "pearl/models/pnet.hpp"
#include "pearl/permutation/sinkhorn.hpp"
#include "pearl/task/icl_task.hpp"
#include "pearl/training/config.hpp"
#include "pearl/training/steps.hpp"

namespace pearl::training {

inline constexpr const char* kTrainStateFormat = "pearl-train-state-v1";

/// File layout of a training run directory.
struct RunFiles {
  std::filesystem::path dir;

  std::filesystem::path log() const { return dir / "loss_log.jsonl"; }
  std::filesystem::path learner() const { return dir / "learner.ckpt.json"; }
  std::filesystem::path pnet() const { return dir / "pnet.ckpt.json"; }
  std::filesystem::path state() const { return dir / "train_state.json"; }
};

struct TrainerOptions {
  std::filesystem::path out_dir;
  /// Checkpoint interval in steps; 0 writes only the final checkpoint.
  std::size_t checkpoint_every = 1000;
  /// Stop (with a checkpoint) after this many steps of the current invocation.
  std::optional<std::size_t> halt_after;
  /// Embedded in every artifact.
  nlohmann::json config_echo = nlohmann::json::object();
  /// Compared on resume; a mismatch aborts.
  std::string config_hash;
  std::function<void(const std::string&)> warn = [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  };
};

struct TrainSummary {
  std::size_t start_step = 0;
  std::size_t end_step = 0;
  bool completed = false;
  std::size_t warnings = 0;
  std::optional<LossRecord> last;
};

/// Gumbel noise [B, n, n] for update `counter` of a run.
template <class T>
Tensor<T> step_noise(const TrainConfig& cfg, std::size_t B, std::size_t n, std::uint64_t counter) {
  Rng rng(derive_seed(cfg.seed, Stream::noise, counter));
  return gumbel_sample<T>(Shape{B, n, n}, cfg.sinkhorn.noise_scale, rng);
}

/// Adversary batches come from their own stream; the learner batch of step s
/// is the same batch every other regime trains on at step s.
template <class T>
PearlBatches<T> pearl_batches(const TaskSpec& task, const TrainConfig& cfg, std::size_t step,
                              std::size_t shots) {
  const std::size_t m = cfg.inner_steps, B = cfg.batch_size;
  PearlBatches<T> out;
  for (std::size_t t = 0; t < m; ++t) {
    out.inner.push_back(sample_batch(task, shots, B, Stream::adversary, step * m + t));
    out.inner_noise.push_back(step_noise<T>(cfg, B, shots, step * (m + 1) + t));
  }
  out.theta = sample_batch(task, shots, B, Stream::data, step);
  out.theta_noise = step_noise<T>(cfg, B, shots, step * (m + 1) + m);
  return out;
}

/// Runs one regime from step 0 (or from the last checkpoint in the run
/// directory) to total_steps, appending one log line per step.
template <class T = float>
class Trainer {
 public:
  Trainer(const TaskSpec& task, const models::LearnerConfig& lc, const models::PNetConfig& pc,
          const TrainConfig& tc, TrainerOptions options)
      : task_(task),
        cfg_(tc),
        opts_(std::move(options)),
        files_{opts_.out_dir},
        learner_(lc, tc.seed),
        opt_theta_(learner_.params(), tc.theta_optimizer()) {
    task_.validate();
    cfg_.validate(task_.max_demos);
    PEARL_REQUIRE(lc.dim == task_.dim && lc.max_demos >= task_.max_demos, ConfigError,
                  "learner configuration does not fit the task");
    if (cfg_.regime == Regime::pearl) {
      PEARL_REQUIRE(pc.dim == task_.dim && pc.max_demos >= task_.max_demos, ConfigError,
                    "p-net configuration does not fit the task");
      pnet_ = std::make_unique<models::PNet<T>>(pc, tc.seed);
      opt_phi_ = std::make_unique<ad::AdamW<T>>(pnet_->params(), tc.phi_optimizer());
    }
  }

  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  models::Learner<T>& learner() { return learner_; }
  models::PNet<T>* pnet() { return pnet_.get(); }
  const RunFiles& files() const { return files_; }
  std::size_t next_step() const { return next_; }

  TrainSummary run() {
    std::filesystem::create_directories(files_.dir);
    resume();
    TrainSummary summary;
    summary.start_step = next_;
    const Curriculum schedule = cfg_.schedule(task_.max_demos);
    std::ofstream log(files_.log(), std::ios::app);
    PEARL_REQUIRE(log.good(), IoError, "cannot open " + files_.log().string());
    std::size_t done = 0;
    while (next_ < cfg_.total_steps) {
      if (opts_.halt_after && done >= *opts_.halt_after) break;
      const std::size_t step = next_;
      LossRecord r = train_step(step, schedule.shots(step));
      r.step = step;
      r.regime = cfg_.regime;
      log << nlohmann::json(r).dump() << '\n';
      log.flush();
      PEARL_REQUIRE(log.good(), IoError, "write failed for " + files_.log().string());
      if (cfg_.regime == Regime::pearl && r.shots >= 2 && collapse_.observe(r)) {
        ++summary.warnings;
        opts_.warn("adversary collapse at step " + std::to_string(step) +
                   ": mean L_ent below 0.01 for 100 steps with flat L_lm");
      }
      summary.last = r;
      ++next_;
      ++done;
      const bool periodic = opts_.checkpoint_every > 0 && next_ % opts_.checkpoint_every == 0;
      if (periodic || next_ == cfg_.total_steps) save();
    }
    if (next_ < cfg_.total_steps && done > 0) save();
    summary.end_step = next_;
    summary.completed = next_ == cfg_.total_steps;
    return summary;
  }

  /// One update of the configured regime at `step` with `shots` demonstrations.
  LossRecord train_step(std::size_t step, std::size_t shots) {
    const std::size_t B = cfg_.batch_size;
    switch (cfg_.regime) {
      case Regime::erm:
      case Regime::erm_cl:
        return erm_step(learner_, sample_batch(task_, shots, B, Stream::data, step), opt_theta_);
      case Regime::erm_ds: {
        Rng rng(derive_seed(cfg_.seed, Stream::shuffle, step));
        return erm_ds_step(learner_, sample_batch(task_, shots, B, Stream::data, step), opt_theta_,
                           rng);
      }
      case Regime::erm_im: {
        Rng rng(derive_seed(cfg_.seed, Stream::shuffle, step));
        return erm_im_step(learner_, sample_batch(task_, shots, B, Stream::data, step), opt_theta_,
                           rng, cfg_.copies, cfg_.exhaustive_copies);
      }
      case Regime::pearl: {
        if (shots < 2) {
          if (cfg_.freeze_learner) {
            const auto batch = sample_batch(task_, shots, B, Stream::data, step);
            const auto losses = instance_losses(learner_, batch);
            double lm = 0.0;
            for (double l : losses) lm += l;
            return detail::lm_record(lm / static_cast<double>(losses.size()), shots, Regime::pearl);
          }
          return erm_step(learner_, sample_batch(task_, shots, B, Stream::data, step), opt_theta_);
        }
        PearlResult res = pearl_round(learner_, *pnet_, opt_theta_, *opt_phi_,
                                      pearl_batches<T>(task_, cfg_, step, shots), cfg_);
        return res.theta;
      }
    }
    throw ConfigError("unknown regime");
  }

 private:
  nlohmann::json meta(const char* role) const {
    return {{"role", role},
            {"step", next_},
            {"regime", to_string(cfg_.regime)},
            {"config_hash", opts_.config_hash},
            {"config", opts_.config_echo}};
  }

  void save() {
    ad::save_checkpoint(files_.learner(), learner_.params(), &opt_theta_, meta("learner"));
    if (pnet_) ad::save_checkpoint(files_.pnet(), pnet_->params(), opt_phi_.get(), meta("pnet"));
    nlohmann::json state = {{"format", kTrainStateFormat},
                            {"step", next_},
                            {"total_steps", cfg_.total_steps},
                            {"config_hash", opts_.config_hash}};
    const auto tmp = files_.state().string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      PEARL_REQUIRE(out.good(), IoError, "cannot write " + tmp);
      out << state.dump(2) << '\n';
      PEARL_REQUIRE(out.good(), IoError, "write failed for " + tmp);
    }
    std::filesystem::rename(tmp, files_.state());
  }

  void resume() {
    if (!std::filesystem::exists(files_.state())) {
      next_ = 0;
      std::ofstream(files_.log(), std::ios::trunc);
      return;
    }
    nlohmann::json state;
    {
      std::ifstream in(files_.state());
      PEARL_REQUIRE(in.good(), IoError, "cannot open " + files_.state().string());
      try {
        in >> state;
      } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed training state " + files_.state().string() + ": " + e.what());
      }
    }
    PEARL_REQUIRE(state.value("format", "") == kTrainStateFormat, IoError,
                  "unsupported training state format in " + files_.state().string());
    const std::string hash = state.value("config_hash", "");
    PEARL_REQUIRE(hash == opts_.config_hash, ConfigError,
                  "resume mismatch: run directory " + files_.dir.string() +
                      " was produced by config " + hash + ", current config is " +
                      opts_.config_hash);
    next_ = state.at("step").get<std::size_t>();
    const ad::CheckpointData lc = ad::read_checkpoint(files_.learner());
    ad::restore_parameters(lc, learner_.params());
    ad::restore_optimizer(lc, learner_.params(), opt_theta_);
    if (pnet_) {
      const ad::CheckpointData pc = ad::read_checkpoint(files_.pnet());
      ad::restore_parameters(pc, pnet_->params());
      ad::restore_optimizer(pc, pnet_->params(), *opt_phi_);
    }
    truncate_log();
  }

  void truncate_log() {
    std::vector<std::string> keep;
    {
      std::ifstream in(files_.log());
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
          if (nlohmann::json::parse(line).at("step").get<std::size_t>() < next_) keep.push_back(line);
        } catch (const nlohmann::json::exception&) {
          break;
        }
      }
    }
    PEARL_REQUIRE(keep.size() == next_, IoError,
                  "loss log " + files_.log().string() + " has " + std::to_string(keep.size()) +
                      " entries before step " + std::to_string(next_));
    std::ofstream out(files_.log(), std::ios::trunc);
    for (const auto& l : keep) out << l << '\n';
    PEARL_REQUIRE(out.good(), IoError, "write failed for " + files_.log().string());
  }

  TaskSpec task_;
  TrainConfig cfg_;
  TrainerOptions opts_;
  RunFiles files_;
  models::Learner<T> learner_;
  ad::AdamW<T> opt_theta_;
  std::unique_ptr<models::PNet<T>> pnet_;
  std::unique_ptr<ad::AdamW<T>> opt_phi_;
  CollapseDetector collapse_;
  std::size_t next_ = 0;
};

}  // namespace pearl::training
