#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pearl/attack/report.hpp"
#include "pearl/cli/commands.hpp"
#include "pearl/cli/run_config.hpp"

namespace {

using nlohmann::json;

struct Overrides {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::string> regime;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> batch_size;
  std::optional<double> eta_theta;
  std::optional<double> eta_phi;
  std::optional<double> beta;
  std::optional<std::size_t> inner_steps;
  std::optional<std::size_t> checkpoint_every;
  std::optional<std::size_t> samples;
  std::vector<std::size_t> shots;
  std::optional<std::size_t> threads;
  bool sampled_mu = false;

  void add_to(CLI::App& app) {
    app.add_option("-c,--config", config_file, "JSON run configuration");
    app.add_option("--seed", seed, "Master seed");
    app.add_option("-o,--output-dir", output_dir, "Run directory (relative to $PEARL_OUTPUT_ROOT)");
  }

  void add_train(CLI::App& app) {
    app.add_option("--regime", regime, "erm | erm_cl | erm_ds | erm_im | pearl");
    app.add_option("--steps", steps, "Total training steps");
    app.add_option("--batch-size", batch_size, "Instances per step");
    app.add_option("--eta-theta", eta_theta, "Learner learning rate");
    app.add_option("--eta-phi", eta_phi, "P-Net learning rate");
    app.add_option("--beta", beta, "Entropy coefficient");
    app.add_option("--inner-steps", inner_steps, "Adversary updates per round");
    app.add_option("--checkpoint-every", checkpoint_every, "Checkpoint interval in steps");
  }

  void add_attack(CLI::App& app) {
    app.add_option("--samples", samples, "Held-out instances per shot count");
    app.add_option("--shots", shots, "Shot counts to attack");
    app.add_option("--threads", threads, "Worker threads");
    app.add_flag("--sampled-mu", sampled_mu, "Estimate mu by sampling above the enumeration cap");
  }

  pearl::cli::RunConfig resolve() const {
    json j = json::object();
    if (!config_file.empty()) {
      try {
        j = json::parse(pearl::attack::read_text(config_file));
      } catch (const json::exception& e) {
        throw pearl::ConfigError("configuration " + config_file + " is not valid JSON: " + e.what());
      }
    }
    if (seed) j["seed"] = *seed;
    if (output_dir) j["output_dir"] = *output_dir;
    if (regime) j["train"]["regime"] = *regime;
    if (steps) j["train"]["total_steps"] = *steps;
    if (batch_size) j["train"]["batch_size"] = *batch_size;
    if (eta_theta) j["train"]["eta_theta"] = *eta_theta;
    if (eta_phi) j["train"]["eta_phi"] = *eta_phi;
    if (beta) j["train"]["beta"] = *beta;
    if (inner_steps) j["train"]["inner_steps"] = *inner_steps;
    if (checkpoint_every) j["train"]["checkpoint_every"] = *checkpoint_every;
    if (samples) j["attack"]["samples"] = *samples;
    if (!shots.empty()) j["attack"]["shots"] = shots;
    if (threads) j["attack"]["threads"] = *threads;
    if (sampled_mu) j["attack"]["sampled_mu"] = true;
    return pearl::cli::parse_run_config(j);
  }
};

int run(int argc, char** argv) {
  CLI::App app{"Permutation-robust in-context learning: train, attack and compare"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "Serial execution for bit-exact output");

  Overrides train_args;
  auto* train = app.add_subcommand("train", "Train one regime to completion or checkpoint");
  train_args.add_to(*train);
  train_args.add_train(*train);
  std::optional<std::size_t> halt_after;
  train->add_option("--halt-after", halt_after, "Stop with a checkpoint after this many steps");

  Overrides attack_args;
  auto* attack = app.add_subcommand("attack", "Permutation attack on a trained learner");
  attack_args.add_to(*attack);
  attack_args.add_attack(*attack);
  std::string learner_ckpt, pnet_ckpt, attack_out;
  attack->add_option("--learner", learner_ckpt, "Learner checkpoint")->required();
  attack->add_option("--pnet", pnet_ckpt, "P-Net checkpoint for the neural attack");
  attack->add_option("--out", attack_out, "Report directory (default <output-dir>/attack)");

  std::vector<std::string> reports;
  std::string compare_out = "compare";
  auto* compare = app.add_subcommand("compare", "Merge attack reports into comparison tables");
  compare->add_option("reports", reports, "Report files")->required()->expected(2, -1);
  compare->add_option("--out", compare_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (train->parsed()) {
    const auto rc = train_args.resolve();
    pearl::cli::TrainCommandOptions opt;
    opt.halt_after = halt_after;
    const auto s = pearl::cli::cmd_train(rc, opt);
    std::cout << "trained " << pearl::training::to_string(rc.train.regime) << " steps "
              << s.start_step << ".." << s.end_step << (s.completed ? " (complete)" : " (halted)")
              << " in " << pearl::cli::run_dir(rc).string() << '\n';
    if (s.last)
      std::cout << "last L_lm " << s.last->lm << " L_ent " << s.last->ent << " shots "
                << s.last->shots << '\n';
  } else if (attack->parsed()) {
    const auto rc = attack_args.resolve();
    pearl::cli::AttackCommandOptions opt;
    opt.learner_checkpoint = learner_ckpt;
    if (!pnet_ckpt.empty()) opt.pnet_checkpoint = pnet_ckpt;
    if (!attack_out.empty()) opt.out_dir = attack_out;
    opt.deterministic = deterministic;
    const auto report = pearl::cli::cmd_attack(rc, opt);
    for (const auto& s : report.shots) {
      std::cout << report.regime << " shots " << s.shots << " mu " << s.mu_mode << " avg "
                << s.avg << " worst " << s.worst << " best " << s.best << " asr@0.5 "
                << s.asr[4].asr;
      if (s.neural_avg) std::cout << " neural avg " << *s.neural_avg;
      std::cout << '\n';
    }
  } else if (compare->parsed()) {
    std::vector<std::filesystem::path> files(reports.begin(), reports.end());
    const auto c = pearl::cli::cmd_compare(files, compare_out);
    std::cout << c.table_csv;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return pearl::cli::exit_code_for(e);
  }
}
