#include <cstdio>
#include <filesystem>

#include "pearl/attack/attack.hpp"
#include "pearl/attack/report.hpp"
#include "pearl/training/trainer.hpp"

using namespace pearl;

int main() {
  TaskSpec task;
  task.dim = 3;
  task.max_demos = 4;
  task.seed = 1;

  models::LearnerConfig lc;
  lc.dim = task.dim;
  lc.max_demos = task.max_demos;
  lc.layers = 2;
  lc.hidden = 32;
  models::PNetConfig pc;
  pc.dim = task.dim;
  pc.max_demos = task.max_demos;

  training::TrainConfig tc;
  tc.regime = training::Regime::pearl;
  tc.total_steps = 300;
  tc.batch_size = 32;
  tc.seed = 1;

  training::TrainerOptions opt;
  opt.out_dir = std::filesystem::temp_directory_path() / "pearl_quickstart";
  std::filesystem::remove_all(opt.out_dir);
  opt.checkpoint_every = 0;
  opt.config_hash = "quickstart";

  training::Trainer<float> trainer(task, lc, pc, tc, opt);
  const auto summary = trainer.run();
  std::printf("trained %zu steps, last L_lm %.4f, L_ent %.4f\n", summary.end_step, summary.last->lm,
              summary.last->ent);

  attack::AttackOptions ao;
  for (std::size_t k = 2; k <= 4; ++k) {
    const auto report =
        attack::attack_instances(trainer.learner(), trainer.pnet(), sample_eval_set(task, k, 50), ao);
    std::printf("%zu shots: avg %.4f worst %.4f best %.4f neural %.4f asr@0.5 %.2f\n", k, report.avg,
                report.worst, report.best, *report.neural_avg, report.asr[4].asr);
  }
}
