#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pearl/attack/attack.hpp"
#include "pearl/attack/report.hpp"
#include "support/attack_oracle.hpp"

using namespace pearl;
using namespace pearl::attack;
using models::Learner;
using models::LearnerConfig;
using models::PNet;
using models::PNetConfig;

namespace {

LearnerConfig small_learner() {
  LearnerConfig c;
  c.dim = 3;
  c.max_demos = 6;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 16;
  c.mlp_ratio = 2;
  return c;
}

PNetConfig small_pnet() {
  PNetConfig c;
  c.dim = 3;
  c.max_demos = 6;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 8;
  c.mlp_ratio = 2;
  c.relation_init = 0.5;
  return c;
}

PNet<float>* const kNoPNet = nullptr;

TaskSpec small_task(std::uint64_t seed = 0) { return TaskSpec{3, 6, seed}; }

Learner<float> scrambled_learner(std::uint64_t seed) {
  Learner<float> l(small_learner(), seed);
  Rng rng(seed + 1000);
  for (auto& p : l.params())
    for (auto& v : p.value.storage()) v += static_cast<float>(0.3 * rng.normal());
  return l;
}

AttackReport synthetic_report() {
  AttackReport r;
  r.regime = "erm_cl";
  r.config = {{"run", {{"task", {{"dim", 5}, {"max_demos", 5}}}}}};
  for (std::size_t k : {3, 4}) {
    ShotReport s;
    s.shots = k;
    s.evaluations = 2 * (k == 3 ? 6 : 24);
    for (std::size_t i = 0; i < 2; ++i) {
      SampleRecord rec;
      rec.id = i;
      rec.mu = 0.5 + 0.25 * i + 0.01 * k;
      rec.best = rec.mu / 2;
      rec.worst = rec.mu * (1.3 + 0.4 * i);
      rec.omega = rec.worst;
      rec.argmax = k == 3 ? std::vector<std::size_t>{2, 0, 1} : std::vector<std::size_t>{3, 1, 0, 2};
      rec.neural_omega = rec.mu * 1.1;
      s.samples.push_back(rec);
    }
    aggregate(s);
    r.shots.push_back(s);
  }
  return r;
}

}  // namespace

TEST(Exhaustive, SingleDemonstrationHasOneOrder) {
  auto learner = scrambled_learner(1);
  const auto p = sample_batch(small_task(), 1, 1, Stream::eval, 0).front();
  const auto r = exhaustive_attack(learner, p);
  EXPECT_EQ(r.evaluations, 1u);
  EXPECT_EQ(r.mu, r.omega);
  EXPECT_EQ(r.best, r.worst);
  EXPECT_EQ(r.mu, r.worst);
}

TEST(Exhaustive, ThreeDemonstrationsUseSixEvaluations) {
  auto learner = scrambled_learner(2);
  const auto p = sample_batch(small_task(), 3, 1, Stream::eval, 0).front();
  const auto r = exhaustive_attack(learner, p);
  EXPECT_EQ(r.evaluations, 6u);
  EXPECT_LE(r.best, r.mu);
  EXPECT_LE(r.mu, r.worst);
  EXPECT_EQ(r.omega, r.worst);
}

TEST(Exhaustive, MatchesRecursiveOracleExactly) {
  auto learner = scrambled_learner(3);
  for (std::size_t n = 2; n <= 5; ++n) {
    for (const auto& p : sample_batch(small_task(n), n, 25, Stream::eval, 1)) {
      const auto r = exhaustive_attack(learner, p);
      const auto o = pearl::testing::recursive_attack_oracle(learner, p);
      ASSERT_EQ(r.mu, o.mu) << "n " << n;
      ASSERT_EQ(r.worst, o.worst) << "n " << n;
      ASSERT_EQ(r.best, o.best) << "n " << n;
      ASSERT_EQ(r.evaluations, o.evaluations);
    }
  }
}

TEST(Exhaustive, ArgmaxAttainsWorst) {
  auto learner = scrambled_learner(4);
  const auto p = sample_batch(small_task(), 4, 1, Stream::eval, 2).front();
  const auto r = exhaustive_attack(learner, p);
  EXPECT_EQ(query_errors(learner, {permuted(p, r.argmax)}).front(), r.worst);
}

TEST(Exhaustive, InvariantToInitialDemonstrationOrder) {
  auto learner = scrambled_learner(5);
  Rng rng(6);
  for (const auto& p : sample_batch(small_task(), 4, 10, Stream::eval, 3)) {
    const auto a = exhaustive_attack(learner, p);
    const auto b = exhaustive_attack(learner, permuted(p, HardPermutation::random(4, rng)));
    EXPECT_EQ(a.mu, b.mu);
    EXPECT_EQ(a.best, b.best);
    EXPECT_EQ(a.worst, b.worst);
  }
}

TEST(Exhaustive, OrderedMeanIgnoresInputOrder) {
  std::vector<double> v{0.1, 1e-17, 3.0, 0.7, 1e-3};
  const double m = ordered_mean(v);
  std::reverse(v.begin(), v.end());
  EXPECT_EQ(ordered_mean(v), m);
  EXPECT_THROW(ordered_mean({}), ConfigError);
}

TEST(Exhaustive, CapExceededIsRejected) {
  auto learner = scrambled_learner(7);
  const auto p = sample_batch(small_task(), 4, 1, Stream::eval, 0).front();
  EXPECT_THROW(exhaustive_attack(learner, p, 3), ConfigError);
}

TEST(Sampled, BoundsAndDeterminism) {
  auto learner = scrambled_learner(8);
  const auto p = sample_batch(small_task(), 4, 1, Stream::eval, 0).front();
  Rng a(1), b(1);
  const auto r = sampled_attack(learner, p, 200, a);
  const auto s = sampled_attack(learner, p, 200, b);
  EXPECT_EQ(r.mu, s.mu);
  EXPECT_EQ(r.evaluations, 200u);
  const auto ex = exhaustive_attack(learner, p);
  EXPECT_GE(r.best, ex.best);
  EXPECT_LE(r.worst, ex.worst);
  EXPECT_NEAR(r.mu, ex.mu, 0.2 * ex.mu);
  Rng c(1);
  EXPECT_THROW(sampled_attack(learner, p, 0, c), ConfigError);
}

TEST(Neural, NeverExceedsExhaustiveWorst) {
  auto learner = scrambled_learner(9);
  PNet<float> pnet(small_pnet(), 10);
  SinkhornConfig cfg;
  Rng rng(11);
  for (std::size_t n = 2; n <= 5; ++n) {
    for (const auto& p : sample_batch(small_task(), n, 20, Stream::eval, 4)) {
      const auto nr = neural_attack(learner, pnet, p, cfg, rng);
      EXPECT_LE(nr.omega, exhaustive_attack(learner, p).worst);
      EXPECT_TRUE(nr.perm.size() == n);
    }
  }
}

TEST(Neural, RandomAdversaryMatchesMeanError) {
  auto learner = scrambled_learner(12);
  PNet<float> pnet(small_pnet(), 13);
  SinkhornConfig cfg;
  cfg.noise_scale = 1.0;
  Rng rng(14);
  const auto instances = sample_batch(small_task(), 4, 500, Stream::eval, 5);
  std::vector<double> diff;
  for (const auto& p : instances)
    diff.push_back(neural_attack(learner, pnet, p, cfg, rng).omega - exhaustive_attack(learner, p).mu);
  const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / diff.size();
  double var = 0.0;
  for (double d : diff) var += (d - mean) * (d - mean);
  const double se = std::sqrt(var / (diff.size() - 1) / diff.size());
  EXPECT_LT(std::abs(mean), 2.0 * se) << "mean " << mean << " se " << se;
}

TEST(Neural, DimensionMismatchIsRejected) {
  auto learner = scrambled_learner(15);
  PNet<float> pnet(small_pnet(), 16);
  Rng rng(0);
  const auto p = sample_batch(TaskSpec{4, 6, 0}, 3, 1, Stream::eval, 0).front();
  EXPECT_THROW(neural_attack(learner, pnet, p, SinkhornConfig{}, rng), ShapeError);
}

TEST(Asr, NoDegradationGivesZero) {
  EXPECT_EQ(asr({{0.5, 0.5}, {1.0, 1.0}, {2.0, 2.0}}, 0.1).value, 0.0);
}

TEST(Asr, ThresholdArithmetic) {
  // Degradations 0.6, 0.4 and 0.5.
  const auto r = asr({{1.0, 1.6}, {1.0, 1.4}, {2.0, 3.0}}, 0.5);
  EXPECT_DOUBLE_EQ(r.value, 2.0 / 3.0);
  EXPECT_EQ(r.counted, 3u);
}

TEST(Asr, TinyMeanIsExcluded) {
  const auto r = asr({{1e-13, 1.0}, {0.0, 0.0}, {1.0, 2.0}}, 0.5);
  EXPECT_EQ(r.excluded, 2u);
  EXPECT_EQ(r.counted, 1u);
  EXPECT_EQ(r.value, 1.0);
  EXPECT_EQ(asr({{0.0, 1.0}}, 0.1).value, 0.0);
}

TEST(Asr, ZeroThresholdCountsWorstAboveMean) {
  auto learner = scrambled_learner(17);
  std::vector<std::pair<double, double>> mo;
  std::size_t above = 0;
  for (const auto& p : sample_batch(small_task(), 3, 40, Stream::eval, 6)) {
    const auto r = exhaustive_attack(learner, p);
    mo.emplace_back(r.mu, r.worst);
    double best = 1e300, worst = -1e300, sum = 0.0;
    for (const auto& perm : enumerate_permutations(3, 6)) {
      const double e = query_errors(learner, {permuted(p, perm)}).front();
      best = std::min(best, e);
      worst = std::max(worst, e);
      sum += e;
    }
    if (worst > sum / 6.0 || worst == best) ++above;
  }
  EXPECT_DOUBLE_EQ(asr(mo, 0.0).value, static_cast<double>(above) / 40.0);
}

TEST(Asr, MonotoneInThreshold) {
  Rng rng(18);
  std::vector<std::pair<double, double>> mo;
  for (int i = 0; i < 200; ++i) {
    const double mu = 0.1 + rng.uniform();
    mo.emplace_back(mu, mu * (1.0 + 1.5 * rng.uniform()));
  }
  double prev = 1.0;
  for (double d : delta_grid()) {
    const double a = asr(mo, d).value;
    EXPECT_LE(a, prev);
    prev = a;
  }
}

TEST(Asr, ExhaustiveBoundsNeuralAtEveryThreshold) {
  auto learner = scrambled_learner(19);
  PNet<float> pnet(small_pnet(), 20);
  AttackOptions opt;
  const auto r = attack_instances(learner, &pnet, sample_batch(small_task(), 4, 40, Stream::eval, 7), opt);
  ASSERT_EQ(r.asr.size(), r.neural_asr.size());
  for (std::size_t i = 0; i < r.asr.size(); ++i) EXPECT_GE(r.asr[i].asr, r.neural_asr[i].asr);
}

TEST(Report, AggregatesMatchSamples) {
  auto learner = scrambled_learner(21);
  AttackOptions opt;
  const auto r = attack_instances(learner, kNoPNet, sample_batch(small_task(), 3, 30, Stream::eval, 8), opt);
  EXPECT_EQ(r.evaluations, 180u);
  EXPECT_EQ(r.mu_mode, "exact");
  double mu = 0.0;
  for (const auto& s : r.samples) {
    EXPECT_LE(s.best, s.mu);
    EXPECT_LE(s.mu, s.worst);
    EXPECT_FALSE(s.neural_omega.has_value());
    mu += s.mu;
  }
  EXPECT_NEAR(r.avg, mu / 30.0, 1e-9);
  EXPECT_FALSE(r.neural_avg.has_value());
  EXPECT_EQ(r.asr.size(), 9u);
  EXPECT_TRUE(r.neural_asr.empty());
}

TEST(Report, ThreadsEqualSerial) {
  auto learner = scrambled_learner(22);
  PNet<float> pnet(small_pnet(), 23);
  const auto inst = sample_batch(small_task(), 4, 24, Stream::eval, 9);
  AttackOptions serial, parallel;
  parallel.threads = 4;
  EXPECT_EQ(attack_instances(learner, &pnet, inst, serial), attack_instances(learner, &pnet, inst, parallel));
}

TEST(Report, CapNeedsSampledMu) {
  auto learner = scrambled_learner(24);
  const auto inst = sample_batch(small_task(), 4, 3, Stream::eval, 10);
  AttackOptions opt;
  opt.cap = 3;
  EXPECT_THROW(attack_instances(learner, kNoPNet, inst, opt), ConfigError);
  opt.sampled_mu = true;
  opt.mu_draws = 50;
  const auto r = attack_instances(learner, kNoPNet, inst, opt);
  EXPECT_EQ(r.mu_mode, "sampled");
  EXPECT_EQ(r.evaluations, 150u);
}

TEST(Report, EmptyInstanceSetIsRejected) {
  auto learner = scrambled_learner(25);
  EXPECT_THROW(attack_instances(learner, kNoPNet, {}, AttackOptions{}), ConfigError);
}

TEST(Summary, SingleSampleReproducesItsNumbers) {
  ShotReport s;
  s.shots = 3;
  SampleRecord rec{0, 0.4, 0.9, 0.1, 0.9, {1, 0, 2}, 0.5};
  s.samples.push_back(rec);
  aggregate(s);
  AttackReport r;
  r.regime = "pearl";
  r.shots.push_back(s);
  const auto rows = summarize({r});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].regime, "pearl");
  EXPECT_EQ(rows[0].shots, 3u);
  EXPECT_EQ(rows[0].avg, 0.4);
  EXPECT_EQ(rows[0].worst, 0.9);
  EXPECT_EQ(rows[0].best, 0.1);
  EXPECT_EQ(*rows[0].neural_avg, 0.5);
  EXPECT_EQ(rows[0].asr[4].asr, 1.0);
  EXPECT_EQ(rows[0].asr[8].asr, 1.0);
  EXPECT_THROW(summarize({}), ConfigError);
}

TEST(Summary, RowsPerRegimeAndShots) {
  AttackReport a = synthetic_report(), b = synthetic_report();
  b.regime = "pearl";
  const auto rows = summarize({a, b});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[2].regime, "pearl");
  EXPECT_EQ(rows[3].shots, 4u);
}

TEST(Summary, EmitParseRoundTrip) {
  const AttackReport r = synthetic_report();
  const std::string text = emit_report(r);
  const AttackReport back = parse_report(text);
  EXPECT_EQ(back, r);
  EXPECT_EQ(emit_report(back), text);
  EXPECT_THROW(parse_report("{\"format\":\"other\"}"), IoError);
  EXPECT_THROW(parse_report("not json"), IoError);
}

TEST(Summary, CsvHasOneRowPerShotAndDelta) {
  const AttackReport r = synthetic_report();
  const std::string csv = emit_csv(r);
  EXPECT_EQ(csv.rfind(kCsvHeader, 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 9);
  const std::string neural = emit_csv(r, true);
  EXPECT_EQ(std::count(neural.begin(), neural.end(), '\n'), 1 + 2 * 9);
  EXPECT_NE(csv, neural);
}

TEST(ParallelFor, CoversEveryIndexOnceAndRethrows) {
  std::vector<int> hits(101, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw NumericError("boom");
               }),
               NumericError);
}
