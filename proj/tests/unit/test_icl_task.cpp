#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "pearl/task/icl_task.hpp"

using namespace pearl;

TEST(SampleInstance, ForcedValues) {
  const auto p = make_instance({2.0}, {{3.0}}, {-1.5});
  EXPECT_EQ(p.demos[0].y, 6.0);
  EXPECT_EQ(p.query_y, -3.0);
}

TEST(SampleInstance, SeededDeterminism) {
  TaskSpec spec;
  Rng a(42), b(42);
  EXPECT_EQ(sample_instance(spec, 3, a), sample_instance(spec, 3, b));
  EXPECT_EQ(sample_batch(spec, 4, 8, Stream::data, 17), sample_batch(spec, 4, 8, Stream::data, 17));
  EXPECT_NE(sample_batch(spec, 4, 8, Stream::data, 17), sample_batch(spec, 4, 8, Stream::data, 18));
}

TEST(SampleInstance, LabelsAreExactDotProducts) {
  TaskSpec spec{7, 5, 1};
  for (const auto& p : sample_batch(spec, 5, 200, Stream::data, 0)) {
    ASSERT_EQ(p.size(), 5u);
    for (const auto& d : p.demos) {
      long double s = 0, mag = 0;
      for (std::size_t i = 0; i < 7; ++i) {
        s += static_cast<long double>(p.w[i]) * d.x[i];
        mag += std::abs(static_cast<long double>(p.w[i]) * d.x[i]);
      }
      ASSERT_NEAR(d.y, static_cast<double>(s), 8 * 1.2e-16 * static_cast<double>(mag));
    }
  }
}

TEST(SampleInstance, RejectsBadCounts) {
  TaskSpec spec{3, 4, 0};
  Rng rng(1);
  EXPECT_THROW(sample_instance(spec, 0, rng), ConfigError);
  EXPECT_THROW(sample_instance(spec, 5, rng), ConfigError);
  EXPECT_THROW(sample_instance(TaskSpec{0, 4, 0}, 1, rng), ConfigError);
}

TEST(SampleInstance, SecondMomentOfLabels) {
  // E[(w.x)^2] = d for independent standard normal w and x.
  TaskSpec spec{5, 1, 9};
  Rng rng(2024);
  double acc = 0, xs = 0, xsq = 0;
  std::size_t nx = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_instance(spec, 1, rng);
    acc += p.query_y * p.query_y;
    for (double v : p.demos[0].x) {
      xs += v;
      xsq += v * v;
      ++nx;
    }
  }
  EXPECT_NEAR(acc / n, 5.0, 0.1);
  const double mean = xs / nx;
  EXPECT_NEAR(xsq / nx - mean * mean, 1.0, 0.02);
}

TEST(IclLoss, Examples) {
  EXPECT_EQ(icl_loss(std::vector<double>{1, 2}, std::vector<double>{1, 2}), 0.0);
  EXPECT_EQ(icl_loss(std::vector<double>{0, 0}, std::vector<double>{1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(icl_loss(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 5}), 4.0 / 3.0);
  EXPECT_THROW(icl_loss(std::vector<double>{1}, std::vector<double>{1, 2}), ShapeError);
}

TEST(NormalizedError, Examples) {
  const std::vector<double> w{1, 1, 1, 1}, x{0.5, 0.5, 0.5, 0.5};
  EXPECT_EQ(normalized_error(2.0, w, x), 0.0);
  EXPECT_EQ(normalized_error(4.0, w, x), 1.0);
}

TEST(NormalizedError, ZeroPredictorAveragesToOne) {
  TaskSpec spec{5, 3, 5};
  double acc = 0;
  const auto set = sample_batch(spec, 3, 100000, Stream::eval, 0);
  for (const auto& p : set) acc += normalized_error(0.0, p);
  EXPECT_NEAR(acc / set.size(), 1.0, 0.02);
}

TEST(NormalizedError, InvariantToDemonstrationOrder) {
  TaskSpec spec;
  Rng rng(8);
  const auto p = sample_instance(spec, 4, rng);
  for (const auto& perm : enumerate_permutations(4, 6))
    EXPECT_EQ(normalized_error(0.3, permuted(p, perm)), normalized_error(0.3, p));
}

TEST(Permuted, ReordersDemonstrationsOnly) {
  TaskSpec spec;
  Rng rng(3);
  const auto p = sample_instance(spec, 3, rng);
  const auto q = permuted(p, HardPermutation({2, 0, 1}));
  EXPECT_EQ(q.demos[0], p.demos[2]);
  EXPECT_EQ(q.demos[1], p.demos[0]);
  EXPECT_EQ(q.demos[2], p.demos[1]);
  EXPECT_EQ(q.w, p.w);
  EXPECT_EQ(q.query_x, p.query_x);
  EXPECT_EQ(q.targets().back(), p.query_y);
}

TEST(EvalSet, DisjointFromTraining) {
  TaskSpec spec{5, 5, 1};
  const auto train = sample_batch(spec, 3, 50, Stream::data, 3);
  const auto eval = sample_eval_set(spec, 3, 50);
  for (const auto& a : eval)
    for (const auto& b : train) EXPECT_NE(a.w, b.w);
}

TEST(InstanceIo, RoundTrip) {
  TaskSpec spec{4, 5, 77};
  const auto set = sample_batch(spec, 5, 20, Stream::eval, 1);
  const auto path = std::filesystem::temp_directory_path() / "pearl_instances.jsonl";
  save_instances(path, set);
  EXPECT_EQ(load_instances(path), set);
  std::filesystem::remove(path);
  EXPECT_THROW(load_instances(path), IoError);
}
