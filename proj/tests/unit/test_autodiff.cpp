#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "pearl/autodiff/adamw.hpp"
#include "pearl/autodiff/checkpoint.hpp"
#include "pearl/autodiff/graph.hpp"
#include "pearl/autodiff/ops.hpp"
#include "pearl/core/rng.hpp"
#include "support/gradcheck.hpp"

using namespace pearl;
using pearl::testing::gradcheck;
using pearl::testing::random_tensor;
using G = ad::Graph<double>;
using V = ad::Var<double>;
using Inputs = std::vector<V>;

namespace {

constexpr int kTrials = 100;
constexpr double kGradTol = 1e-6;

// Runs `build` on `kTrials` random input draws of the given shapes.
template <class Build>
void check_op(const std::vector<Shape>& shapes, Build build, double lo = -1.0, double hi = 1.0,
              double tol = kGradTol) {
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(derive_seed(1234, Stream::eval, static_cast<std::uint64_t>(trial)));
    std::vector<Tensor<double>> xs;
    for (const auto& s : shapes) xs.push_back(random_tensor(s, rng, lo, hi));
    const double err = gradcheck(xs, build, static_cast<std::uint64_t>(trial) + 99);
    ASSERT_LE(err, tol) << "trial " << trial;
  }
}

}  // namespace

TEST(Forward, MatmulOfOnes) {
  G g;
  V a = g.constant(Tensor<double>({2, 3}, 1.0));
  V b = g.constant(Tensor<double>({3, 2}, 1.0));
  const auto& out = ad::matmul(a, b).value();
  ASSERT_EQ(out.shape(), (Shape{2, 2}));
  for (double v : out.values()) EXPECT_EQ(v, 3.0);
}

TEST(Forward, SoftmaxOfZeros) {
  G g;
  const auto& out = ad::softmax(g.constant(Tensor<double>({2}, 0.0))).value();
  EXPECT_DOUBLE_EQ(out[0], 0.5);
  EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(Forward, LayerNormOfConstantIsZero) {
  G g;
  const auto& out = ad::layer_norm(g.constant(Tensor<double>({1, 6}, 4.25))).value();
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, CausalSoftmaxMasksFuture) {
  G g;
  Rng rng(5);
  const auto& p = ad::softmax(g.constant(random_tensor({4, 4}, rng)), true).value();
  for (std::size_t t = 0; t < 4; ++t) {
    double row = 0.0;
    for (std::size_t s = 0; s < 4; ++s) {
      if (s > t) EXPECT_EQ(p(t, s), 0.0);
      row += p(t, s);
    }
    EXPECT_NEAR(row, 1.0, 1e-15);
  }
}

TEST(Forward, ShapeMismatchThrows) {
  G g;
  V a = g.constant(Tensor<double>({2, 3}));
  V b = g.constant(Tensor<double>({2, 2}));
  EXPECT_THROW(ad::matmul(a, b), ShapeError);
  EXPECT_THROW(ad::add(a, b), ShapeError);
}

TEST(Forward, NonFiniteIntermediateThrows) {
  G g;
  V a = g.constant(Tensor<double>({1}, 800.0));
  EXPECT_THROW(ad::exp(a), NumericError);
  EXPECT_THROW(ad::log(g.constant(Tensor<double>({1}, 0.0))), NumericError);
  EXPECT_THROW(g.constant(Tensor<double>({1}, std::nan(""))), NumericError);
}

TEST(Backward, SquareAtThree) {
  G g;
  V x = g.input(Tensor<double>::scalar(3.0));
  g.backward(ad::square(x));
  EXPECT_DOUBLE_EQ(g.grad(x).item(), 6.0);
}

TEST(Backward, SumOfProductGivesOtherFactor) {
  ad::ParameterSet<double> ps;
  Tensor<double> x({2, 3}, std::vector<double>{1, -2, 3, 0.5, 7, -1});
  ps.add("W", Tensor<double>({2, 3}, 0.3));
  G g;
  ad::Scope<double> scope(g, ps, true);
  g.backward(ad::sum(ad::mul(scope(0), g.constant(x))));
  EXPECT_EQ(ps[0].grad, x);
}

TEST(Backward, ErrorsOnMisuse) {
  G empty;
  V dangling{&empty, 0};
  EXPECT_THROW(empty.backward(dangling), Error);

  G g;
  V x = g.input(Tensor<double>::scalar(2.0));
  V y = ad::square(x);
  EXPECT_THROW(g.grad(x), Error);
  g.backward(y);
  EXPECT_THROW(g.backward(y), Error);
  EXPECT_THROW(ad::square(x), Error);

  G h;
  V v = h.input(Tensor<double>({2}, 1.0));
  EXPECT_THROW(h.backward(ad::scale(v, 2.0)), ShapeError);
}

TEST(Backward, NonFiniteGradientThrows) {
  G g;
  V x = g.input(Tensor<double>({1}, 1.0));
  V y = ad::scale(x, 1e300);
  EXPECT_THROW(g.backward(ad::sum(y), Tensor<double>::scalar(1e300)), NumericError);
}

TEST(Backward, Deterministic) {
  auto run = [] {
    Rng rng(77);
    Tensor<double> a = random_tensor({3, 5}, rng), w = random_tensor({5, 4}, rng);
    G g;
    V va = g.input(a), vw = g.input(w);
    g.backward(ad::sum(ad::tanh(ad::matmul(va, vw))));
    return std::make_pair(g.grad(va), g.grad(vw));
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, Elementwise) {
  check_op({{3, 4}, {3, 4}}, [](G&, const Inputs& v) { return ad::add(v[0], v[1]); });
  check_op({{3, 4}, {3, 4}}, [](G&, const Inputs& v) { return ad::sub(v[0], v[1]); });
  check_op({{3, 4}, {3, 4}}, [](G&, const Inputs& v) { return ad::mul(v[0], v[1]); });
  check_op({{3, 4}, {3, 4}},
           [](G&, const Inputs& v) { return ad::div(v[0], ad::add_scalar(ad::exp(v[1]), 0.5)); });
  check_op({{5}}, [](G&, const Inputs& v) { return ad::scale(v[0], -2.5); });
  check_op({{5}}, [](G&, const Inputs& v) { return ad::exp(v[0]); });
  check_op({{5}}, [](G&, const Inputs& v) { return ad::log(v[0]); }, 0.2, 3.0);
  check_op({{5}}, [](G&, const Inputs& v) { return ad::tanh(v[0]); }, -3.0, 3.0);
  check_op({{5}}, [](G&, const Inputs& v) { return ad::relu(v[0]); }, 0.1, 2.0);
  check_op({{5}}, [](G&, const Inputs& v) { return ad::relu(v[0]); }, -2.0, -0.1);
  check_op({{7}}, [](G&, const Inputs& v) { return ad::gelu(v[0]); }, -4.0, 4.0);
  check_op({{5}}, [](G&, const Inputs& v) { return ad::square(v[0]); });
  check_op({{2, 3, 4}, {3, 4}}, [](G&, const Inputs& v) { return ad::add_broadcast(v[0], v[1]); });
}

TEST(GradCheck, MatrixProducts) {
  check_op({{2, 3, 4}, {4, 5}}, [](G&, const Inputs& v) { return ad::matmul(v[0], v[1]); });
  check_op({{2, 3, 4}, {2, 4, 5}}, [](G&, const Inputs& v) { return ad::bmm(v[0], v[1]); });
  check_op({{2, 3, 4}, {2, 5, 4}}, [](G&, const Inputs& v) { return ad::bmm(v[0], v[1], true); });
}

TEST(GradCheck, SoftmaxAndNorms) {
  check_op({{2, 4, 4}}, [](G&, const Inputs& v) { return ad::softmax(v[0]); }, -3.0, 3.0);
  check_op({{2, 4, 4}}, [](G&, const Inputs& v) { return ad::softmax(v[0], true); }, -3.0, 3.0);
  check_op({{3, 6}}, [](G&, const Inputs& v) { return ad::layer_norm(v[0]); });
  check_op({{3, 6}, {6}, {6}},
           [](G&, const Inputs& v) { return ad::layer_norm(v[0], v[1], v[2]); });
}

TEST(GradCheck, ShapeOps) {
  check_op({{2, 3, 4}}, [](G&, const Inputs& v) { return ad::reshape(v[0], {6, 4}); });
  check_op({{2, 3, 4, 5}}, [](G&, const Inputs& v) { return ad::swap_axes_12(v[0]); });
  check_op({{2, 3, 4}, {2, 1, 4}}, [](G&, const Inputs& v) { return ad::concat_axis1(v[0], v[1]); });
  check_op({{2, 5, 3}}, [](G&, const Inputs& v) { return ad::select_axis1(v[0], {4, 0, 2}); });
  check_op({{6, 3}}, [](G&, const Inputs& v) { return ad::embedding(v[0], {1, 1, 5, 0}); });
}

TEST(GradCheck, Reductions) {
  check_op({{3, 4}}, [](G&, const Inputs& v) { return ad::sum(v[0]); });
  check_op({{3, 4}}, [](G&, const Inputs& v) { return ad::mean(v[0]); });
  check_op({{3, 4}, {3, 4}}, [](G&, const Inputs& v) { return ad::mse(v[0], v[1]); });
}

TEST(GradCheck, ThreeLayerMlp) {
  // Parameters enter through a ParameterSet; the oracle perturbs them directly.
  for (int trial = 0; trial < kTrials; ++trial) {
    Rng rng(derive_seed(4321, Stream::eval, static_cast<std::uint64_t>(trial)));
    ad::ParameterSet<double> ps;
    ps.add("w1", random_tensor({4, 8}, rng));
    ps.add("b1", random_tensor({8}, rng));
    ps.add("w2", random_tensor({8, 8}, rng));
    ps.add("b2", random_tensor({8}, rng));
    ps.add("w3", random_tensor({8, 1}, rng));
    const Tensor<double> x = random_tensor({5, 4}, rng, -2.0, 2.0);
    const Tensor<double> y = random_tensor({5, 1}, rng);
    auto loss = [&](bool track) {
      auto g = std::make_unique<G>();
      ad::Scope<double> s(*g, ps, track);
      V h = ad::tanh(ad::add_broadcast(ad::matmul(g->constant(x), s(0)), s(1)));
      h = ad::gelu(ad::add_broadcast(ad::matmul(h, s(2)), s(3)));
      V out = ad::mse(ad::matmul(h, s(4)), g->constant(y));
      return std::make_pair(std::move(g), out);
    };
    ps.zero_grad();
    {
      auto [g, out] = loss(true);
      g->backward(out);
    }
    std::vector<double> analytic, numeric;
    const double h = 1e-4;
    for (auto& p : ps) {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        analytic.push_back(p.grad[i]);
        const double orig = p.value[i];
        p.value[i] = orig + h;
        const double up = loss(false).second.value().item();
        p.value[i] = orig - h;
        const double down = loss(false).second.value().item();
        p.value[i] = orig;
        numeric.push_back((up - down) / (2 * h));
      }
    }
    ASSERT_LE(pearl::testing::relative_error(analytic, numeric), kGradTol) << "trial " << trial;
  }
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  std::vector<double> p{1.5, -2.0, 0.25};
  const std::vector<double> before = p;
  const std::vector<double> grad(3, 0.0);
  ad::AdamWState<double> st;
  ad::AdamWOptions opt;
  for (int i = 0; i < 5; ++i) ad::adamw_step<double>(p, grad, st, opt);
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 5u);
}

TEST(AdamW, MatchesHandRecurrence) {
  ad::AdamWOptions opt;
  opt.lr = 0.01;
  opt.weight_decay = 0.1;
  ad::AdamWState<double> st;
  std::vector<double> p{0.7};
  const double grads[] = {0.3, -0.2, 0.5};
  // Independent scalar recurrence.
  double q = 0.7, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    std::vector<double> gv{g};
    ad::adamw_step<double>(p, gv, st, opt);
    q -= opt.lr * opt.weight_decay * q;
    m = opt.beta1 * m + (1 - opt.beta1) * g;
    v = opt.beta2 * v + (1 - opt.beta2) * g * g;
    const double mh = m / (1 - std::pow(opt.beta1, t));
    const double vh = v / (1 - std::pow(opt.beta2, t));
    q -= opt.lr * mh / (std::sqrt(vh) + opt.eps);
    EXPECT_NEAR(p[0], q, 1e-15) << "step " << t;
  }
  EXPECT_DOUBLE_EQ(st.m[0], m);
  EXPECT_DOUBLE_EQ(st.v[0], v);
}

TEST(AdamW, DecayShrinksMagnitudeWithZeroGradient) {
  ad::AdamWOptions opt;
  opt.weight_decay = 0.5;
  std::vector<double> p{2.0, -3.0};
  std::vector<double> g{0.0, 0.0};
  ad::AdamWState<double> st;
  ad::adamw_step<double>(p, g, st, opt);
  EXPECT_LT(std::abs(p[0]), 2.0);
  EXPECT_LT(std::abs(p[1]), 3.0);
}

TEST(AdamW, RejectsBadArguments) {
  ad::AdamWOptions opt;
  opt.lr = 0.0;
  std::vector<double> p{1.0}, g{1.0}, g2{1.0, 2.0};
  ad::AdamWState<double> st;
  EXPECT_THROW(ad::adamw_step<double>(p, g, st, opt), ConfigError);
  opt.lr = 1e-3;
  EXPECT_THROW(ad::adamw_step<double>(p, g2, st, opt), ShapeError);
}

TEST(Checkpoint, RoundTripsParametersAndMoments) {
  Rng rng(3);
  ad::ParameterSet<float> ps;
  ps.add("a", random_tensor({2, 3}, rng).cast<float>());
  ps.add("b", random_tensor({4}, rng).cast<float>());
  ad::AdamW<float> opt(ps, {});
  for (auto& p : ps) p.grad = random_tensor(p.value.shape(), rng).cast<float>();
  opt.step();

  const auto dir = std::filesystem::temp_directory_path() / "pearl_ckpt_test";
  std::filesystem::remove_all(dir);
  ad::save_checkpoint(dir / "model.json", ps, &opt, {{"note", "x"}});
  ASSERT_TRUE(std::filesystem::exists(dir / "model.bin"));

  ad::ParameterSet<float> fresh;
  fresh.add("a", Tensor<float>({2, 3}));
  fresh.add("b", Tensor<float>({4}));
  ad::AdamW<float> fresh_opt(fresh, {});
  const auto data = ad::read_checkpoint(dir / "model.json");
  EXPECT_EQ(data.meta.at("note"), "x");
  ad::restore_parameters(data, fresh);
  ad::restore_optimizer(data, fresh, fresh_opt);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    EXPECT_EQ(fresh[i].value, ps[i].value);
    EXPECT_EQ(fresh_opt.states()[i].m, opt.states()[i].m);
    EXPECT_EQ(fresh_opt.states()[i].v, opt.states()[i].v);
  }
  EXPECT_EQ(fresh_opt.steps_taken(), opt.steps_taken());

  ad::ParameterSet<float> wrong;
  wrong.add("a", Tensor<float>({3, 2}));
  EXPECT_THROW(ad::restore_parameters(data, wrong), ShapeError);
  EXPECT_THROW(ad::read_checkpoint(dir / "missing.json"), IoError);
  std::filesystem::remove_all(dir);
}
