#include "gradcheck.hpp"
#include "powerpm/autograd.hpp"
#include "powerpm/optim.hpp"
#include "powerpm/random.hpp"

#include <gtest/gtest.h>

using namespace powerpm;
using ag::Matrix;
using ag::Var;

namespace {

Matrix rnd(Rng& rng, int r, int c) {
  Matrix m(r, c);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = normal01(rng);
  return m;
}

void expect_grad_ok(const std::vector<std::pair<std::string, Var>>& params, const std::function<Var()>& f) {
  const auto rep = testkit::check_gradients(params, f);
  EXPECT_LT(rep.max_rel_error, 1e-6) << "worst tensor: " << rep.worst;
}

}  // namespace

TEST(Autograd, ElementwiseAndLinearOps) {
  Rng rng(1);
  Var a = Var::parameter(rnd(rng, 3, 4));
  Var b = Var::parameter(rnd(rng, 4, 2));
  Var c = Var::parameter(rnd(rng, 3, 4));
  Var r = Var::parameter(rnd(rng, 1, 4));
  expect_grad_ok({{"a", a}, {"b", b}, {"c", c}, {"r", r}}, [&] {
    Var x = ag::add_row(ag::add(ag::hadamard(a, c), ag::scale(ag::sub(a, c), 0.3)), r);
    Var y = ag::matmul(ag::gelu(x), b);
    return ag::sum_all(ag::square(y));
  });
}

TEST(Autograd, ShapeOps) {
  Rng rng(2);
  Var a = Var::parameter(rnd(rng, 3, 6));
  Var b = Var::parameter(rnd(rng, 3, 2));
  Var t = Var::parameter(rnd(rng, 1, 6));
  expect_grad_ok({{"a", a}, {"b", b}, {"t", t}}, [&] {
    Var h = ag::hcat({ag::cols(a, 1, 3), b});
    Var v = ag::vcat({h, ag::transpose(ag::transpose(h))});
    Var rep = ag::replace_rows(a, {0, 2}, t);
    Var f = ag::flatten(v);
    return ag::add(ag::mean_all(ag::square(f)), ag::sum_all(ag::hadamard(ag::mean_rows(rep), ag::row(a, 1))));
  });
}

TEST(Autograd, LayerNormSoftmaxNormalize) {
  Rng rng(3);
  Var x = Var::parameter(rnd(rng, 4, 5));
  Var g = Var::parameter(rnd(rng, 1, 5));
  Var bias = Var::parameter(rnd(rng, 1, 5));
  Var w = Var::parameter(rnd(rng, 5, 4));
  expect_grad_ok({{"x", x}, {"g", g}, {"b", bias}, {"w", w}}, [&] {
    Var n = ag::layer_norm(x, g, bias);
    Var s = ag::softmax_rows(ag::matmul(n, w), true);
    Var l = ag::log_softmax_rows(ag::matmul(ag::normalize_rows(x), w));
    return ag::add(ag::sum_all(ag::square(s)), ag::pick(l, 2, 1));
  });
}

TEST(Autograd, ReluAwayFromKink) {
  Var x = Var::parameter((Matrix(2, 2) << 0.5, -0.7, 1.2, -0.1).finished());
  expect_grad_ok({{"x", x}}, [&] { return ag::sum_all(ag::square(ag::relu(x))); });
}

TEST(Autograd, CausalSoftmaxZeroesFuture) {
  Var x = Var::constant(Matrix::Random(4, 4));
  const Matrix s = ag::softmax_rows(x, true).value();
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(s.row(i).sum(), 1.0, 1e-12);
    for (int j = i + 1; j < 4; ++j) EXPECT_EQ(s(i, j), 0.0);
  }
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  Var x = Var::parameter(Matrix::Constant(1, 1, 3.0));
  Var y = ag::hadamard(x, x);
  ag::backward(ag::sum_all(ag::add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 12.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Var x = Var::parameter(Matrix::Ones(2, 2));
  ag::NoGradGuard ng;
  Var y = ag::square(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, NormalizeRowsRejectsZeroVector) {
  Var x = Var::constant(Matrix::Zero(2, 3));
  EXPECT_THROW(ag::normalize_rows(x), std::domain_error);
}

TEST(Optim, AdamMinimizesQuadratic) {
  Var x = Var::parameter(Matrix::Constant(1, 3, 5.0));
  Adam opt({x}, {0.1});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    ag::backward(ag::sum_all(ag::square(x)));
    opt.step();
  }
  EXPECT_LT(x.value().cwiseAbs().maxCoeff(), 1e-2);
}

TEST(Optim, PlateauSchedulerHalvesAfterPatience) {
  PlateauScheduler s(0.5, 2, 1e-6);
  double lr = 1.0;
  lr = s.observe(1.0, lr);  // first value sets the best
  lr = s.observe(1.0, lr);
  lr = s.observe(1.0, lr);
  EXPECT_EQ(lr, 1.0);
  lr = s.observe(1.0, lr);
  EXPECT_EQ(lr, 0.5);
  lr = s.observe(0.1, lr);
  EXPECT_EQ(lr, 0.5);
}

TEST(Random, DerivedSeedsDifferPerComponent) {
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_EQ(derive_seed(1, "a"), derive_seed(1, "a"));
  Rng r1(5), r2(5);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(uniform01(r1), uniform01(r2));
}
