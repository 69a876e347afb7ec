#include "casdgr/metrics.hpp"

#include "metric_oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using casdgr::metrics::Matte;
using casdgr::testing::brute_conn;
using casdgr::testing::dense_grad_error;
namespace metrics = casdgr::metrics;

namespace {

Matte random_matte(long h, long w, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matte m(h, w);
  for (long i = 0; i < m.size(); ++i) m.data()[i] = u(gen);
  return m;
}

}  // namespace

TEST(Sad, Values) {
  const Matte zero = Matte::Zero(512, 512), one = Matte::Ones(512, 512);
  EXPECT_EQ(metrics::sad(zero, zero), 0.0);
  EXPECT_NEAR(metrics::sad(zero, one), 262.144, 1e-9);
  Matte a = Matte::Constant(10, 10, 0.3), b = a;
  b(3, 4) += 0.5;
  EXPECT_NEAR(metrics::sad(a, b), 0.0005, 1e-15);
  EXPECT_EQ(metrics::sad(a, b), metrics::sad(b, a));
  EXPECT_THROW(metrics::sad(a, Matte::Zero(3, 3)), casdgr::ShapeError);
}

TEST(Mse, Values) {
  const Matte zero = Matte::Zero(6, 7), one = Matte::Ones(6, 7);
  EXPECT_EQ(metrics::mse(one, one), 0.0);
  EXPECT_DOUBLE_EQ(metrics::mse(zero, one), 1.0);
  EXPECT_NEAR(metrics::mse(Matte::Constant(6, 7, 0.4), Matte::Constant(6, 7, 0.5)), 0.01, 1e-15);
  // Works on expressions too.
  EXPECT_NEAR(metrics::mse((zero.array() + 0.1).matrix(), zero), 0.01, 1e-15);
}

TEST(Grad, KernelSupport) {
  const auto k = metrics::gaussian_derivative(1.4);
  EXPECT_EQ(k.smooth.size(), 9);
  EXPECT_NEAR((k.smooth * k.deriv.transpose()).norm(), 1.0, 1e-14);
  EXPECT_GT(k.deriv[0], 0.0);
  EXPECT_DOUBLE_EQ(k.deriv[0], -k.deriv[8]);
  EXPECT_DOUBLE_EQ(k.smooth[1], k.smooth[7]);
}

TEST(Grad, IdentityAndConstants) {
  std::mt19937_64 gen(1);
  const Matte a = random_matte(16, 12, gen);
  EXPECT_EQ(metrics::grad_error(a, a), 0.0);
  EXPECT_LT(metrics::grad_error(Matte::Constant(9, 9, 0.2), Matte::Constant(9, 9, 0.8)), 1e-25);
}

TEST(Grad, MatchesDenseOracle) {
  Matte edge = Matte::Zero(20, 24), shifted = Matte::Zero(20, 24);
  edge.rightCols(12).setOnes();
  shifted.rightCols(9).setOnes();
  const double e = metrics::grad_error(edge, shifted);
  EXPECT_GT(e, 0.0);
  EXPECT_NEAR(e, dense_grad_error(edge, shifted, 1.4), 1e-9);
  std::mt19937_64 gen(2);
  for (int t = 0; t < 10; ++t) {
    const long h = 3 + gen() % 30, w = 3 + gen() % 30;
    const Matte p = random_matte(h, w, gen), g = random_matte(h, w, gen);
    EXPECT_NEAR(metrics::grad_error(p, g), dense_grad_error(p, g, 1.4), 1e-9) << h << "x" << w;
  }
}

TEST(Conn, IdentityAndOpaque) {
  std::mt19937_64 gen(3);
  const Matte a = random_matte(10, 10, gen);
  EXPECT_EQ(metrics::conn_error(a, a), 0.0);
  EXPECT_EQ(metrics::conn_error(Matte::Ones(8, 8), Matte::Ones(8, 8)), 0.0);
}

TEST(Conn, DetachedIslandIsPenalized) {
  Matte gt = Matte::Zero(8, 8);
  gt.block(0, 0, 4, 4).setOnes();
  Matte pred = gt;
  pred.block(6, 6, 2, 2).setOnes();
  const double c = metrics::conn_error(pred, gt);
  EXPECT_GT(c, 0.0);
  EXPECT_NEAR(c, brute_conn(pred, gt), 1e-15);
}

TEST(Conn, MatchesUnionFindOracle) {
  std::mt19937_64 gen(4);
  for (int t = 0; t < 30; ++t) {
    const long h = 2 + gen() % 10, w = 2 + gen() % 10;
    Matte p = random_matte(h, w, gen), g = random_matte(h, w, gen);
    if (t % 3 == 0) p = (p.array() > 0.5).cast<double>();
    EXPECT_NEAR(metrics::conn_error(p, g), brute_conn(p, g), 1e-12);
  }
}

TEST(Evaluate, AllZeroOnIdentity) {
  std::mt19937_64 gen(5);
  const Matte a = random_matte(12, 12, gen);
  const auto r = metrics::evaluate(a, a);
  EXPECT_EQ(r.sad, 0.0);
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_EQ(r.grad, 0.0);
  EXPECT_EQ(r.conn, 0.0);
}

TEST(Matte, TensorRoundTrip) {
  const casdgr::Tensor t = casdgr::Tensor::from({1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Matte m = metrics::to_matte(t);
  EXPECT_EQ(m(0, 2), 3.0);
  EXPECT_EQ(m(1, 0), 4.0);
  EXPECT_EQ(metrics::from_matte(m).values(), t.values());
}
