#include "calib/gammanet.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "oracles.hpp"

using calib::GammaNetParams;
using calib::Graph;
using calib::Matrix;
using calib::Var;

namespace {

TEST(GammaForward, ZeroHeadGivesZeroGamma) {
  GammaNetParams params;
  params.attention = Matrix{{0.3, -0.2}, {0.1, 0.4}};
  params.head = Matrix(2, 1, 0.0);
  Matrix x{{1.0, -2.0}, {0.5, 0.25}, {0.0, 0.0}};
  Matrix g = calib::gamma_forward(x, params);
  ASSERT_EQ(g.rows(), 3);
  ASSERT_EQ(g.cols(), 1);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g(i, 0), 0.0);
}

TEST(GammaForward, HandComputedIdentityAttention) {
  // b=1, d=2, k=2, A=I, x=0 -> p=(0.5,0.5), recon=(0.5,0.5);
  // W=(0.01,0.01), tau=0.01 -> gamma = |0.01|/0.01 = 1.
  GammaNetParams params;
  params.attention = Matrix{{1.0, 0.0}, {0.0, 1.0}};
  params.head = Matrix{{0.01}, {0.01}};
  params.temperature = 0.01;
  Matrix x{{0.0, 0.0}};
  Matrix g = calib::gamma_forward(x, params);
  EXPECT_NEAR(g(0, 0), 1.0, 1e-12);
}

TEST(GammaForward, SignOfHeadIrrelevant) {
  std::mt19937_64 rng(5);
  GammaNetParams params;
  params.attention = calib::uniform_matrix(rng, 6, 3, -0.5, 0.5);
  params.head = calib::uniform_matrix(rng, 6, 1, -1.0, 1.0);
  Matrix x = calib::normal_matrix(rng, 4, 6);
  Matrix a = calib::gamma_forward(x, params);
  for (int i = 0; i < params.head.size(); ++i) params.head[i] = -params.head[i];
  Matrix b = calib::gamma_forward(x, params);
  for (int i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(GammaForward, NonnegativeAndShaped) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    int b = 1 + static_cast<int>(rng() % 8);
    GammaNetParams params;
    params.attention = calib::uniform_matrix(rng, 5, 4, -1.0, 1.0);
    params.head = calib::uniform_matrix(rng, 5, 1, -2.0, 2.0);
    Matrix x = calib::normal_matrix(rng, b, 5, 0.0, 3.0);
    Matrix g = calib::gamma_forward(x, params);
    ASSERT_EQ(g.rows(), b);
    ASSERT_EQ(g.cols(), 1);
    for (int i = 0; i < g.size(); ++i) {
      EXPECT_GE(g[i], 0.0);
      EXPECT_LE(g[i], params.gamma_max);
    }
  }
}

TEST(GammaForward, RowShiftInvariance) {
  // A's first input row is (1, 1), so shifting x along (c, 0) adds the
  // constant c to every attention score of that sample; the row softmax
  // must absorb it and leave gamma unchanged.
  GammaNetParams params;
  params.attention = Matrix{{1.0, 1.0}, {0.5, -0.5}};
  params.head = Matrix{{0.2}, {-0.4}};
  params.temperature = 0.01;
  Matrix x{{0.3, -0.7}};
  Matrix shifted{{0.3 + 2.0, -0.7}};
  Matrix a = calib::gamma_forward(x, params);
  Matrix b = calib::gamma_forward(shifted, params);
  EXPECT_NEAR(a(0, 0), b(0, 0), 1e-10);
}

TEST(GammaForward, GradientsMatchFiniteDifferencesAwayFromKink) {
  std::mt19937_64 rng(11);
  int checked = 0;
  while (checked < 3) {
    Matrix x = calib::normal_matrix(rng, 4, 5);
    Matrix attention = calib::uniform_matrix(rng, 5, 3, -0.6, 0.6);
    Matrix head = calib::uniform_matrix(rng, 5, 1, -1.0, 1.0);
    // Filter: keep the pre-abs projection away from the |.| kink.
    GammaNetParams p;
    p.attention = attention;
    p.head = head;
    p.temperature = 0.01;
    Matrix gam = calib::gamma_forward(x, p);
    bool safe = true;
    for (int i = 0; i < gam.size(); ++i)
      if (gam(i, 0) * p.temperature < 1e-3 || gam(i, 0) >= p.gamma_max) safe = false;
    if (!safe) continue;
    ++checked;
    std::vector<Matrix> params{x, attention, head};
    oracle::check_grads_fd(params, [](Graph& g, const std::vector<Var>& v) {
      Var gamma = calib::gamma_forward_expr(g, v[0], v[1], v[2], 0.01);
      return g.mean(g.mul(gamma, gamma));
    });
  }
}

TEST(InitGamma, TargetMeanOnProbeBatch) {
  std::mt19937_64 rng(13);
  Matrix probe = calib::normal_matrix(rng, 64, 8);
  GammaNetParams params = calib::init_gamma_params(8, 4, 42, 1.0, 0.01, &probe);
  Matrix g = calib::gamma_forward(probe, params);
  double mean = 0.0;
  for (int i = 0; i < g.size(); ++i) mean += g[i];
  mean /= g.size();
  EXPECT_GE(mean, 0.9);
  EXPECT_LE(mean, 1.1);
}

TEST(InitGamma, DeterministicPerSeed) {
  GammaNetParams a = calib::init_gamma_params(8, 4, 7, 1.0);
  GammaNetParams b = calib::init_gamma_params(8, 4, 7, 1.0);
  EXPECT_EQ(0, std::memcmp(a.attention.data(), b.attention.data(),
                           sizeof(double) * a.attention.size()));
  EXPECT_EQ(0, std::memcmp(a.head.data(), b.head.data(), sizeof(double) * a.head.size()));
  GammaNetParams c = calib::init_gamma_params(8, 4, 8, 1.0);
  EXPECT_NE(0, std::memcmp(a.attention.data(), c.attention.data(),
                           sizeof(double) * a.attention.size()));
}

TEST(InitGamma, ZeroTargetZeroesHead) {
  GammaNetParams p = calib::init_gamma_params(6, 3, 1, 0.0);
  for (int i = 0; i < p.head.size(); ++i) EXPECT_DOUBLE_EQ(p.head[i], 0.0);
}

TEST(GammaForward, SoftplusAblationStaysPositive) {
  std::mt19937_64 rng(17);
  GammaNetParams params;
  params.attention = calib::uniform_matrix(rng, 5, 3, -0.6, 0.6);
  params.head = calib::uniform_matrix(rng, 5, 1, -1.0, 1.0);
  params.positivity = GammaNetParams::Positivity::softplus;
  Matrix x = calib::normal_matrix(rng, 6, 5);
  Matrix g = calib::gamma_forward(x, params);
  for (int i = 0; i < g.size(); ++i) EXPECT_GE(g[i], 0.0);
}

TEST(GammaForward, ConfigAndShapeErrors) {
  GammaNetParams params;
  params.attention = Matrix(3, 2, 0.1);
  params.head = Matrix(3, 1, 0.1);
  params.temperature = 0.0;
  Matrix x(2, 3, 0.5);
  EXPECT_THROW(calib::gamma_forward(x, params), calib::ConfigError);
  params.temperature = 0.01;
  Matrix bad(2, 4, 0.5);
  EXPECT_THROW(calib::gamma_forward(bad, params), calib::DimensionError);
}

}  // namespace
