#include "calib/posthoc.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "calib/metrics.hpp"

using calib::Matrix;
using calib::TemperatureFit;

namespace {

// Logits whose NLL-optimal temperature has been normalized to ~1 by a
// preliminary fit: overconfident raw margins divided by the fitted T.
struct Calibrated {
  Matrix logits;
  std::vector<int> labels;
};

Calibrated self_calibrated_fixture(std::uint64_t seed = 29, int n = 400, int k = 4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.2);
  std::uniform_int_distribution<int> cls(0, k - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix logits(n, k);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    int true_class = cls(rng);
    labels[i] = true_class;
    for (int j = 0; j < k; ++j) logits(i, j) = noise(rng) + (j == true_class ? 2.0 : 0.0);
    if (unit(rng) < 0.15) labels[i] = cls(rng);  // keep some irreducible error
  }
  TemperatureFit pre = calib::fit_temperature(logits, labels);
  for (int i = 0; i < logits.size(); ++i) logits[i] /= pre.temperature;
  return {logits, labels};
}

TEST(ApplyTemperature, IdentityAndLimits) {
  Matrix logits{{2.0, -1.0, 0.5}, {0.0, 3.0, 1.0}};
  Matrix at1 = calib::apply_temperature(logits, 1.0);
  // T=1 equals a plain softmax.
  for (int i = 0; i < 2; ++i) {
    double m = std::max({logits(i, 0), logits(i, 1), logits(i, 2)});
    double s = 0.0;
    for (int j = 0; j < 3; ++j) s += std::exp(logits(i, j) - m);
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(at1(i, j), std::exp(logits(i, j) - m) / s, 1e-15);
  }
  // Large T flattens to uniform.
  Matrix flat = calib::apply_temperature(logits, 1e6);
  for (int i = 0; i < flat.size(); ++i) EXPECT_NEAR(flat[i], 1.0 / 3.0, 1e-6);

  EXPECT_THROW(calib::apply_temperature(logits, 0.0), calib::ConfigError);
  EXPECT_THROW(calib::apply_temperature(logits, -2.0), calib::ConfigError);
}

TEST(ApplyTemperature, ArgmaxInvariant) {
  std::mt19937_64 rng(31);
  Matrix logits = calib::uniform_matrix(rng, 50, 5, -3.0, 3.0);
  std::vector<int> base(50);
  for (int i = 0; i < 50; ++i) {
    int arg = 0;
    for (int j = 1; j < 5; ++j)
      if (logits(i, j) > logits(i, arg)) arg = j;
    base[i] = arg;
  }
  for (double t : {0.1, 3.0, 10.0}) {
    Matrix probs = calib::apply_temperature(logits, t);
    for (int i = 0; i < 50; ++i) {
      int arg = 0;
      for (int j = 1; j < 5; ++j)
        if (probs(i, j) > probs(i, arg)) arg = j;
      EXPECT_EQ(arg, base[i]);
    }
  }
}

TEST(FitTemperature, IdempotentNearOne) {
  Calibrated fix = self_calibrated_fixture();
  TemperatureFit fit = calib::fit_temperature(fix.logits, fix.labels);
  EXPECT_GT(fit.temperature, 0.8);
  EXPECT_LT(fit.temperature, 1.25);
}

TEST(FitTemperature, RecoversInverseScaling) {
  Calibrated fix = self_calibrated_fixture();
  Matrix doubled = fix.logits;
  for (int i = 0; i < doubled.size(); ++i) doubled[i] *= 2.0;
  TemperatureFit fit = calib::fit_temperature(doubled, fix.labels);
  EXPECT_NEAR(fit.temperature, 2.0, 0.05);
}

TEST(FitTemperature, ScalingComposition) {
  // Scaling logits by c rescales the fitted temperature by c.
  Calibrated fix = self_calibrated_fixture(57);
  TemperatureFit base = calib::fit_temperature(fix.logits, fix.labels);
  for (double c : {0.5, 3.0}) {
    Matrix scaled = fix.logits;
    for (int i = 0; i < scaled.size(); ++i) scaled[i] *= c;
    TemperatureFit fit = calib::fit_temperature(scaled, fix.labels);
    EXPECT_NEAR(fit.temperature / base.temperature, c, 1e-3 * c + 2e-3);
  }
}

TEST(FitTemperature, FittedNllNeverWorseThanUnit) {
  std::mt19937_64 rng(37);
  for (int rep = 0; rep < 10; ++rep) {
    Matrix logits = calib::uniform_matrix(rng, 60, 4, -4.0, 4.0);
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) labels.push_back(static_cast<int>(rng() % 4));
    TemperatureFit fit = calib::fit_temperature(logits, labels);
    EXPECT_LE(fit.nll, calib::nll_at_temperature(logits, labels, 1.0) + 1e-12);
    EXPECT_GT(fit.temperature, 0.0);
  }
}

TEST(FitTemperature, SingleConfidentSampleRunsToLowerBound) {
  // One sample whose correct class has the max logit: sharpening (small T)
  // monotonically improves NLL, so the search lands at the lower edge.
  Matrix logits{{3.0, 1.0, -1.0}};
  TemperatureFit fit = calib::fit_temperature(logits, std::vector<int>{0});
  EXPECT_LT(fit.temperature, 0.06);
}

TEST(FitTemperature, DegenerateConstantRows) {
  Matrix logits{{0.5, 0.5, 0.5}, {-1.0, -1.0, -1.0}};
  TemperatureFit fit = calib::fit_temperature(logits, std::vector<int>{0, 2});
  EXPECT_TRUE(fit.degenerate);
  EXPECT_DOUBLE_EQ(fit.temperature, 1.0);
}

TEST(FitTemperature, AccuracyInvariantUnderScaling) {
  Calibrated fix = self_calibrated_fixture(61);
  auto preds_before =
      calib::PredictionSet::from_logits(fix.logits, fix.labels);
  Matrix scaled = fix.logits;
  for (int i = 0; i < scaled.size(); ++i) scaled[i] *= 4.0;
  auto preds_after = calib::PredictionSet::from_logits(scaled, fix.labels);
  EXPECT_DOUBLE_EQ(calib::error_rate(preds_before), calib::error_rate(preds_after));
}

}  // namespace
