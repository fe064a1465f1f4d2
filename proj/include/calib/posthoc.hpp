#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "calib/errors.hpp"
#include "calib/matrix.hpp"
#include "calib/metrics.hpp"

namespace calib {

struct TemperatureFit {
  double temperature = 1.0;
  double nll = 0.0;        // validation NLL at the fitted temperature
  int iterations = 0;
  bool degenerate = false;  // constant logit rows; T pinned to 1
};

/// Row softmax of logits / T. The argmax is unchanged for any T > 0.
inline Matrix apply_temperature(const Matrix& logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  Matrix probs(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    double m = logits(i, 0);
    for (int j = 1; j < logits.cols(); ++j) m = std::max(m, logits(i, j));
    double sum = 0.0;
    for (int j = 0; j < logits.cols(); ++j)
      sum += (probs(i, j) = std::exp((logits(i, j) - m) / temperature));
    for (int j = 0; j < logits.cols(); ++j) probs(i, j) /= sum;
  }
  return probs;
}

inline double nll_at_temperature(const Matrix& logits, std::span<const int> labels,
                                 double temperature) {
  Matrix probs = apply_temperature(logits, temperature);
  double total = 0.0;
  for (int i = 0; i < logits.rows(); ++i)
    total -= std::log(std::max(probs(i, labels[i]), kProbFloor));
  return total / logits.rows();
}

/// Fits the single scalar T by minimizing NLL(softmax(logits / T)) with a
/// golden-section search on log T over [0.05, 20], to |dT| < 1e-4. The
/// candidate T = 1 is always considered, so the fitted NLL never exceeds
/// the uncalibrated one. Constant logit rows make NLL flat in T; that case
/// returns T = 1 with the degenerate flag set.
inline TemperatureFit fit_temperature(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() < 1) throw InputError("temperature fit needs at least one sample");
  if (static_cast<int>(labels.size()) != logits.rows())
    throw InputError("temperature fit: label count mismatch");

  TemperatureFit fit;
  bool all_constant = true;
  for (int i = 0; i < logits.rows() && all_constant; ++i)
    for (int j = 1; j < logits.cols(); ++j)
      if (logits(i, j) != logits(i, 0)) {
        all_constant = false;
        break;
      }
  if (all_constant) {
    fit.degenerate = true;
    fit.temperature = 1.0;
    fit.nll = nll_at_temperature(logits, labels, 1.0);
    return fit;
  }

  const double lo_t = 0.05, hi_t = 20.0;
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;  // 0.618...
  double a = std::log(lo_t), b = std::log(hi_t);
  double x1 = b - phi * (b - a);
  double x2 = a + phi * (b - a);
  double f1 = nll_at_temperature(logits, labels, std::exp(x1));
  double f2 = nll_at_temperature(logits, labels, std::exp(x2));
  int iters = 0;
  while (std::exp(b) - std::exp(a) > 1e-4 && iters < 200) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - phi * (b - a);
      f1 = nll_at_temperature(logits, labels, std::exp(x1));
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + phi * (b - a);
      f2 = nll_at_temperature(logits, labels, std::exp(x2));
    }
    ++iters;
  }
  double best_t = std::exp(0.5 * (a + b));
  double best_nll = nll_at_temperature(logits, labels, best_t);
  double at_one = nll_at_temperature(logits, labels, 1.0);
  if (at_one <= best_nll) {
    best_t = 1.0;
    best_nll = at_one;
  }
  fit.temperature = best_t;
  fit.nll = best_nll;
  fit.iterations = iters;
  return fit;
}

}  // namespace calib
