#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "calib/autodiff.hpp"
#include "calib/errors.hpp"
#include "calib/matrix.hpp"
#include "calib/metrics.hpp"

namespace calib {

/// Gaussian kernel over confidence space: K(x, x') = exp(-|x-x'|^2 / (2h^2)).
struct KernelSpec {
  double bandwidth = 0.01;

  void validate() const {
    if (!(bandwidth > 0.0)) throw ConfigError("kernel bandwidth must be > 0");
  }
};

inline double gaussian_kernel(double zi, double zj, const KernelSpec& spec) {
  spec.validate();
  double d = zi - zj;
  return std::exp(-(d * d) / (2.0 * spec.bandwidth * spec.bandwidth));
}

/// All-pairs soft accuracy: per sample, sigmoids of the true-class logit
/// margin against each other class, aggregated by mean (or min) over the
/// non-target classes. Approaches hard correctness as tau -> 0.
struct SoftAccuracySpec {
  enum class Agg { mean, min };
  double tau = 0.1;
  Agg agg = Agg::mean;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("soft-accuracy temperature must be > 0");
  }
};

inline std::vector<double> soft_accuracy(const Matrix& logits, std::span<const int> labels,
                                         const SoftAccuracySpec& spec = {}) {
  spec.validate();
  int n = logits.rows(), k = logits.cols();
  if (k < 2) throw InputError("soft accuracy needs at least two classes");
  if (static_cast<int>(labels.size()) != n) throw InputError("label count mismatch");
  auto sigma = [](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  };
  std::vector<double> pi(n);
  for (int i = 0; i < n; ++i) {
    double ly = logits(i, labels[i]);
    if (spec.agg == SoftAccuracySpec::Agg::mean) {
      double s = 0.0;
      for (int j = 0; j < k; ++j) {
        if (j == labels[i]) continue;
        s += sigma((ly - logits(i, j)) / spec.tau);
      }
      pi[i] = s / (k - 1);
    } else {
      double worst = std::numeric_limits<double>::infinity();
      for (int j = 0; j < k; ++j) {
        if (j == labels[i]) continue;
        worst = std::min(worst, ly - logits(i, j));
      }
      pi[i] = sigma(worst / spec.tau);
    }
  }
  return pi;
}

/// Graph version of soft_accuracy (n x 1), differentiable in the logits.
inline Var soft_accuracy_expr(Graph& g, Var logits, std::span<const int> labels,
                              const SoftAccuracySpec& spec = {}) {
  spec.validate();
  const Matrix& lv = g.value(logits);
  int n = lv.rows(), k = lv.cols();
  if (k < 2) throw InputError("soft accuracy needs at least two classes");
  if (static_cast<int>(labels.size()) != n) throw InputError("label count mismatch");
  Matrix onehot(n, k);
  for (int i = 0; i < n; ++i) onehot(i, labels[i]) = 1.0;
  Var hot = g.constant(onehot);
  Var ly = g.row_sum(g.mul(logits, hot));  // n x 1
  if (spec.agg == SoftAccuracySpec::Agg::mean) {
    Var margins = g.scale(g.sub(ly, logits), 1.0 / spec.tau);  // broadcast n x k
    Var sig = g.sigmoid(margins);
    Matrix others(n, k, 1.0);
    for (int i = 0; i < n; ++i) others(i, labels[i]) = 0.0;
    Var masked = g.mul(sig, g.constant(others));
    return g.scale(g.row_sum(masked), 1.0 / (k - 1));
  }
  // min aggregation: sigma((ly - max_{j != y} l_j) / tau)
  Matrix penalty(n, k);
  for (int i = 0; i < n; ++i) penalty(i, labels[i]) = -1e30;
  Var rival = g.row_max(g.add(logits, g.constant(penalty)));
  return g.sigmoid(g.scale(g.sub(ly, rival), 1.0 / spec.tau));
}

/// Kernel-weighted soft accuracy of the single-example bin around sample i:
/// SACC(i) = sum_j pi(j) K(z_i, z_j) / sum_j K(z_i, z_j), self term included.
inline double sacc(int i, std::span<const double> z, std::span<const double> pi,
                   const KernelSpec& spec) {
  spec.validate();
  if (z.empty() || z.size() != pi.size()) throw InputError("sacc: bad batch");
  double num = 0.0, den = 0.0;
  for (size_t j = 0; j < z.size(); ++j) {
    double w = gaussian_kernel(z[i], z[j], spec);
    num += pi[j] * w;
    den += w;
  }
  return num / den;  // den >= K(z_i, z_i) = 1
}

inline std::vector<double> sacc_all(std::span<const double> z, std::span<const double> pi,
                                    const KernelSpec& spec) {
  std::vector<double> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = sacc(static_cast<int>(i), z, pi, spec);
  return out;
}

enum class AccuracyMode { soft, hard };

/// Smooth expected calibration error over hard correctness:
/// mean_i |SACC(i) - z_i| with z the top-label probabilities.
inline double sece_hard(const PredictionSet& preds, const KernelSpec& kernel) {
  std::vector<double> z = preds.confidences();
  std::vector<int> correct = preds.correctness();
  std::vector<double> pi(correct.begin(), correct.end());
  std::vector<double> s = sacc_all(z, pi, kernel);
  double total = 0.0;
  for (size_t i = 0; i < z.size(); ++i) total += std::fabs(s[i] - z[i]);
  return total / static_cast<double>(z.size());
}

/// Differentiable SECE over logits: soft accuracies, softmax confidences,
/// kernel-normalized neighborhood accuracy, mean absolute gap. This is the
/// meta loss used to optimize the gamma network.
inline Var sece_expr(Graph& g, Var logits, std::span<const int> labels, const KernelSpec& kernel,
                     const SoftAccuracySpec& soft_spec = {}) {
  kernel.validate();
  int n = g.value(logits).rows();
  Var probs = g.softmax_rows(logits);
  Var z = g.row_max(probs);  // n x 1 confidences
  Var pi = soft_accuracy_expr(g, logits, labels, soft_spec);
  Var diff = g.sub(z, g.transpose(z));  // n x n pairwise confidence gaps
  Var weights =
      g.exp(g.scale(g.mul(diff, diff), -1.0 / (2.0 * kernel.bandwidth * kernel.bandwidth)));
  Var num = g.matmul(weights, pi);
  Var den = g.matmul(weights, g.constant(Matrix::ones(n, 1)));
  Var sacc_v = g.div(num, den);
  return g.mean(g.abs(g.sub(sacc_v, z)));
}

/// SECE dispatcher. Soft mode is differentiable and needs logits; hard mode
/// uses binary correctness and serves evaluation.
inline double sece(const PredictionSet& preds, const KernelSpec& kernel,
                   AccuracyMode mode = AccuracyMode::hard, const SoftAccuracySpec& soft_spec = {}) {
  if (mode == AccuracyMode::hard) return sece_hard(preds, kernel);
  if (!preds.logits.has_value())
    throw InputError("soft-mode SECE requires logits, but the prediction set has none");
  Graph g;
  Var logits = g.input(*preds.logits);
  return g.value(sece_expr(g, logits, preds.labels, kernel, soft_spec))(0, 0);
}

/// KDE estimate of ECE at d = 1 over top-label confidence:
/// integral of |z - pi_hat(z)| p_hat(z) dz on a uniform trapezoid grid,
/// with p_hat normalized to unit mass over the grid. Evaluation only.
inline double kde_ece(const PredictionSet& preds, const KernelSpec& kernel,
                      int grid_points = 512) {
  kernel.validate();
  if (grid_points < 2) throw ConfigError("kde_ece grid needs at least 2 points");
  std::vector<double> z = preds.confidences();
  std::vector<int> correct = preds.correctness();
  int n = preds.n();

  std::vector<double> density(grid_points, 0.0), integrand(grid_points, 0.0);
  double step = 1.0 / (grid_points - 1);
  for (int t = 0; t < grid_points; ++t) {
    double zt = t * step;
    double wsum = 0.0, asum = 0.0;
    for (int i = 0; i < n; ++i) {
      double w = gaussian_kernel(zt, z[i], kernel);
      wsum += w;
      asum += correct[i] * w;
    }
    density[t] = wsum;
    integrand[t] = wsum > 0.0 ? std::fabs(zt - asum / wsum) * wsum : 0.0;
  }
  auto trapezoid = [step](const std::vector<double>& f) {
    double s = 0.0;
    for (size_t t = 0; t + 1 < f.size(); ++t) s += 0.5 * (f[t] + f[t + 1]) * step;
    return s;
  };
  double mass = trapezoid(density);
  if (mass <= 0.0) return 0.0;
  return trapezoid(integrand) / mass;
}

}  // namespace calib
