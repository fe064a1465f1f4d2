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

/// Clamp ceiling for per-sample gamma values.
inline constexpr double kGammaMax = 50.0;

/// Focal loss with a per-sample continuous gamma, differentiable in the
/// probabilities and in gamma. The (1-p)^gamma factor is computed as
/// exp(gamma * log(1-p)) with 1-p clamped to >= 1e-12; at p_y = 1 the
/// -log(p_y) factor is exactly zero, which zeroes the whole term.
/// gamma = 0 reduces the sample's term exactly to cross-entropy.
inline Var focal_loss_expr(Graph& g, Var probs, std::span<const int> labels, Var gammas) {
  const Matrix& pv = g.value(probs);
  const Matrix& gv = g.value(gammas);
  int n = pv.rows(), k = pv.cols();
  if (static_cast<int>(labels.size()) != n) throw InputError("focal loss: label count mismatch");
  if (gv.rows() != n || gv.cols() != 1)
    throw DimensionError("focal loss: gammas must be " + std::to_string(n) + "x1, got " +
                         gv.shape_str());
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw InputError("focal loss: label out of range");
    if (gv(i, 0) < 0.0)
      throw ContractError("focal loss: negative gamma at sample " + std::to_string(i));
  }
  Matrix onehot(n, k);
  for (int i = 0; i < n; ++i) onehot(i, labels[i]) = 1.0;
  Var py = g.row_sum(g.mul(g.clamp(probs, kProbFloor, 1.0), g.constant(onehot)));  // n x 1
  Var gam = g.clamp(gammas, 0.0, kGammaMax);
  Var one_minus = g.clamp(g.add_scalar(g.neg(py), 1.0), kProbFloor, 1.0);
  Var focal_factor = g.exp(g.mul(gam, g.log(one_minus)));
  Var nll_term = g.neg(g.log(py));
  return g.mean(g.mul(focal_factor, nll_term));
}

/// Convenience value-only focal loss.
inline double focal_loss(const Matrix& probs, std::span<const int> labels,
                         std::span<const double> gammas) {
  Graph g;
  Matrix gm(probs.rows(), 1);
  if (static_cast<int>(gammas.size()) != probs.rows())
    throw DimensionError("focal loss: gamma count mismatch");
  for (int i = 0; i < probs.rows(); ++i) gm(i, 0) = gammas[i];
  return g.value(focal_loss_expr(g, g.input(probs), labels, g.input(gm)))(0, 0);
}

/// Slack of the entropy-regularization lower bound
/// L_f >= KL(q || p) + H(q) - gamma * H(p) for a one-hot target q:
/// returns L_f - (-log p_y - gamma * H(p)). Nonnegative by the bound.
inline double entropy_bound_gap(std::span<const double> probs_row, int target, double gamma) {
  if (target < 0 || target >= static_cast<int>(probs_row.size()))
    throw InputError("entropy bound: target out of range");
  double py = std::max(probs_row[target], kProbFloor);
  double one_minus = std::max(1.0 - py, 0.0);
  double lf = one_minus == 0.0 ? 0.0 : std::pow(one_minus, gamma) * (-std::log(py));
  double entropy = 0.0;
  for (double p : probs_row)
    if (p > 0.0) entropy -= p * std::log(p);
  double bound = -std::log(py) - gamma * entropy;
  return lf - bound;
}

}  // namespace calib
