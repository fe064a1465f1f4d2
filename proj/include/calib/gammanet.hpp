#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "calib/autodiff.hpp"
#include "calib/errors.hpp"
#include "calib/focal.hpp"
#include "calib/matrix.hpp"

namespace calib {

/// Meta-network parameters: an attention projection A (d x k, weight-tied
/// between projection and reconstruction) followed by a head W (d x 1),
/// with a fixed temperature tau. gamma = |((softmax(x A)) A^T) W| / tau.
struct GammaNetParams {
  Matrix attention;  // d x k
  Matrix head;       // d x 1
  double temperature = 0.01;
  double gamma_max = kGammaMax;
  enum class Positivity { abs_value, softplus } positivity = Positivity::abs_value;

  int feature_dim() const { return attention.rows(); }
  int heads() const { return attention.cols(); }

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("gamma-net temperature must be > 0");
    if (attention.rows() != head.rows())
      throw DimensionError("gamma-net: attention (" + attention.shape_str() + ") and head (" +
                           head.shape_str() + ") disagree on feature width");
    if (head.cols() != 1) throw DimensionError("gamma-net: head must be d x 1");
  }
};

/// Attention transform to per-sample gamma (b x 1), differentiable in the
/// features and both parameter matrices.
inline Var gamma_forward_expr(Graph& g, Var features, Var attention, Var head, double temperature,
                              double gamma_max = kGammaMax,
                              GammaNetParams::Positivity positivity =
                                  GammaNetParams::Positivity::abs_value) {
  if (!(temperature > 0.0)) throw ConfigError("gamma-net temperature must be > 0");
  Var scores = g.matmul(features, attention);       // b x k
  Var weights = g.softmax_rows(scores);             // b x k
  Var recon = g.matmul(weights, g.transpose(attention));  // b x d
  Var raw = g.matmul(recon, head);                  // b x 1
  Var positive;
  if (positivity == GammaNetParams::Positivity::abs_value) {
    positive = g.abs(raw);
  } else {
    // softplus(x) = relu(x) + log1p(exp(-|x|)), overflow-safe
    positive = g.add(g.relu(raw), g.log(g.add_scalar(g.exp(g.neg(g.abs(raw))), 1.0)));
  }
  return g.clamp(g.scale(positive, 1.0 / temperature), 0.0, gamma_max);
}

/// Value-only forward pass.
inline Matrix gamma_forward(const Matrix& features, const GammaNetParams& params) {
  params.validate();
  Graph g;
  Var out = gamma_forward_expr(g, g.input(features), g.input(params.attention),
                               g.input(params.head), params.temperature, params.gamma_max,
                               params.positivity);
  return g.value(out);
}

/// Deterministic initialization: A gets small random values (scale 1/sqrt(d)),
/// then is shrunk so the attention scores of the probe batch stay in the
/// near-uniform softmax regime -- every sample starts with almost the same
/// gamma. W starts as a random direction and is rescaled so the mean gamma
/// over the probe batch equals target_init_gamma. Passing no probe uses a
/// standard normal batch of 64 rows.
inline GammaNetParams init_gamma_params(int d, int k, std::uint64_t seed,
                                        double target_init_gamma, double temperature = 0.01,
                                        const Matrix* probe = nullptr) {
  if (d < 1 || k < 1) throw ConfigError("gamma-net dimensions must be >= 1");
  if (target_init_gamma < 0.0) throw ConfigError("initial gamma target must be >= 0");
  std::mt19937_64 rng(seed);
  GammaNetParams params;
  params.temperature = temperature;
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  params.attention = uniform_matrix(rng, d, k, -scale, scale);
  params.head = uniform_matrix(rng, d, 1, -1.0, 1.0);
  params.validate();

  Matrix probe_local;
  if (!probe) {
    probe_local = normal_matrix(rng, 64, d);
    probe = &probe_local;
  }

  // Keep initial attention scores small (std ~ 0.25 across heads) so the
  // softmax starts near uniform, and align W with the probe-mean of the
  // reconstruction so the pre-|.| projection has a dominant constant
  // component: every sample starts with nearly the same gamma.
  {
    Graph g;
    Var a = g.constant(params.attention);
    Var scores = g.matmul(g.constant(*probe), a);
    const Matrix& sv = g.value(scores);
    double mean = 0.0;
    for (int i = 0; i < sv.size(); ++i) mean += sv[i];
    mean /= std::max(sv.size(), 1);
    double var = 0.0;
    for (int i = 0; i < sv.size(); ++i) var += (sv[i] - mean) * (sv[i] - mean);
    double score_std = std::sqrt(var / std::max(sv.size(), 1));
    if (score_std > 0.25) {
      for (int i = 0; i < params.attention.size(); ++i) params.attention[i] *= 0.25 / score_std;
      a = g.constant(params.attention);
      scores = g.matmul(g.constant(*probe), a);
    }
    const Matrix& recon = g.value(g.matmul(g.softmax_rows(scores), g.transpose(a)));
    Matrix mean_recon(d, 1);
    for (int i = 0; i < recon.rows(); ++i)
      for (int j = 0; j < d; ++j) mean_recon(j, 0) += recon(i, j) / recon.rows();
    double norm = 0.0;
    for (int j = 0; j < d; ++j) norm += mean_recon(j, 0) * mean_recon(j, 0);
    if (norm > 1e-24) params.head = mean_recon;  // degenerate probe keeps the random head
  }

  if (target_init_gamma == 0.0) {
    params.head = Matrix(d, 1, 0.0);
    return params;
  }
  // Calibrate against the unclamped gamma so the rescale is exact.
  GammaNetParams unclamped = params;
  unclamped.gamma_max = std::numeric_limits<double>::infinity();
  Matrix gammas = gamma_forward(*probe, unclamped);
  double mean = 0.0;
  for (int i = 0; i < gammas.size(); ++i) mean += gammas[i];
  mean /= gammas.size();
  if (mean < 1e-30) {
    params.head = Matrix(d, 1, 0.0);  // degenerate probe; cannot calibrate scale
    return params;
  }
  double factor = target_init_gamma / mean;
  for (int i = 0; i < params.head.size(); ++i) params.head[i] *= factor;
  return params;
}

}  // namespace calib
