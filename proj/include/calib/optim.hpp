#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "calib/autodiff.hpp"
#include "calib/errors.hpp"
#include "calib/matrix.hpp"

namespace calib {

enum class OptKind { sgd, sgd_momentum, adam };

inline const char* opt_kind_name(OptKind k) {
  switch (k) {
    case OptKind::sgd: return "sgd";
    case OptKind::sgd_momentum: return "sgd-momentum";
    case OptKind::adam: return "adam";
  }
  return "?";
}

inline OptKind opt_kind_from_name(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "sgd-momentum") return OptKind::sgd_momentum;
  if (s == "adam") return OptKind::adam;
  throw ConfigError("unknown optimizer kind: " + s);
}

struct OptimizerConfig {
  OptKind kind = OptKind::sgd;
  double lr = 0.1;
  double momentum = 0.9;  // sgd_momentum only
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;   // adam
  double eps = 1e-8;      // adam
};

/// SGD / SGD-momentum / Adam over a fixed list of parameter matrices.
/// Moment buffers are sized on first apply() and must keep their shapes.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg, std::vector<std::string> param_names = {})
      : cfg_(cfg), names_(std::move(param_names)) {
    if (cfg_.lr < 0.0) throw ConfigError("learning rate must be nonnegative");
  }

  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t step_count() const { return step_; }

  void apply(std::vector<Matrix>& params, const std::vector<Matrix>& grads) {
    if (params.size() != grads.size())
      throw DimensionError("optimizer: parameter/gradient count mismatch");
    init_buffers(params);
    for (size_t i = 0; i < params.size(); ++i) {
      if (!params[i].same_shape(grads[i]))
        throw DimensionError("optimizer: gradient shape mismatch for " + name(i));
      if (!grads[i].all_finite())
        throw DivergenceError("non-finite gradient for parameter " + name(i));
    }
    ++step_;
    for (size_t i = 0; i < params.size(); ++i) {
      Matrix& p = params[i];
      const Matrix& g = grads[i];
      switch (cfg_.kind) {
        case OptKind::sgd:
          for (int j = 0; j < p.size(); ++j) p[j] -= cfg_.lr * g[j];
          break;
        case OptKind::sgd_momentum: {
          Matrix& v = m1_[i];
          for (int j = 0; j < p.size(); ++j) {
            v[j] = cfg_.momentum * v[j] + g[j];
            p[j] -= cfg_.lr * v[j];
          }
          break;
        }
        case OptKind::adam: {
          Matrix& m = m1_[i];
          Matrix& v = m2_[i];
          double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
          double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
          for (int j = 0; j < p.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            double mh = m[j] / bc1;
            double vh = v[j] / bc2;
            p[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
          }
          break;
        }
      }
    }
  }

  // State access for checkpointing.
  const std::vector<Matrix>& first_moments() const { return m1_; }
  const std::vector<Matrix>& second_moments() const { return m2_; }
  void restore(std::int64_t step, std::vector<Matrix> m1, std::vector<Matrix> m2) {
    step_ = step;
    m1_ = std::move(m1);
    m2_ = std::move(m2);
  }

 private:
  void init_buffers(const std::vector<Matrix>& params) {
    if (!m1_.empty()) return;
    for (const auto& p : params) {
      m1_.emplace_back(p.rows(), p.cols());
      if (cfg_.kind == OptKind::adam) m2_.emplace_back(p.rows(), p.cols());
    }
  }
  std::string name(size_t i) const {
    return i < names_.size() ? "'" + names_[i] + "'" : "#" + std::to_string(i);
  }

  OptimizerConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Matrix> m1_;  // momentum / adam m
  std::vector<Matrix> m2_;  // adam v
  std::int64_t step_ = 0;
};

struct UnrolledStep {
  std::vector<Var> updated;     // theta' as graph nodes
  std::vector<Var> gradients;   // d(loss)/d(theta) as graph nodes
  std::vector<Var> velocities;  // post-step velocity nodes (momentum only)
};

/// One differentiable SGD step: theta' = theta - lr * (mu * v + g), with g
/// kept in the graph so a later loss on theta' backpropagates through it
/// (the route for the meta-gradient, second-order term included).
/// Momentum buffers are treated as constants for the current step.
/// `first_order` detaches g, dropping that route (ablation switch).
inline UnrolledStep unrolled_inner_step(Graph& g, std::span<const Var> params, Var inner_loss,
                                        const OptimizerConfig& cfg,
                                        const std::vector<Matrix>* velocity = nullptr,
                                        bool first_order = false) {
  if (cfg.kind == OptKind::adam)
    throw ConfigError("unrolled inner step supports sgd/sgd-momentum only, not adam");
  UnrolledStep out;
  out.gradients = g.grad_vars(inner_loss, params);
  bool use_momentum = cfg.kind == OptKind::sgd_momentum;
  if (use_momentum && (!velocity || velocity->size() != params.size()))
    throw ContractError("unrolled momentum step requires velocity buffers");
  for (size_t i = 0; i < params.size(); ++i) {
    Var step_dir = out.gradients[i];
    if (use_momentum) {
      Matrix scaled = (*velocity)[i];
      for (int j = 0; j < scaled.size(); ++j) scaled[j] *= cfg.momentum;
      step_dir = g.add(g.constant(std::move(scaled)), step_dir);
      out.velocities.push_back(step_dir);
    }
    if (first_order) step_dir = g.detach(step_dir);
    out.updated.push_back(g.sub(params[i], g.scale(step_dir, cfg.lr)));
  }
  return out;
}

}  // namespace calib
