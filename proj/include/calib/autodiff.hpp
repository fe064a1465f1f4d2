#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "calib/errors.hpp"
#include "calib/matrix.hpp"

namespace calib {

/// Handle to a node in a Graph. Cheap to copy; valid only for the graph
/// that created it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode automatic differentiation over dense 2-D double tensors.
///
/// Nodes are appended in topological order and are immutable once created;
/// backward() walks them in reverse creation order. Local gradients are
/// themselves built from graph ops, so an expression that contains a
/// gradient (e.g. a one-step-unrolled SGD update) can be differentiated
/// again -- this is what carries the second-order meta-gradient term.
///
/// Binary ops broadcast 2-D shapes where either dimension is 1.
class Graph {
 public:
  Var input(Matrix value, bool requires_grad = false, std::string name = {}) {
    return push(std::move(value), requires_grad, {}, nullptr, std::move(name));
  }
  Var constant(Matrix value) { return push(std::move(value), false, {}, nullptr, {}); }
  Var constant(double v) { return constant(Matrix::scalar(v)); }

  const Matrix& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool has_grad(Var v) const { return node(v).has_grad; }
  const Matrix& grad(Var v) const {
    const Node& n = node(v);
    if (!n.has_grad) throw ContractError("no gradient recorded for node " + std::to_string(v.id));
    return n.grad;
  }
  std::size_t size() const { return nodes_.size(); }

  // ---- binary ops (broadcasting) ----

  Var add(Var a, Var b) {
    Matrix out = broadcast(a, b, [](double x, double y) { return x + y; }, "add");
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.reduce_like(c.gout, g.value(c.parent(0))));
                  g.accum(c, 1, g.reduce_like(c.gout, g.value(c.parent(1))));
                });
  }

  Var sub(Var a, Var b) {
    Matrix out = broadcast(a, b, [](double x, double y) { return x - y; }, "sub");
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.reduce_like(c.gout, g.value(c.parent(0))));
                  g.accum(c, 1, g.reduce_like(g.neg(c.gout), g.value(c.parent(1))));
                });
  }

  Var mul(Var a, Var b) {
    Matrix out = broadcast(a, b, [](double x, double y) { return x * y; }, "mul");
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.reduce_like(g.mul(c.gout, c.parent(1)), g.value(c.parent(0))));
                  g.accum(c, 1, g.reduce_like(g.mul(c.gout, c.parent(0)), g.value(c.parent(1))));
                });
  }

  Var div(Var a, Var b) {
    Matrix out = broadcast(a, b, [](double x, double y) { return x / y; }, "div");
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [](Graph& g, const Bwd& c) {
                  Var pa = c.parent(0), pb = c.parent(1);
                  g.accum(c, 0, g.reduce_like(g.div(c.gout, pb), g.value(pa)));
                  Var gb = g.neg(g.mul(c.gout, g.div(pa, g.mul(pb, pb))));
                  g.accum(c, 1, g.reduce_like(gb, g.value(pb)));
                });
  }

  Var matmul(Var a, Var b) {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    if (av.cols() != bv.rows())
      throw DimensionError("matmul shape mismatch: " + av.shape_str() + " * " + bv.shape_str());
    Matrix out(av.rows(), bv.cols());
    for (int i = 0; i < av.rows(); ++i)
      for (int k = 0; k < av.cols(); ++k) {
        double aik = av(i, k);
        if (aik == 0.0) continue;
        for (int j = 0; j < bv.cols(); ++j) out(i, j) += aik * bv(k, j);
      }
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.matmul(c.gout, g.transpose(c.parent(1))));
                  g.accum(c, 1, g.matmul(g.transpose(c.parent(0)), c.gout));
                });
  }

  Var transpose(Var a) {
    const Matrix& av = value(a);
    Matrix out(av.cols(), av.rows());
    for (int i = 0; i < av.rows(); ++i)
      for (int j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) { g.accum(c, 0, g.transpose(c.gout)); });
  }

  // ---- unary ops ----

  Var neg(Var a) { return scale(a, -1.0); }

  Var scale(Var a, double s) {
    Matrix out = map(a, [s](double x) { return s * x; });
    return push(std::move(out), needs(a), {a.id},
                [s](Graph& g, const Bwd& c) { g.accum(c, 0, g.scale(c.gout, s)); });
  }

  Var add_scalar(Var a, double s) {
    Matrix out = map(a, [s](double x) { return x + s; });
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) { g.accum(c, 0, c.gout); });
  }

  Var exp(Var a) {
    Matrix out = map(a, [](double x) { return std::exp(x); });
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) { g.accum(c, 0, g.mul(c.gout, c.out)); });
  }

  Var log(Var a) {
    Matrix out = map(a, [](double x) { return std::log(x); });
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) { g.accum(c, 0, g.div(c.gout, c.parent(0))); });
  }

  /// |x|; subgradient 0 at exactly 0.
  Var abs(Var a) {
    Matrix out = map(a, [](double x) { return std::fabs(x); });
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) {
                  const Matrix& x = g.value(c.parent(0));
                  Matrix sign(x.rows(), x.cols());
                  for (int i = 0; i < x.size(); ++i)
                    sign[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
                  g.accum(c, 0, g.mul(c.gout, g.constant(std::move(sign))));
                });
  }

  /// Elementwise x^e for a fixed exponent.
  Var pow(Var a, double e) {
    Matrix out = map(a, [e](double x) { return std::pow(x, e); });
    return push(std::move(out), needs(a), {a.id},
                [e](Graph& g, const Bwd& c) {
                  if (e == 0.0) return;
                  g.accum(c, 0, g.mul(c.gout, g.scale(g.pow(c.parent(0), e - 1.0), e)));
                });
  }

  Var sigmoid(Var a) {
    Matrix out = map(a, [](double x) {
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      double ex = std::exp(x);
      return ex / (1.0 + ex);
    });
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) {
                  Var s = c.out;
                  g.accum(c, 0, g.mul(c.gout, g.mul(s, g.add_scalar(g.neg(s), 1.0))));
                });
  }

  Var relu(Var a) {
    Matrix out = map(a, [](double x) { return x > 0.0 ? x : 0.0; });
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) {
                  const Matrix& x = g.value(c.parent(0));
                  Matrix mask(x.rows(), x.cols());
                  for (int i = 0; i < x.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
                  g.accum(c, 0, g.mul(c.gout, g.constant(std::move(mask))));
                });
  }

  /// Clamp to [lo, hi]; gradient passes where lo <= x <= hi.
  Var clamp(Var a, double lo, double hi) {
    if (lo > hi) throw ContractError("clamp bounds out of order");
    Matrix out = map(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); });
    return push(std::move(out), needs(a), {a.id},
                [lo, hi](Graph& g, const Bwd& c) {
                  const Matrix& x = g.value(c.parent(0));
                  Matrix mask(x.rows(), x.cols());
                  for (int i = 0; i < x.size(); ++i) mask[i] = (x[i] >= lo && x[i] <= hi) ? 1.0 : 0.0;
                  g.accum(c, 0, g.mul(c.gout, g.constant(std::move(mask))));
                });
  }

  /// Row-wise softmax with per-row max subtraction.
  Var softmax_rows(Var a) {
    const Matrix& av = value(a);
    Matrix out(av.rows(), av.cols());
    for (int i = 0; i < av.rows(); ++i) {
      double m = av(i, 0);
      for (int j = 1; j < av.cols(); ++j) m = std::max(m, av(i, j));
      double s = 0.0;
      for (int j = 0; j < av.cols(); ++j) s += (out(i, j) = std::exp(av(i, j) - m));
      for (int j = 0; j < av.cols(); ++j) out(i, j) /= s;
    }
    return push(std::move(out), needs(a), {a.id},
                [](Graph& g, const Bwd& c) {
                  Var s = c.out;
                  Var dot = g.row_sum(g.mul(c.gout, s));  // r x 1
                  g.accum(c, 0, g.mul(s, g.sub(c.gout, dot)));
                });
  }

  // ---- reductions ----

  Var sum(Var a) {
    const Matrix& av = value(a);
    double s = 0.0;
    for (int i = 0; i < av.size(); ++i) s += av[i];
    int r = av.rows(), cc = av.cols();
    return push(Matrix::scalar(s), needs(a), {a.id},
                [r, cc](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.mul(g.constant(Matrix::ones(r, cc)), c.gout));
                });
  }

  Var mean(Var a) {
    const Matrix& av = value(a);
    if (av.size() == 0) throw DimensionError("mean of empty tensor");
    double s = 0.0;
    for (int i = 0; i < av.size(); ++i) s += av[i];
    int r = av.rows(), cc = av.cols();
    double inv = 1.0 / av.size();
    return push(Matrix::scalar(s * inv), needs(a), {a.id},
                [r, cc, inv](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.mul(g.constant(Matrix(r, cc, inv)), c.gout));
                });
  }

  /// Global max; gradient routes to the first (row-major) occurrence.
  Var max(Var a) {
    const Matrix& av = value(a);
    if (av.size() == 0) throw DimensionError("max of empty tensor");
    int arg = 0;
    for (int i = 1; i < av.size(); ++i)
      if (av[i] > av[arg]) arg = i;
    int r = av.rows(), cc = av.cols();
    return push(Matrix::scalar(av[arg]), needs(a), {a.id},
                [r, cc, arg](Graph& g, const Bwd& c) {
                  Matrix mask(r, cc);
                  mask[arg] = 1.0;
                  g.accum(c, 0, g.mul(g.constant(std::move(mask)), c.gout));
                });
  }

  Var row_sum(Var a) {
    const Matrix& av = value(a);
    Matrix out(av.rows(), 1);
    for (int i = 0; i < av.rows(); ++i) {
      double s = 0.0;
      for (int j = 0; j < av.cols(); ++j) s += av(i, j);
      out(i, 0) = s;
    }
    int r = av.rows(), cc = av.cols();
    return push(std::move(out), needs(a), {a.id},
                [r, cc](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.mul(g.constant(Matrix::ones(r, cc)), c.gout));
                });
  }

  Var col_sum(Var a) {
    const Matrix& av = value(a);
    Matrix out(1, av.cols());
    for (int j = 0; j < av.cols(); ++j) {
      double s = 0.0;
      for (int i = 0; i < av.rows(); ++i) s += av(i, j);
      out(0, j) = s;
    }
    int r = av.rows(), cc = av.cols();
    return push(std::move(out), needs(a), {a.id},
                [r, cc](Graph& g, const Bwd& c) {
                  g.accum(c, 0, g.mul(g.constant(Matrix::ones(r, cc)), c.gout));
                });
  }

  /// Per-row max; gradient routes to the first max entry of each row.
  Var row_max(Var a) {
    const Matrix& av = value(a);
    Matrix out(av.rows(), 1);
    std::vector<int> args(av.rows(), 0);
    for (int i = 0; i < av.rows(); ++i) {
      int arg = 0;
      for (int j = 1; j < av.cols(); ++j)
        if (av(i, j) > av(i, arg)) arg = j;
      args[i] = arg;
      out(i, 0) = av(i, arg);
    }
    int r = av.rows(), cc = av.cols();
    return push(std::move(out), needs(a), {a.id},
                [r, cc, args = std::move(args)](Graph& g, const Bwd& c) {
                  Matrix mask(r, cc);
                  for (int i = 0; i < r; ++i) mask(i, args[i]) = 1.0;
                  g.accum(c, 0, g.mul(g.constant(std::move(mask)), c.gout));
                });
  }

  /// Copy of the value with gradient flow cut.
  Var detach(Var a) { return constant(value(a)); }

  // ---- gradients ----

  /// Populates grad buffers of every requires_grad node reachable from loss.
  /// Loss must be scalar. Calling again before zero_grad() is an error.
  void backward(Var loss) {
    if (!value(loss).is_scalar()) throw ContractError("backward requires a scalar (1x1) loss");
    if (backward_done_) throw ContractError("backward called twice without zero_grad()");
    backward_done_ = true;
    auto grads = build_grads(loss);
    for (const auto& [id, gv] : grads) {
      Node& n = nodes_[id];
      if (!n.requires_grad) continue;
      const Matrix& gval = value(gv);
      if (!n.has_grad) {
        n.grad = gval;
        n.has_grad = true;
      } else {
        for (int i = 0; i < n.grad.size(); ++i) n.grad[i] += gval[i];
      }
    }
  }

  /// d(loss)/d(w) for each w, built as graph nodes (differentiable).
  /// Does not touch grad buffers; parameters with no path get zeros.
  std::vector<Var> grad_vars(Var loss, std::span<const Var> wrt) {
    if (!value(loss).is_scalar()) throw ContractError("grad_vars requires a scalar (1x1) loss");
    auto grads = build_grads(loss);
    std::vector<Var> out;
    out.reserve(wrt.size());
    for (Var w : wrt) {
      auto it = grads.find(w.id);
      if (it != grads.end())
        out.push_back(it->second);
      else
        out.push_back(constant(Matrix(value(w).rows(), value(w).cols())));
    }
    return out;
  }

  /// Clears all grad buffers and re-arms backward().
  void zero_grad() {
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Matrix();
    }
    backward_done_ = false;
  }

 private:
  struct Bwd;
  using BackwardFn = std::function<void(Graph&, const Bwd&)>;

  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<int> parents;
    BackwardFn backward;
    std::string name;
  };

  /// Context handed to backward builders.
  struct Bwd {
    Var out;
    Var gout;
    const std::vector<int>* parents;
    std::unordered_map<int, Var>* grads;
    Var parent(int i) const { return Var{(*parents)[i]}; }
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw ContractError("invalid Var handle");
    return nodes_[v.id];
  }

  bool needs(Var a) const { return node(a).requires_grad; }
  bool needs(Var a, Var b) const { return node(a).requires_grad || node(b).requires_grad; }

  Var push(Matrix value, bool requires_grad, std::vector<int> parents, BackwardFn backward,
           std::string name = {}) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    n.name = std::move(name);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  Matrix map(Var a, F f) const {
    const Matrix& av = value(a);
    Matrix out(av.rows(), av.cols());
    for (int i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    return out;
  }

  template <typename F>
  Matrix broadcast(Var a, Var b, F f, const char* opname) const {
    const Matrix& av = value(a);
    const Matrix& bv = value(b);
    int ar = av.rows(), ac = av.cols(), br = bv.rows(), bc = bv.cols();
    if (!((ar == br || ar == 1 || br == 1) && (ac == bc || ac == 1 || bc == 1)))
      throw DimensionError(std::string(opname) + " shape mismatch: " + av.shape_str() + " vs " +
                           bv.shape_str());
    int R = std::max(ar, br), C = std::max(ac, bc);
    Matrix out(R, C);
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < C; ++j)
        out(i, j) = f(av(ar == 1 ? 0 : i, ac == 1 ? 0 : j), bv(br == 1 ? 0 : i, bc == 1 ? 0 : j));
    return out;
  }

  /// Sum g over broadcast axes so its shape matches `like`.
  Var reduce_like(Var g, const Matrix& like) {
    Var t = g;
    if (like.rows() == 1 && value(t).rows() != 1) t = col_sum(t);
    if (like.cols() == 1 && value(t).cols() != 1) t = row_sum(t);
    return t;
  }

  void accum(const Bwd& c, int slot, Var contribution) {
    int pid = (*c.parents)[slot];
    if (!nodes_[pid].requires_grad) return;
    auto [it, fresh] = c.grads->try_emplace(pid, contribution);
    if (!fresh) it->second = add(it->second, contribution);
  }

  std::unordered_map<int, Var> build_grads(Var loss) {
    std::unordered_map<int, Var> grads;
    if (!node(loss).requires_grad) return grads;
    grads[loss.id] = constant(Matrix::scalar(1.0));
    for (int id = loss.id; id >= 0; --id) {
      auto it = grads.find(id);
      if (it == grads.end()) continue;
      // Copy handles: appending nodes must not invalidate what we use.
      Var gout = it->second;
      const Node& n = nodes_[id];  // deque: stable under push_back
      if (!n.backward) continue;
      Bwd ctx{Var{id}, gout, &n.parents, &grads};
      n.backward(*this, ctx);
    }
    return grads;
  }

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace calib
