#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "calib/errors.hpp"
#include "calib/matrix.hpp"

namespace calib {

inline constexpr double kProbFloor = 1e-12;

/// N x K class probabilities with integer labels; the universal input to
/// every calibration metric. Built from probabilities or from logits (kept
/// alongside for temperature scaling and soft SECE).
struct PredictionSet {
  Matrix probs;
  std::vector<int> labels;
  std::optional<Matrix> logits;

  int n() const { return probs.rows(); }
  int k() const { return probs.cols(); }

  static PredictionSet from_probs(Matrix probs, std::vector<int> labels) {
    validate_shape(probs, labels);
    for (int i = 0; i < probs.rows(); ++i) {
      double sum = 0.0;
      for (int j = 0; j < probs.cols(); ++j) {
        double p = probs(i, j);
        if (!(p >= 0.0 && p <= 1.0 + 1e-9))
          throw InputError("probability out of [0,1] at row " + std::to_string(i));
        sum += p;
      }
      if (std::fabs(sum - 1.0) > 1e-6)
        throw InputError("probability row " + std::to_string(i) + " sums to " +
                         format_double(sum) + ", expected 1");
    }
    return PredictionSet{std::move(probs), std::move(labels), std::nullopt};
  }

  static PredictionSet from_logits(Matrix logits, std::vector<int> labels) {
    validate_shape(logits, labels);
    Matrix probs(logits.rows(), logits.cols());
    for (int i = 0; i < logits.rows(); ++i) {
      double m = logits(i, 0);
      for (int j = 1; j < logits.cols(); ++j) m = std::max(m, logits(i, j));
      double sum = 0.0;
      for (int j = 0; j < logits.cols(); ++j) sum += (probs(i, j) = std::exp(logits(i, j) - m));
      for (int j = 0; j < logits.cols(); ++j) probs(i, j) /= sum;
    }
    return PredictionSet{std::move(probs), std::move(labels), std::move(logits)};
  }

  /// Top-label probability per sample.
  std::vector<double> confidences() const {
    std::vector<double> z(n());
    for (int i = 0; i < n(); ++i) {
      double m = probs(i, 0);
      for (int j = 1; j < k(); ++j) m = std::max(m, probs(i, j));
      z[i] = m;
    }
    return z;
  }

  /// Argmax class per sample; ties break to the lowest class index.
  std::vector<int> predictions() const {
    std::vector<int> pred(n());
    for (int i = 0; i < n(); ++i) {
      int arg = 0;
      for (int j = 1; j < k(); ++j)
        if (probs(i, j) > probs(i, arg)) arg = j;
      pred[i] = arg;
    }
    return pred;
  }

  std::vector<int> correctness() const {
    std::vector<int> pred = predictions();
    std::vector<int> c(n());
    for (int i = 0; i < n(); ++i) c[i] = pred[i] == labels[i] ? 1 : 0;
    return c;
  }

 private:
  static void validate_shape(const Matrix& m, const std::vector<int>& labels) {
    if (m.rows() < 1) throw InputError("prediction set needs at least one sample");
    if (m.cols() < 2) throw InputError("prediction set needs at least two classes");
    if (static_cast<int>(labels.size()) != m.rows())
      throw InputError("label count does not match row count");
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] < 0 || labels[i] >= m.cols())
        throw InputError("label out of range at row " + std::to_string(i));
  }
};

enum class BinKind { equal_width, equal_mass };

inline const char* bin_kind_name(BinKind k) {
  return k == BinKind::equal_width ? "equal-width" : "equal-mass";
}

/// Partition of [0,1] confidence space; intervals are half-open with the
/// last bin closed at the upper edge.
struct BinningScheme {
  BinKind kind = BinKind::equal_width;
  int m = 10;
  std::vector<double> edges;  // m + 1 ascending

  static BinningScheme equal_width(int m) {
    if (m < 1) throw ConfigError("bin count must be >= 1");
    BinningScheme s;
    s.kind = BinKind::equal_width;
    s.m = m;
    s.edges.resize(m + 1);
    for (int i = 0; i <= m; ++i) s.edges[i] = static_cast<double>(i) / m;
    return s;
  }

  /// Quantile edges over the given confidences; interior cut j sits at
  /// sorted[(j*n)/m], so populations differ by at most one for distinct
  /// values and ties move stably into the higher bin.
  static BinningScheme equal_mass(int m, std::span<const double> confidences) {
    if (m < 1) throw ConfigError("bin count must be >= 1");
    if (confidences.empty()) throw ConfigError("equal-mass binning needs data");
    std::vector<double> sorted(confidences.begin(), confidences.end());
    std::sort(sorted.begin(), sorted.end());
    BinningScheme s;
    s.kind = BinKind::equal_mass;
    s.m = m;
    s.edges.resize(m + 1);
    s.edges[0] = sorted.front();
    s.edges[m] = sorted.back();
    long long n = static_cast<long long>(sorted.size());
    for (int j = 1; j < m; ++j) s.edges[j] = sorted[(j * n) / m];
    return s;
  }
};

/// Bin index per confidence: [e_i, e_{i+1}) with the last bin closed.
inline std::vector<int> assign_bins(std::span<const double> confidences,
                                    const BinningScheme& scheme) {
  if (scheme.m < 1) throw ConfigError("bin count must be >= 1");
  std::vector<int> bins(confidences.size());
  for (size_t i = 0; i < confidences.size(); ++i) {
    auto it = std::upper_bound(scheme.edges.begin(), scheme.edges.end(), confidences[i]);
    int b = static_cast<int>(it - scheme.edges.begin()) - 1;
    bins[i] = std::clamp(b, 0, scheme.m - 1);
  }
  return bins;
}

/// Per-bin aggregates; empty bins carry count 0 and NaN statistics.
struct BinStats {
  std::vector<long> count;
  std::vector<double> acc;
  std::vector<double> conf;
  std::vector<double> gap;  // acc - conf
  long total = 0;

  bool empty_bin(int b) const { return count[b] == 0; }
};

inline BinStats binned_stats(std::span<const double> confidences, std::span<const int> correct,
                             const BinningScheme& scheme) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<int> bins = assign_bins(confidences, scheme);
  BinStats st;
  st.count.assign(scheme.m, 0);
  std::vector<double> conf_sum(scheme.m, 0.0), acc_sum(scheme.m, 0.0);
  for (size_t i = 0; i < confidences.size(); ++i) {
    int b = bins[i];
    ++st.count[b];
    conf_sum[b] += confidences[i];
    acc_sum[b] += correct[i];
  }
  st.acc.assign(scheme.m, nan);
  st.conf.assign(scheme.m, nan);
  st.gap.assign(scheme.m, nan);
  for (int b = 0; b < scheme.m; ++b) {
    st.total += st.count[b];
    if (st.count[b] == 0) continue;
    st.acc[b] = acc_sum[b] / st.count[b];
    st.conf[b] = conf_sum[b] / st.count[b];
    st.gap[b] = st.acc[b] - st.conf[b];
  }
  return st;
}

/// Reliability-diagram series: per-bin accuracy, confidence and gap.
inline BinStats reliability(const PredictionSet& preds, const BinningScheme& scheme) {
  std::vector<double> z = preds.confidences();
  std::vector<int> c = preds.correctness();
  return binned_stats(z, c, scheme);
}

inline double ece(const BinStats& stats) {
  double total = 0.0;
  for (size_t b = 0; b < stats.count.size(); ++b) {
    if (stats.count[b] == 0) continue;
    total += (static_cast<double>(stats.count[b]) / stats.total) * std::fabs(stats.gap[b]);
  }
  return total;
}

inline double mce(const BinStats& stats) {
  double worst = 0.0;
  for (size_t b = 0; b < stats.count.size(); ++b) {
    if (stats.count[b] == 0) continue;
    worst = std::max(worst, std::fabs(stats.gap[b]));
  }
  return worst;
}

inline double ece(const PredictionSet& preds, const BinningScheme& scheme) {
  return ece(reliability(preds, scheme));
}

inline double mce(const PredictionSet& preds, const BinningScheme& scheme) {
  return mce(reliability(preds, scheme));
}

/// One-vs-rest binned calibration error averaged over all classes:
/// sum_{m,c} |b_{m,c}|/(N*K) * |acc(b_{m,c}) - conf(b_{m,c})| with binary
/// accuracy 1(y == c) and the class-c probability as confidence.
inline double classwise_ece(const PredictionSet& preds, const BinningScheme& scheme) {
  int n = preds.n(), k = preds.k();
  double total = 0.0;
  std::vector<double> pc(n);
  std::vector<int> hit(n);
  for (int c = 0; c < k; ++c) {
    for (int i = 0; i < n; ++i) {
      pc[i] = preds.probs(i, c);
      hit[i] = preds.labels[i] == c ? 1 : 0;
    }
    BinningScheme class_scheme =
        scheme.kind == BinKind::equal_width ? scheme : BinningScheme::equal_mass(scheme.m, pc);
    BinStats st = binned_stats(pc, hit, class_scheme);
    for (int b = 0; b < class_scheme.m; ++b) {
      if (st.count[b] == 0) continue;
      total += (static_cast<double>(st.count[b]) / (static_cast<double>(n) * k)) *
               std::fabs(st.gap[b]);
    }
  }
  return total;
}

/// Adaptive ECE: per class, predictions with class-c probability above the
/// threshold are stable-sorted and sliced into `ranges` equal-population
/// cells; the unweighted mean absolute gap over R*K cells.
inline double adaptive_ece(const PredictionSet& preds, int ranges, double threshold = 0.0) {
  if (ranges < 1) throw ConfigError("adaptive ECE requires at least one range");
  if (ranges > preds.n())
    throw ConfigError("adaptive ECE: more ranges than samples (" + std::to_string(ranges) + " > " +
                      std::to_string(preds.n()) + ")");
  int n = preds.n(), k = preds.k();
  double total = 0.0;
  for (int c = 0; c < k; ++c) {
    std::vector<int> order;
    order.reserve(n);
    for (int i = 0; i < n; ++i)
      if (preds.probs(i, c) >= threshold) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return preds.probs(a, c) < preds.probs(b, c); });
    long long kept = static_cast<long long>(order.size());
    for (int r = 0; r < ranges; ++r) {
      long long lo = (r * kept) / ranges;
      long long hi = ((r + 1LL) * kept) / ranges;
      if (hi <= lo) continue;
      double conf_sum = 0.0, acc_sum = 0.0;
      for (long long t = lo; t < hi; ++t) {
        int i = order[t];
        conf_sum += preds.probs(i, c);
        acc_sum += preds.labels[i] == c ? 1.0 : 0.0;
      }
      double cnt = static_cast<double>(hi - lo);
      total += std::fabs(acc_sum / cnt - conf_sum / cnt) / (static_cast<double>(ranges) * k);
    }
  }
  return total;
}

inline double nll(const PredictionSet& preds) {
  double total = 0.0;
  for (int i = 0; i < preds.n(); ++i)
    total -= std::log(std::max(preds.probs(i, preds.labels[i]), kProbFloor));
  return total / preds.n();
}

/// Mean squared distance between the probability row and the one-hot label.
inline double brier(const PredictionSet& preds) {
  double total = 0.0;
  for (int i = 0; i < preds.n(); ++i) {
    for (int j = 0; j < preds.k(); ++j) {
      double d = preds.probs(i, j) - (preds.labels[i] == j ? 1.0 : 0.0);
      total += d * d;
    }
  }
  return total / preds.n();
}

inline double error_rate(const PredictionSet& preds) {
  std::vector<int> c = preds.correctness();
  long hits = std::accumulate(c.begin(), c.end(), 0L);
  return 1.0 - static_cast<double>(hits) / preds.n();
}

struct SweepRow {
  int m;
  double ece;
  double mce;
};

/// ECE/MCE across equal-width bin counts (the bin-robustness series).
inline std::vector<SweepRow> bin_sweep(const PredictionSet& preds, std::span<const int> ms) {
  if (ms.empty()) throw ConfigError("bin sweep needs at least one bin count");
  std::vector<double> z = preds.confidences();
  std::vector<int> c = preds.correctness();
  std::vector<SweepRow> rows;
  rows.reserve(ms.size());
  for (int m : ms) {
    BinStats st = binned_stats(z, c, BinningScheme::equal_width(m));
    rows.push_back({m, ece(st), mce(st)});
  }
  return rows;
}

/// Scalar summary of predictive and calibration quality. All metric values
/// are kept in [0,1]; percent formatting happens at presentation time.
struct CalibrationReport {
  double error = 0.0;
  double nll = 0.0;
  double brier = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  double ace = 0.0;
  double cece = 0.0;
  double sece = 0.0;
  double kde_ece = 0.0;
  int n = 0;
  int k = 0;
  int bins = 0;
  std::string scheme;
};

}  // namespace calib
