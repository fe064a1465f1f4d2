#pragma once

#include <algorithm>
#include <cmath>
#include <iterator>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "calib/autodiff.hpp"
#include "calib/datasets.hpp"
#include "calib/errors.hpp"
#include "calib/focal.hpp"
#include "calib/gammanet.hpp"
#include "calib/matrix.hpp"
#include "calib/metrics.hpp"
#include "calib/optim.hpp"
#include "calib/report.hpp"
#include "calib/smoothcal.hpp"

namespace calib {

enum class TrainMode { ce, focal_fixed, fl_gamma_sece, fl_gamma_none };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::ce: return "ce";
    case TrainMode::focal_fixed: return "focal-fixed";
    case TrainMode::fl_gamma_sece: return "fl-gamma-sece";
    case TrainMode::fl_gamma_none: return "fl-gamma-none";
  }
  return "?";
}

inline TrainMode train_mode_from_name(const std::string& s) {
  if (s == "ce") return TrainMode::ce;
  if (s == "focal-fixed") return TrainMode::focal_fixed;
  if (s == "fl-gamma-sece") return TrainMode::fl_gamma_sece;
  if (s == "fl-gamma-none") return TrainMode::fl_gamma_none;
  throw ConfigError("unknown train mode: " + s);
}

inline bool is_meta_mode(TrainMode m) {
  return m == TrainMode::fl_gamma_sece || m == TrainMode::fl_gamma_none;
}

/// The full training recipe. Defaults mirror the reference constants:
/// SGD momentum 0.9 at lr 0.1 for the backbone, Adam 1e-3 for the meta
/// network, bandwidth 0.01, gamma-net temperature 0.01, gamma init 1.0,
/// 8:1:1 train/val/meta-val over the non-test portion.
struct MetaTrainConfig {
  TrainMode mode = TrainMode::ce;
  int epochs = 40;
  int batch_size = 32;
  OptimizerConfig inner{OptKind::sgd_momentum, 0.1, 0.9};
  OptimizerConfig outer{OptKind::adam, 1e-3};
  double fixed_gamma = 1.0;   // focal-fixed mode
  double gamma_init = 1.0;    // meta modes: target mean initial gamma
  double gamma_net_tau = 0.01;
  int gamma_heads = 0;        // 0 -> number of classes
  KernelSpec kernel{0.01};
  SoftAccuracySpec soft_acc{};
  SplitRatios split{};
  std::uint64_t seed = 0;
  int hidden = 64;
  int penultimate = 32;
  bool detach_features = true;  // gamma-net input does not backprop into theta
  bool first_order = false;     // ablation: detach the inner gradient
  double decay1_frac = 0.4;     // lr x0.1 at these fractions of total epochs
  double decay2_frac = 0.7;
  double decay_factor = 0.1;
  double divergence_threshold = 1e6;
  ReportOptions report{};
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_error = 0.0;
  double test_error = 0.0;
  double test_ece = 0.0;
  double gamma_mean = 0.0;
  double gamma_std = 0.0;
};

/// Exact column contract: epoch,train_loss,val_error,test_error,test_ece,
/// gamma_mean,gamma_std.
inline std::string train_log_csv(const std::vector<EpochLog>& rows) {
  std::string out = "epoch,train_loss,val_error,test_error,test_ece,gamma_mean,gamma_std\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," +
           format_double(r.val_error) + "," + format_double(r.test_error) + "," +
           format_double(r.test_ece) + "," + format_double(r.gamma_mean) + "," +
           format_double(r.gamma_std) + "\n";
  }
  return out;
}

struct TrainResult {
  std::vector<EpochLog> log;
  CalibrationReport report;  // evaluated on the best-validation-error model
  int selected_epoch = 0;
  double best_val_error = 0.0;
};

/// Two-hidden-layer MLP: d_in -> hidden -> penultimate -> K logits, ReLU
/// activations. The penultimate activations feed the gamma network.
class Backbone {
 public:
  Backbone() = default;
  Backbone(int d_in, int hidden, int penultimate, int classes, std::mt19937_64& rng)
      : d_in_(d_in), hidden_(hidden), penult_(penultimate), classes_(classes) {
    auto layer = [&rng](int in, int out_dim) {
      double s = 1.0 / std::sqrt(static_cast<double>(in));
      return uniform_matrix(rng, in, out_dim, -s, s);
    };
    params_ = {layer(d_in, hidden),       Matrix(1, hidden),
               layer(hidden, penultimate), Matrix(1, penultimate),
               layer(penultimate, classes), Matrix(1, classes)};
  }

  static const std::vector<std::string>& param_names() {
    static const std::vector<std::string> names{"W1", "b1", "W2", "b2", "W3", "b3"};
    return names;
  }

  std::vector<Matrix>& params() { return params_; }
  const std::vector<Matrix>& params() const { return params_; }
  int penultimate_width() const { return penult_; }
  int classes() const { return classes_; }
  int input_dim() const { return d_in_; }
  int hidden_width() const { return hidden_; }

  struct Fwd {
    Var penultimate;
    Var logits;
  };

  static Fwd forward_expr(Graph& g, Var x, std::span<const Var> p) {
    Var h1 = g.relu(g.add(g.matmul(x, p[0]), p[1]));
    Var h2 = g.relu(g.add(g.matmul(h1, p[2]), p[3]));
    Var logits = g.add(g.matmul(h2, p[4]), p[5]);
    return {h2, logits};
  }

  Matrix logits_of(const Matrix& x) const { return eval(x).second; }
  Matrix penultimate_of(const Matrix& x) const { return eval(x).first; }

 private:
  std::pair<Matrix, Matrix> eval(const Matrix& x) const {
    Graph g;
    std::vector<Var> p;
    p.reserve(params_.size());
    for (const auto& m : params_) p.push_back(g.constant(m));
    Fwd f = forward_expr(g, g.constant(x), p);
    return {g.value(f.penultimate), g.value(f.logits)};
  }

  int d_in_ = 0, hidden_ = 0, penult_ = 0, classes_ = 0;
  std::vector<Matrix> params_;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, std::span<const int> idx) {
  Matrix out(static_cast<int>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < m.cols(); ++j) out(static_cast<int>(i), j) = m(idx[i], j);
  return out;
}

inline std::vector<int> gather(const std::vector<int>& v, std::span<const int> idx) {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return nlohmann::json{{"r", m.rows()}, {"c", m.cols()}, {"v", m.values()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
  Matrix m(j.at("r").get<int>(), j.at("c").get<int>());
  std::vector<double> v = j.at("v").get<std::vector<double>>();
  if (static_cast<int>(v.size()) != m.size()) throw ParseError("checkpoint matrix size mismatch");
  m.values() = std::move(v);
  return m;
}

inline nlohmann::json matrices_to_json(const std::vector<Matrix>& ms) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : ms) arr.push_back(matrix_to_json(m));
  return arr;
}

inline std::vector<Matrix> matrices_from_json(const nlohmann::json& arr) {
  std::vector<Matrix> out;
  for (const auto& j : arr) out.push_back(matrix_from_json(j));
  return out;
}

}  // namespace detail

/// Alternating optimization driver: inner steps update the backbone with the
/// focal-gamma loss; in fl-gamma-sece the outer step updates the gamma
/// network with the soft SECE of a validation batch, differentiated through
/// the one-step-unrolled inner update.
class MetaTrainer {
 public:
  MetaTrainer(MetaTrainConfig cfg, Dataset data)
      : cfg_(cfg),
        data_(std::move(data)),
        inner_opt_(cfg.inner, Backbone::param_names()),
        outer_opt_(cfg.outer, {"gamma_attention", "gamma_head"}),
        rng_(cfg.seed) {
    validate_config();
    split_ = split_dataset(data_.n(), cfg_.split, cfg_.seed);
    if (cfg_.batch_size > static_cast<int>(split_.train.size()))
      throw ConfigError("batch size exceeds the training split");
    if (is_meta_mode(cfg_.mode) && cfg_.batch_size > static_cast<int>(split_.val.size()))
      throw ConfigError("batch size exceeds the validation split");
    backbone_ = Backbone(data_.dim(), cfg_.hidden, cfg_.penultimate, data_.num_classes, rng_);
    int heads = cfg_.gamma_heads > 0 ? cfg_.gamma_heads : data_.num_classes;
    int probe_n = std::min<int>(64, static_cast<int>(split_.train.size()));
    Matrix probe = backbone_.penultimate_of(detail::gather_rows(
        data_.features, std::span<const int>(split_.train.data(), probe_n)));
    gnet_ = init_gamma_params(cfg_.penultimate, heads, rng_(), cfg_.gamma_init,
                              cfg_.gamma_net_tau, &probe);
    if (cfg_.inner.kind == OptKind::sgd_momentum)
      for (const auto& p : backbone_.params()) meta_velocity_.emplace_back(p.rows(), p.cols());
  }

  const MetaTrainConfig& config() const { return cfg_; }
  const Split& split() const { return split_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  const GammaNetParams& gamma_net() const { return gnet_; }
  int next_epoch() const { return next_epoch_; }
  const std::vector<EpochLog>& log() const { return log_; }

  struct StepStats {
    double inner_loss = 0.0;
    double outer_loss = std::numeric_limits<double>::quiet_NaN();
  };

  /// One plain step (ce / focal-fixed): gamma is a constant vector.
  double plain_step(std::span<const int> train_idx) {
    Graph g;
    std::vector<Var> theta = param_vars(g);
    Var x = g.constant(detail::gather_rows(data_.features, train_idx));
    auto fwd = Backbone::forward_expr(g, x, theta);
    Var probs = g.softmax_rows(fwd.logits);
    double gamma_value = cfg_.mode == TrainMode::focal_fixed ? cfg_.fixed_gamma : 0.0;
    Var gammas = g.constant(Matrix(static_cast<int>(train_idx.size()), 1, gamma_value));
    std::vector<int> labels = detail::gather(data_.labels, train_idx);
    Var loss = focal_loss_expr(g, probs, labels, gammas);
    double loss_value = g.value(loss)(0, 0);
    if (!std::isfinite(loss_value))
      throw DivergenceError("training loss is non-finite at epoch " +
                            std::to_string(next_epoch_ + 1));
    g.backward(loss);
    std::vector<Matrix> grads;
    for (size_t i = 0; i < theta.size(); ++i)
      grads.push_back(g.has_grad(theta[i])
                          ? g.grad(theta[i])
                          : Matrix(backbone_.params()[i].rows(), backbone_.params()[i].cols()));
    inner_opt_.apply(backbone_.params(), grads);
    check_params_finite();
    return loss_value;
  }

  /// One meta step: gamma from the meta network on (detached) penultimate
  /// features, inner update on theta, then (fl-gamma-sece only) soft SECE
  /// on a validation batch backpropagated into the gamma network through
  /// the unrolled update. Theta moves first, phi second.
  StepStats meta_step(std::span<const int> train_idx, std::span<const int> val_idx) {
    Graph g;
    std::vector<Var> theta = param_vars(g);
    Var attention = g.input(gnet_.attention, true);
    Var head = g.input(gnet_.head, true);
    Var x = g.constant(detail::gather_rows(data_.features, train_idx));
    auto fwd = Backbone::forward_expr(g, x, theta);
    Var feats = cfg_.detach_features ? g.detach(fwd.penultimate) : fwd.penultimate;
    Var gammas = gamma_forward_expr(g, feats, attention, head, gnet_.temperature,
                                    gnet_.gamma_max, gnet_.positivity);
    Var probs = g.softmax_rows(fwd.logits);
    std::vector<int> labels = detail::gather(data_.labels, train_idx);
    Var inner_loss = focal_loss_expr(g, probs, labels, gammas);

    StepStats stats;
    stats.inner_loss = g.value(inner_loss)(0, 0);
    if (!std::isfinite(stats.inner_loss))
      throw DivergenceError("inner focal loss is non-finite at epoch " +
                            std::to_string(next_epoch_ + 1));

    OptimizerConfig inner_cfg = cfg_.inner;
    inner_cfg.lr = scheduled_lr(next_epoch_);
    auto step = unrolled_inner_step(
        g, theta, inner_loss, inner_cfg,
        inner_cfg.kind == OptKind::sgd_momentum ? &meta_velocity_ : nullptr, cfg_.first_order);

    if (cfg_.mode == TrainMode::fl_gamma_sece) {
      Var xv = g.constant(detail::gather_rows(data_.features, val_idx));
      auto fwd_val = Backbone::forward_expr(g, xv, step.updated);
      std::vector<int> val_labels = detail::gather(data_.labels, val_idx);
      Var outer = sece_expr(g, fwd_val.logits, val_labels, cfg_.kernel, cfg_.soft_acc);
      stats.outer_loss = g.value(outer)(0, 0);
      if (!std::isfinite(stats.outer_loss))
        throw DivergenceError("outer SECE loss is non-finite at epoch " +
                              std::to_string(next_epoch_ + 1));
      g.backward(outer);
      std::vector<Matrix> phi_grads;
      for (Var v : {attention, head})
        phi_grads.push_back(g.has_grad(v) ? g.grad(v)
                                          : Matrix(g.value(v).rows(), g.value(v).cols()));
      apply_theta(g, step);
      std::vector<Matrix> phi;
      phi.push_back(std::move(gnet_.attention));
      phi.push_back(std::move(gnet_.head));
      outer_opt_.apply(phi, phi_grads);
      gnet_.attention = std::move(phi[0]);
      gnet_.head = std::move(phi[1]);
    } else {
      apply_theta(g, step);
    }
    check_params_finite();
    return stats;
  }

  /// Runs up to `count` further epochs (bounded by the configured total),
  /// checkpointing after each one when a path is given. `data_source` is
  /// stored verbatim so a resume can rebuild the identical dataset.
  void run_epochs(int count, const std::string& checkpoint_path = {},
                  const nlohmann::json& data_source = {}) {
    int target = std::min(cfg_.epochs, next_epoch_ + count);
    while (next_epoch_ < target) train_one_epoch(checkpoint_path, data_source);
  }

  /// Full training run: remaining epochs plus the final report on the model
  /// selected by best validation error.
  TrainResult run(const std::string& checkpoint_path = {},
                  const nlohmann::json& data_source = {}) {
    run_epochs(cfg_.epochs - next_epoch_, checkpoint_path, data_source);
    TrainResult result;
    result.log = log_;
    result.selected_epoch = best_epoch_;
    result.best_val_error = best_val_error_;
    result.report = make_calibration_report(selected_predictions(), cfg_.report);
    return result;
  }

  /// Predictions of the current backbone on a set of dataset rows.
  PredictionSet predictions_for(const std::vector<int>& idx) const {
    Matrix logits = backbone_.logits_of(detail::gather_rows(data_.features, idx));
    return PredictionSet::from_logits(std::move(logits), detail::gather(data_.labels, idx));
  }

  /// Test-set predictions of the model selected on validation error.
  PredictionSet selected_predictions() const {
    Backbone best = backbone_;
    if (!best_params_.empty()) best.params() = best_params_;
    Matrix logits = best.logits_of(detail::gather_rows(data_.features, split_.test));
    return PredictionSet::from_logits(std::move(logits),
                                      detail::gather(data_.labels, split_.test));
  }

  /// Mean and population std of gamma over the test split.
  std::pair<double, double> gamma_stats() const {
    if (cfg_.mode == TrainMode::ce) return {0.0, 0.0};
    if (cfg_.mode == TrainMode::focal_fixed) return {cfg_.fixed_gamma, 0.0};
    Matrix feats = backbone_.penultimate_of(detail::gather_rows(data_.features, split_.test));
    Matrix gammas = gamma_forward(feats, gnet_);
    double mean = 0.0;
    for (int i = 0; i < gammas.size(); ++i) mean += gammas[i];
    mean /= gammas.size();
    double var = 0.0;
    for (int i = 0; i < gammas.size(); ++i) {
      double d = gammas[i] - mean;
      var += d * d;
    }
    return {mean, std::sqrt(var / gammas.size())};
  }

  // ---- checkpointing ----

  void save_checkpoint(const std::string& path, const nlohmann::json& data_source = {}) const {
    nlohmann::json j;
    j["version"] = 1;
    j["next_epoch"] = next_epoch_;
    j["config"] = config_to_json(cfg_);
    j["backbone"] = {{"d_in", backbone_.input_dim()},
                     {"hidden", backbone_.hidden_width()},
                     {"penultimate", backbone_.penultimate_width()},
                     {"classes", backbone_.classes()},
                     {"params", detail::matrices_to_json(backbone_.params())}};
    j["gamma_net"] = {{"attention", detail::matrix_to_json(gnet_.attention)},
                      {"head", detail::matrix_to_json(gnet_.head)},
                      {"tau", gnet_.temperature},
                      {"gamma_max", gnet_.gamma_max}};
    j["inner_opt"] = optimizer_to_json(inner_opt_);
    j["outer_opt"] = optimizer_to_json(outer_opt_);
    j["meta_velocity"] = detail::matrices_to_json(meta_velocity_);
    std::ostringstream rng_state;
    rng_state << rng_;
    j["rng"] = rng_state.str();
    j["best"] = {{"epoch", best_epoch_},
                 {"val_error", best_val_error_},
                 {"params", detail::matrices_to_json(best_params_)}};
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : log_)
      rows.push_back({{"epoch", r.epoch},
                      {"train_loss", r.train_loss},
                      {"val_error", r.val_error},
                      {"test_error", r.test_error},
                      {"test_ece", r.test_ece},
                      {"gamma_mean", r.gamma_mean},
                      {"gamma_std", r.gamma_std}});
    j["log"] = rows;
    if (!data_source.is_null()) j["data_source"] = data_source;
    detail::write_file(path, j.dump(2) + "\n");
  }

  static nlohmann::json read_checkpoint(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(detail::read_file(path), nullptr, false);
    if (j.is_discarded()) throw ParseError("checkpoint is not valid JSON: " + path);
    if (j.value("version", 0) != 1) throw ParseError("unsupported checkpoint version");
    return j;
  }

  static MetaTrainer from_checkpoint(const nlohmann::json& j, Dataset data) {
    MetaTrainer t(config_from_json(j.at("config")), std::move(data));
    t.backbone_.params() = detail::matrices_from_json(j.at("backbone").at("params"));
    t.gnet_.attention = detail::matrix_from_json(j.at("gamma_net").at("attention"));
    t.gnet_.head = detail::matrix_from_json(j.at("gamma_net").at("head"));
    t.gnet_.temperature = j.at("gamma_net").at("tau");
    t.gnet_.gamma_max = j.at("gamma_net").at("gamma_max");
    optimizer_from_json(j.at("inner_opt"), t.inner_opt_);
    optimizer_from_json(j.at("outer_opt"), t.outer_opt_);
    t.meta_velocity_ = detail::matrices_from_json(j.at("meta_velocity"));
    std::istringstream rng_state(j.at("rng").get<std::string>());
    rng_state >> t.rng_;
    t.next_epoch_ = j.at("next_epoch");
    t.best_epoch_ = j.at("best").at("epoch");
    t.best_val_error_ = j.at("best").at("val_error");
    t.best_params_ = detail::matrices_from_json(j.at("best").at("params"));
    t.log_.clear();
    for (const auto& r : j.at("log")) {
      EpochLog row;
      row.epoch = r.at("epoch");
      row.train_loss = r.at("train_loss");
      row.val_error = r.at("val_error");
      row.test_error = r.at("test_error");
      row.test_ece = r.at("test_ece");
      row.gamma_mean = r.at("gamma_mean");
      row.gamma_std = r.at("gamma_std");
      t.log_.push_back(row);
    }
    return t;
  }

  static nlohmann::json config_to_json(const MetaTrainConfig& c) {
    auto opt = [](const OptimizerConfig& o) {
      return nlohmann::json{{"kind", opt_kind_name(o.kind)}, {"lr", o.lr},
                            {"momentum", o.momentum},       {"beta1", o.beta1},
                            {"beta2", o.beta2},             {"eps", o.eps}};
    };
    return nlohmann::json{
        {"mode", train_mode_name(c.mode)},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"inner", opt(c.inner)},
        {"outer", opt(c.outer)},
        {"fixed_gamma", c.fixed_gamma},
        {"gamma_init", c.gamma_init},
        {"gamma_net_tau", c.gamma_net_tau},
        {"gamma_heads", c.gamma_heads},
        {"bandwidth", c.kernel.bandwidth},
        {"soft_acc_tau", c.soft_acc.tau},
        {"split", {{"train", c.split.train},
                   {"val", c.split.val},
                   {"metaval", c.split.metaval},
                   {"test", c.split.test}}},
        {"seed", c.seed},
        {"hidden", c.hidden},
        {"penultimate", c.penultimate},
        {"detach_features", c.detach_features},
        {"first_order", c.first_order},
        {"decay1_frac", c.decay1_frac},
        {"decay2_frac", c.decay2_frac},
        {"decay_factor", c.decay_factor},
        {"divergence_threshold", c.divergence_threshold},
        {"report_bins", c.report.bins},
        {"ace_ranges", c.report.ace_ranges},
        {"kde_grid", c.report.kde_grid}};
  }

  static MetaTrainConfig config_from_json(const nlohmann::json& j) {
    auto opt = [](const nlohmann::json& o) {
      OptimizerConfig c;
      c.kind = opt_kind_from_name(o.at("kind"));
      c.lr = o.at("lr");
      c.momentum = o.at("momentum");
      c.beta1 = o.at("beta1");
      c.beta2 = o.at("beta2");
      c.eps = o.at("eps");
      return c;
    };
    MetaTrainConfig c;
    c.mode = train_mode_from_name(j.at("mode"));
    c.epochs = j.at("epochs");
    c.batch_size = j.at("batch_size");
    c.inner = opt(j.at("inner"));
    c.outer = opt(j.at("outer"));
    c.fixed_gamma = j.at("fixed_gamma");
    c.gamma_init = j.at("gamma_init");
    c.gamma_net_tau = j.at("gamma_net_tau");
    c.gamma_heads = j.at("gamma_heads");
    c.kernel.bandwidth = j.at("bandwidth");
    c.soft_acc.tau = j.at("soft_acc_tau");
    c.split.train = j.at("split").at("train");
    c.split.val = j.at("split").at("val");
    c.split.metaval = j.at("split").at("metaval");
    c.split.test = j.at("split").at("test");
    c.seed = j.at("seed");
    c.hidden = j.at("hidden");
    c.penultimate = j.at("penultimate");
    c.detach_features = j.at("detach_features");
    c.first_order = j.at("first_order");
    c.decay1_frac = j.at("decay1_frac");
    c.decay2_frac = j.at("decay2_frac");
    c.decay_factor = j.at("decay_factor");
    c.divergence_threshold = j.at("divergence_threshold");
    c.report.bins = j.at("report_bins");
    c.report.ace_ranges = j.at("ace_ranges");
    c.report.kde_grid = j.at("kde_grid");
    return c;
  }

  double scheduled_lr(int epoch) const {
    double lr = cfg_.inner.lr;
    if (epoch >= static_cast<int>(cfg_.decay1_frac * cfg_.epochs)) lr *= cfg_.decay_factor;
    if (epoch >= static_cast<int>(cfg_.decay2_frac * cfg_.epochs)) lr *= cfg_.decay_factor;
    return lr;
  }

  std::vector<int> sample_val_batch() {
    int want = std::min<int>(cfg_.batch_size, static_cast<int>(split_.val.size()));
    std::vector<int> batch;
    batch.reserve(want);
    std::sample(split_.val.begin(), split_.val.end(), std::back_inserter(batch), want, rng_);
    return batch;
  }

 private:
  void train_one_epoch(const std::string& checkpoint_path, const nlohmann::json& data_source) {
    inner_opt_.set_lr(scheduled_lr(next_epoch_));
    std::vector<int> order = split_.train;
    std::shuffle(order.begin(), order.end(), rng_);

    double loss_sum = 0.0;
    long steps = 0;
    size_t b = static_cast<size_t>(cfg_.batch_size);
    for (size_t off = 0; off + b <= order.size(); off += b) {
      std::span<const int> batch(order.data() + off, b);
      if (is_meta_mode(cfg_.mode)) {
        std::vector<int> val_batch = sample_val_batch();
        loss_sum += meta_step(batch, val_batch).inner_loss;
      } else {
        loss_sum += plain_step(batch);
      }
      ++steps;
    }

    EpochLog row;
    row.epoch = next_epoch_ + 1;
    row.train_loss = loss_sum / static_cast<double>(steps);
    row.val_error = error_rate(predictions_for(split_.val));
    PredictionSet test_preds = predictions_for(split_.test);
    row.test_error = error_rate(test_preds);
    row.test_ece = ece(test_preds, BinningScheme::equal_width(cfg_.report.bins));
    auto [gm, gs] = gamma_stats();
    row.gamma_mean = gm;
    row.gamma_std = gs;
    log_.push_back(row);

    if (!std::isfinite(row.train_loss) || row.train_loss > cfg_.divergence_threshold)
      throw DivergenceError("training diverged at epoch " + std::to_string(row.epoch) +
                            " (loss " + format_double(row.train_loss) + ")");

    if (row.val_error < best_val_error_) {
      best_val_error_ = row.val_error;
      best_epoch_ = row.epoch;
      best_params_ = backbone_.params();
    }
    ++next_epoch_;
    if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, data_source);
  }

  void validate_config() {
    if (cfg_.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg_.batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (data_.num_classes < 2) throw ConfigError("need at least two classes");
    if (is_meta_mode(cfg_.mode) && cfg_.inner.kind == OptKind::adam)
      throw ConfigError("meta modes require an sgd/sgd-momentum inner optimizer");
    if (cfg_.fixed_gamma < 0.0) throw ConfigError("fixed gamma must be >= 0");
    cfg_.kernel.validate();
    cfg_.soft_acc.validate();
  }

  std::vector<Var> param_vars(Graph& g) {
    std::vector<Var> vars;
    vars.reserve(backbone_.params().size());
    for (const auto& p : backbone_.params()) vars.push_back(g.input(p, true));
    return vars;
  }

  void apply_theta(Graph& g, const UnrolledStep& step) {
    for (size_t i = 0; i < step.updated.size(); ++i)
      backbone_.params()[i] = g.value(step.updated[i]);
    for (size_t i = 0; i < step.velocities.size(); ++i)
      meta_velocity_[i] = g.value(step.velocities[i]);
  }

  void check_params_finite() const {
    for (size_t i = 0; i < backbone_.params().size(); ++i)
      if (!backbone_.params()[i].all_finite())
        throw DivergenceError("backbone parameter " + Backbone::param_names()[i] +
                              " became non-finite at epoch " + std::to_string(next_epoch_ + 1));
  }

  MetaTrainConfig cfg_;
  Dataset data_;
  Split split_;
  Backbone backbone_;
  GammaNetParams gnet_;
  Optimizer inner_opt_;
  Optimizer outer_opt_;
  std::vector<Matrix> meta_velocity_;
  std::mt19937_64 rng_;
  int next_epoch_ = 0;
  std::vector<EpochLog> log_;
  double best_val_error_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
  std::vector<Matrix> best_params_;

  static nlohmann::json optimizer_to_json(const Optimizer& o) {
    return nlohmann::json{{"step", o.step_count()},
                          {"m1", detail::matrices_to_json(o.first_moments())},
                          {"m2", detail::matrices_to_json(o.second_moments())}};
  }
  static void optimizer_from_json(const nlohmann::json& j, Optimizer& o) {
    o.restore(j.at("step"), detail::matrices_from_json(j.at("m1")),
              detail::matrices_from_json(j.at("m2")));
  }
};

}  // namespace calib
