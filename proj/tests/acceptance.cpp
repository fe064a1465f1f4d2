// Acceptance suite: one pass/fail line per criterion. Criteria 8-10 share a
// single block of desk-scale training runs (5 seeds x {ce, fl-gamma-sece}).
#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "calib/datasets.hpp"
#include "calib/focal.hpp"
#include "calib/gammanet.hpp"
#include "calib/metatrain.hpp"
#include "calib/metrics.hpp"
#include "calib/posthoc.hpp"
#include "calib/smoothcal.hpp"
#include "cli_runner.hpp"
#include "oracles.hpp"

using calib::BinningScheme;
using calib::Dataset;
using calib::Graph;
using calib::KernelSpec;
using calib::Matrix;
using calib::MetaTrainConfig;
using calib::MetaTrainer;
using calib::OptKind;
using calib::PredictionSet;
using calib::SyntheticSpec;
using calib::TrainMode;
using calib::TrainResult;
using calib::Var;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void criterion_line(int index, const std::string& description) {
  bool ok = !::testing::Test::HasFailure();
  std::printf("[CRITERION %2d] %s - %s\n", index, ok ? "PASS" : "FAIL", description.c_str());
  std::fflush(stdout);
}

double median5(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[2];
}

// ---------------------------------------------------------------------------
// 1. Metric-oracle equivalence
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion01MetricOracleEquivalence) {
  auto start = Clock::now();
  std::mt19937_64 rng(12345);
  for (int rep = 0; rep < 1000; ++rep) {
    int n = 1 + static_cast<int>(rng() % 500);
    int k = 2 + static_cast<int>(rng() % 9);
    int m = 1 + static_cast<int>(rng() % 50);
    auto inst = oracle::random_instance(rng, n, k);
    PredictionSet preds = PredictionSet::from_probs(inst.probs, inst.labels);

    auto naive = oracle::naive_ece_mce(preds.confidences(), preds.correctness(), m);
    BinningScheme scheme = BinningScheme::equal_width(m);
    ASSERT_NEAR(calib::ece(preds, scheme), naive.ece, 1e-12);
    ASSERT_NEAR(calib::mce(preds, scheme), naive.mce, 1e-12);
    ASSERT_NEAR(calib::classwise_ece(preds, scheme),
                oracle::naive_classwise_ece(preds.probs, preds.labels, m), 1e-12);
    int ranges = 1 + static_cast<int>(rng() % std::min(n, 8));
    ASSERT_NEAR(calib::adaptive_ece(preds, ranges),
                oracle::naive_adaptive_ece(preds.probs, preds.labels, ranges), 1e-12);
  }
  double elapsed = seconds_since(start);
  EXPECT_LT(elapsed, 10.0);
  criterion_line(1, "metric-oracle equivalence on 1000 random instances (" +
                        calib::format_double(elapsed) + " s)");
}

// ---------------------------------------------------------------------------
// 2. Perfect-calibration zero
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion02PerfectCalibrationZero) {
  auto start = Clock::now();
  // Confidence groups at exact binary fractions whose empirical accuracy
  // equals the confidence: 8 samples at 0.5 (4 correct), 8 at 0.75 (6).
  Matrix probs(16, 2);
  std::vector<int> labels(16);
  for (int i = 0; i < 8; ++i) {
    probs(i, 0) = 0.5;
    probs(i, 1) = 0.5;
    labels[i] = i < 4 ? 0 : 1;
  }
  for (int i = 8; i < 16; ++i) {
    probs(i, 0) = 0.75;
    probs(i, 1) = 0.25;
    labels[i] = i < 14 ? 0 : 1;
  }
  PredictionSet preds = PredictionSet::from_probs(probs, labels);
  BinningScheme scheme = BinningScheme::equal_width(10);
  EXPECT_EQ(calib::ece(preds, scheme), 0.0);
  EXPECT_EQ(calib::mce(preds, scheme), 0.0);
  EXPECT_LT(calib::sece(preds, KernelSpec{1e-4}), 1e-6);
  double elapsed = seconds_since(start);
  EXPECT_LT(elapsed, 1.0);
  criterion_line(2, "perfect-calibration construction gives exact zeros (" +
                        calib::format_double(elapsed) + " s)");
}

// ---------------------------------------------------------------------------
// 3. SECE limit behavior
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion03SeceLimits) {
  int n = 200;
  Matrix probs(n, 10);
  std::vector<int> labels(n);
  std::vector<double> z(n), pi(n);
  for (int i = 0; i < n; ++i) {
    double c = 0.1 + 0.9 * (i + 0.5) / n;  // distinct, and c stays the row max
    z[i] = c;
    probs(i, 0) = c;
    for (int j = 1; j < 10; ++j) probs(i, j) = (1.0 - c) / 9.0;
    pi[i] = (std::min(i, n - 1 - i) % 2 == 0) ? 1.0 : 0.0;
    labels[i] = pi[i] > 0.5 ? 0 : 1;
  }
  PredictionSet preds = PredictionSet::from_probs(probs, labels);

  double direct = 0.0;
  for (int i = 0; i < n; ++i) direct += std::fabs(pi[i] - z[i]);
  direct /= n;
  EXPECT_NEAR(calib::sece(preds, KernelSpec{1e-6}), direct, 1e-6);

  auto sacc = calib::sacc_all(z, pi, KernelSpec{1000.0});
  auto [lo, hi] = std::minmax_element(sacc.begin(), sacc.end());
  EXPECT_LE(*hi - *lo, 1e-9);
  criterion_line(3, "SECE Dirac limit within 1e-6 and uniform limit flat within 1e-9");
}

// ---------------------------------------------------------------------------
// 4. Cluster equivalence
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion04ClusterEquivalence) {
  std::vector<double> centers{0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<int> hits{8, 16, 20, 24, 32};
  int per = 40;
  Matrix probs(5 * per, 10);
  std::vector<int> labels(5 * per);
  int row = 0;
  for (size_t g = 0; g < centers.size(); ++g) {
    for (int i = 0; i < per; ++i, ++row) {
      probs(row, 0) = centers[g];
      for (int j = 1; j < 10; ++j) probs(row, j) = (1.0 - centers[g]) / 9.0;
      labels[row] = i < hits[g] ? 0 : 1;
    }
  }
  PredictionSet preds = PredictionSet::from_probs(probs, labels);
  double h = 0.004;  // cluster separation 0.2 >= 20h
  double smooth = calib::sece(preds, KernelSpec{h});
  double binned = calib::ece(preds, BinningScheme::equal_width(5));
  EXPECT_NEAR(smooth, binned, 1e-6);
  criterion_line(4, "SECE equals one-bin-per-cluster binned ECE within 1e-6");
}

// ---------------------------------------------------------------------------
// 5. Gradient suite
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion05GradientSuite) {
  auto start = Clock::now();
  std::mt19937_64 rng(777);

  // Focal loss w.r.t. logits and gamma.
  {
    Matrix logits = calib::uniform_matrix(rng, 8, 4, -2.0, 2.0);
    Matrix gammas = calib::uniform_matrix(rng, 8, 1, 0.1, 5.0);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int>(rng() % 4));
    std::vector<Matrix> params{logits, gammas};
    oracle::check_grads_fd(params, [&labels](Graph& g, const std::vector<Var>& v) {
      return calib::focal_loss_expr(g, g.softmax_rows(v[0]), labels, v[1]);
    });
  }

  // Gamma-net forward w.r.t. x, A, W away from the |.| kink.
  {
    int checked = 0;
    while (checked < 2) {
      Matrix x = calib::normal_matrix(rng, 4, 5);
      Matrix attention = calib::uniform_matrix(rng, 5, 3, -0.6, 0.6);
      Matrix head = calib::uniform_matrix(rng, 5, 1, -1.0, 1.0);
      calib::GammaNetParams p;
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

  // Soft-mode SECE w.r.t. logits.
  {
    Matrix logits = calib::uniform_matrix(rng, 16, 4, -2.0, 2.0);
    std::vector<int> labels;
    for (int i = 0; i < 16; ++i) labels.push_back(static_cast<int>(rng() % 4));
    std::vector<Matrix> params{logits};
    oracle::check_grads_fd(params, [&labels](Graph& g, const std::vector<Var>& v) {
      return calib::sece_expr(g, v[0], labels, KernelSpec{0.01});
    });
  }

  // One-step meta-gradient on a 5-parameter toy, rel err < 1e-3.
  {
    Matrix mix = calib::uniform_matrix(rng, 2, 3, -1.0, 1.0);
    Matrix target = calib::uniform_matrix(rng, 1, 3, -0.5, 0.5);
    std::vector<Matrix> init{calib::uniform_matrix(rng, 1, 3, -1.0, 1.0),
                             calib::uniform_matrix(rng, 1, 2, -1.0, 1.0)};
    oracle::check_grads_fd(
        init,
        [mix, target](Graph& g, const std::vector<Var>& v) {
          Var th = v[0], phi = v[1];
          Var w = g.sigmoid(g.matmul(phi, g.constant(mix)));
          Var inner = g.mean(g.mul(g.mul(th, th), w));
          std::vector<Var> params{th};
          auto step = calib::unrolled_inner_step(g, params, inner, {OptKind::sgd, 0.3});
          Var e = g.sub(step.updated[0], g.constant(target));
          return g.sum(g.mul(e, e));
        },
        1e-3, 1e-8);
  }

  double elapsed = seconds_since(start);
  EXPECT_LT(elapsed, 30.0);
  criterion_line(5, "finite-difference gradient suite (" + calib::format_double(elapsed) + " s)");
}

// ---------------------------------------------------------------------------
// 6. Entropy bound
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion06EntropyBound) {
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> gdist(0.0, 10.0);
  const int ks[3] = {2, 5, 10};
  double worst = 0.0;
  for (int rep = 0; rep < 10000; ++rep) {
    int k = ks[rep % 3];
    std::vector<double> p(k);
    double sum = 0.0;
    for (auto& v : p) sum += (v = -std::log(1.0 - unit(rng)));
    for (auto& v : p) v /= sum;
    int target = static_cast<int>(rng() % k);
    double gap = calib::entropy_bound_gap(p, target, gdist(rng));
    worst = std::min(worst, gap);
    ASSERT_GE(gap, -1e-12);
  }
  criterion_line(6, "entropy lower bound holds over 10^4 draws (worst slack " +
                        calib::format_double(worst) + ")");
}

// ---------------------------------------------------------------------------
// 7. Temperature-scaling recovery
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion07TemperatureRecovery) {
  std::mt19937_64 rng(31337);
  int n = 500, k = 4;
  Matrix logits(n, k);
  std::vector<int> labels(n);
  std::normal_distribution<double> noise(0.0, 1.2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(rng() % k);
    for (int j = 0; j < k; ++j) logits(i, j) = noise(rng) + (j == labels[i] ? 2.0 : 0.0);
    if (unit(rng) < 0.15) labels[i] = static_cast<int>(rng() % k);
  }
  // Normalize to a fitted-optimal set (T ~ 1).
  double t0 = calib::fit_temperature(logits, labels).temperature;
  for (int i = 0; i < logits.size(); ++i) logits[i] /= t0;

  std::vector<int> base_preds = PredictionSet::from_logits(logits, labels).predictions();
  for (double c : {0.5, 2.0, 4.0}) {
    Matrix scaled = logits;
    for (int i = 0; i < scaled.size(); ++i) scaled[i] *= c;
    double fitted = calib::fit_temperature(scaled, labels).temperature;
    EXPECT_NEAR(fitted, c, 0.03 * c) << "c=" << c;
    // Accuracy bitwise unchanged: identical argmax predictions.
    std::vector<int> preds = PredictionSet::from_logits(scaled, labels).predictions();
    EXPECT_EQ(preds, base_preds) << "c=" << c;
  }
  criterion_line(7, "fitted temperature tracks logit scaling within 3%, accuracy unchanged");
}

// ---------------------------------------------------------------------------
// 8-10. Desk-scale directional reproduction (shared runs)
// ---------------------------------------------------------------------------

struct DeskRun {
  TrainResult result;
  double max_mce = 0.0;  // over M in {10,...,1000} on the final-epoch model
};

struct DeskRuns {
  std::vector<DeskRun> ce, meta;  // indexed by seed 0..4
  double elapsed = 0.0;
};

const DeskRuns& desk_runs() {
  static const DeskRuns runs = [] {
    DeskRuns r;
    auto start = Clock::now();
    const std::vector<int> ms{10, 20, 50, 100, 200, 500, 1000};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      SyntheticSpec spec;
      spec.samples = 3000;
      spec.classes = 3;
      spec.features = 8;
      spec.sigma = 0.5;
      spec.label_noise = 0.2;
      spec.seed = seed;
      Dataset data = calib::generate_synthetic(spec);
      for (TrainMode mode : {TrainMode::ce, TrainMode::fl_gamma_sece}) {
        MetaTrainConfig cfg;
        cfg.mode = mode;
        cfg.epochs = 120;
        cfg.batch_size = 32;
        cfg.hidden = 128;
        cfg.seed = seed;
        MetaTrainer trainer(cfg, data);
        DeskRun run;
        run.result = trainer.run();
        PredictionSet preds = trainer.predictions_for(trainer.split().test);
        for (const auto& row : calib::bin_sweep(preds, ms))
          run.max_mce = std::max(run.max_mce, row.mce);
        (mode == TrainMode::ce ? r.ce : r.meta).push_back(std::move(run));
      }
    }
    r.elapsed = seconds_since(start);
    return r;
  }();
  return runs;
}

TEST(Acceptance, Criterion08DirectionalCalibration) {
  const DeskRuns& runs = desk_runs();
  std::vector<double> ce_ece, meta_ece, ce_err, meta_err;
  for (int s = 0; s < 5; ++s) {
    ce_ece.push_back(runs.ce[s].result.log.back().test_ece);
    meta_ece.push_back(runs.meta[s].result.log.back().test_ece);
    ce_err.push_back(runs.ce[s].result.log.back().test_error);
    meta_err.push_back(runs.meta[s].result.log.back().test_error);
  }
  double mce_ece = median5(ce_ece), mmeta_ece = median5(meta_ece);
  double mce_err = median5(ce_err), mmeta_err = median5(meta_err);
  EXPECT_LE(mmeta_ece, mce_ece);
  EXPECT_LE(mmeta_err, mce_err + 0.03);
  EXPECT_LT(runs.elapsed, 300.0);
  criterion_line(8, "median final test ECE " + calib::format_double(mmeta_ece) +
                        " (fl-gamma-sece) <= " + calib::format_double(mce_ece) +
                        " (ce); error " + calib::format_double(mmeta_err) + " vs " +
                        calib::format_double(mce_err) + "; runs took " +
                        calib::format_double(runs.elapsed) + " s");
}

TEST(Acceptance, Criterion09GammaSpreadGrows) {
  const DeskRuns& runs = desk_runs();
  int grew = 0;
  for (int s = 0; s < 5; ++s) {
    const auto& log = runs.meta[s].result.log;
    if (log.back().gamma_std > log.front().gamma_std) ++grew;
  }
  EXPECT_GE(grew, 4);
  criterion_line(9, "std(gamma) grows from epoch 1 to final in " + std::to_string(grew) +
                        "/5 seeds");
}

TEST(Acceptance, Criterion10BinRobustness) {
  const DeskRuns& runs = desk_runs();
  std::vector<double> ce_mce, meta_mce;
  for (int s = 0; s < 5; ++s) {
    ce_mce.push_back(runs.ce[s].max_mce);
    meta_mce.push_back(runs.meta[s].max_mce);
  }
  double m_ce = median5(ce_mce), m_meta = median5(meta_mce);
  EXPECT_LE(m_meta, m_ce);
  criterion_line(10, "median max-over-M MCE " + calib::format_double(m_meta) +
                         " (fl-gamma-sece) <= " + calib::format_double(m_ce) + " (ce)");
}

// ---------------------------------------------------------------------------
// 11. CLI determinism
// ---------------------------------------------------------------------------

TEST(Acceptance, Criterion11CliDeterminism) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "calib_acceptance_cli";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto path = [&dir](const std::string& name) { return (dir / name).string(); };

  // Prediction fixture with logits for metrics/sweep/reliability/temp-scale.
  {
    std::mt19937_64 rng(5);
    std::string content = "l0,l1,l2,label\n";
    std::normal_distribution<double> noise(0.0, 1.5);
    for (int i = 0; i < 80; ++i) {
      int label = static_cast<int>(rng() % 3);
      for (int j = 0; j < 3; ++j)
        content += calib::format_double17(noise(rng) + (j == label ? 1.5 : 0.0)) + ",";
      content += std::to_string(label) + "\n";
    }
    std::ofstream out(path("logits.csv"), std::ios::binary);
    out << content;
  }

  std::vector<std::pair<std::string, std::string>> invocations = {
      {"synth", "synth --k 3 --n 200 --seed 11 --output " + path("synth_OUT.csv")},
      {"metrics", "metrics " + path("logits.csv") + " -m 10"},
      {"sweep-bins", "sweep-bins " + path("logits.csv")},
      {"reliability", "reliability " + path("logits.csv") + " -m 10"},
      {"temp-scale", "temp-scale " + path("logits.csv")},
      {"train", "train --mode fl-gamma-sece --seed 2 --n 240 --k 3 --epochs 3 --batch 16 "
                "--hidden 8 --penultimate 4 --rho 0.2 --log " +
                    path("train_OUT.csv")},
  };

  for (const auto& [name, args] : invocations) {
    std::string first_cmd = args, second_cmd = args;
    size_t marker = args.find("_OUT");
    std::string file_a, file_b;
    if (marker != std::string::npos) {
      file_a = "a";
      file_b = "b";
      first_cmd.replace(marker, 4, "_a");
      second_cmd.replace(marker, 4, "_b");
    }
    auto r1 = cli::run(first_cmd);
    auto r2 = cli::run(second_cmd);
    EXPECT_EQ(r1.exit_code, 0) << name;
    EXPECT_EQ(r2.exit_code, 0) << name;
    EXPECT_EQ(r1.out, r2.out) << name << ": stdout differs between repeated runs";
    if (marker != std::string::npos) {
      std::string pa = first_cmd.substr(first_cmd.rfind(' ') + 1);
      std::string pb = second_cmd.substr(second_cmd.rfind(' ') + 1);
      EXPECT_EQ(cli::read_file(pa), cli::read_file(pb)) << name << ": file outputs differ";
    }
  }
  fs::remove_all(dir);
  criterion_line(11, "repeated CLI invocations are byte-identical");
}

}  // namespace
