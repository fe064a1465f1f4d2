#pragma once

#include <algorithm>
#include <string>

#include <json.hpp>

#include "calib/metrics.hpp"
#include "calib/smoothcal.hpp"

namespace calib {

struct ReportOptions {
  int bins = 10;
  BinKind scheme = BinKind::equal_width;
  int ace_ranges = 10;
  double ace_threshold = 0.0;
  KernelSpec kernel{0.01};
  int kde_grid = 512;
};

/// Full scalar report: predictive metrics, binned estimators and the
/// kernel-based ones (hard-mode SECE, KDE-ECE). ACE ranges are clamped to
/// the sample count so small inputs still report.
inline CalibrationReport make_calibration_report(const PredictionSet& preds,
                                                 const ReportOptions& opt = {}) {
  std::vector<double> z = preds.confidences();
  BinningScheme scheme = opt.scheme == BinKind::equal_width
                             ? BinningScheme::equal_width(opt.bins)
                             : BinningScheme::equal_mass(opt.bins, z);
  BinStats stats = reliability(preds, scheme);
  CalibrationReport r;
  r.error = error_rate(preds);
  r.nll = nll(preds);
  r.brier = brier(preds);
  r.ece = ece(stats);
  r.mce = mce(stats);
  r.ace = adaptive_ece(preds, std::min(opt.ace_ranges, preds.n()), opt.ace_threshold);
  r.cece = classwise_ece(preds, scheme);
  r.sece = sece_hard(preds, opt.kernel);
  r.kde_ece = kde_ece(preds, opt.kernel, opt.kde_grid);
  r.n = preds.n();
  r.k = preds.k();
  r.bins = opt.bins;
  r.scheme = bin_kind_name(scheme.kind);
  return r;
}

inline nlohmann::json report_to_json(const CalibrationReport& r) {
  return nlohmann::json{{"error", r.error}, {"nll", r.nll},     {"brier", r.brier},
                        {"ece", r.ece},     {"mce", r.mce},     {"ace", r.ace},
                        {"cece", r.cece},   {"sece", r.sece},   {"kde_ece", r.kde_ece},
                        {"n", r.n},         {"k", r.k},         {"bins", r.bins},
                        {"scheme", r.scheme}};
}

inline CalibrationReport report_from_json(const nlohmann::json& j) {
  CalibrationReport r;
  r.error = j.at("error");
  r.nll = j.at("nll");
  r.brier = j.at("brier");
  r.ece = j.at("ece");
  r.mce = j.at("mce");
  r.ace = j.at("ace");
  r.cece = j.at("cece");
  r.sece = j.at("sece");
  r.kde_ece = j.at("kde_ece");
  r.n = j.at("n");
  r.k = j.at("k");
  r.bins = j.at("bins");
  r.scheme = j.at("scheme");
  return r;
}

}  // namespace calib
