// Command-line surface for the calibration toolkit. Subcommands emit JSON
// reports or CSV series on stdout (or --output); logs go to stderr.
// Exit codes: 0 success, 2 input error, 3 internal error, 4 divergence.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "calib/datasets.hpp"
#include "calib/errors.hpp"
#include "calib/metatrain.hpp"
#include "calib/metrics.hpp"
#include "calib/posthoc.hpp"
#include "calib/report.hpp"
#include "calib/smoothcal.hpp"

namespace {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

LogLevel log_level() {
  const char* env = std::getenv("CALIB_LOG_LEVEL");
  if (!env) return LogLevel::info;
  std::string s(env);
  if (s == "error") return LogLevel::error;
  if (s == "warn") return LogLevel::warn;
  if (s == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void log_line(LogLevel level, const std::string& msg) {
  if (level <= log_level()) std::cerr << msg << "\n";
}

void emit(const std::string& output_path, const std::string& content) {
  if (output_path.empty()) {
    std::cout << content;
    return;
  }
  std::ofstream out(output_path, std::ios::binary);
  if (!out) throw calib::InputError("cannot open output file: " + output_path);
  out << content;
}

std::string dump_json(const nlohmann::json& j, const std::string& format) {
  return (format == "pretty" ? j.dump(2) : j.dump()) + "\n";
}

void log_report_summary(const calib::CalibrationReport& r) {
  log_line(LogLevel::info,
           "n=" + std::to_string(r.n) + " k=" + std::to_string(r.k) +
               " error=" + calib::format_double(100.0 * r.error) + "%" +
               " nll=" + calib::format_double(r.nll) +
               " ece=" + calib::format_double(100.0 * r.ece) + "%" +
               " mce=" + calib::format_double(100.0 * r.mce) + "%" +
               " ace=" + calib::format_double(100.0 * r.ace) + "%" +
               " cece=" + calib::format_double(100.0 * r.cece) + "%" +
               " sece=" + calib::format_double(100.0 * r.sece) + "%" +
               " kde_ece=" + calib::format_double(100.0 * r.kde_ece) + "%");
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  size_t start = 0;
  while (start <= csv.size()) {
    size_t comma = csv.find(',', start);
    std::string cell =
        comma == std::string::npos ? csv.substr(start) : csv.substr(start, comma - start);
    if (!cell.empty()) {
      int v;
      auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size())
        throw calib::ConfigError("bad integer in list: '" + cell + "'");
      out.push_back(v);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

struct CommonOpts {
  std::string output;
  std::string format = "pretty";
  std::uint64_t seed = 0;
};

struct MetricOpts {
  std::string file;
  int bins = 10;
  std::string scheme = "equal-width";
  int ranges = 10;
  double bandwidth = 0.01;
  double tau_acc = 0.1;
  int grid = 512;

  calib::ReportOptions report() const {
    calib::ReportOptions r;
    r.bins = bins;
    r.scheme = scheme == "equal-mass" ? calib::BinKind::equal_mass : calib::BinKind::equal_width;
    r.ace_ranges = ranges;
    r.kernel.bandwidth = bandwidth;
    r.kde_grid = grid;
    return r;
  }
};

struct TrainOpts {
  std::string mode = "ce";
  int epochs = 40;
  int batch = 32;
  double lr = 0.1;
  double momentum = 0.9;
  std::string inner_opt = "sgd-momentum";
  double meta_lr = 1e-3;
  double fixed_gamma = 1.0;
  double gamma_init = 1.0;
  double tau = 0.01;
  double bandwidth = 0.01;
  double tau_acc = 0.1;
  int hidden = 64;
  int penultimate = 32;
  int heads = 0;
  bool first_order = false;
  bool no_detach = false;
  double test_frac = 0.2;
  int bins = 10;
  int ranges = 10;
  int grid = 512;
  std::string data_file;
  std::string log_file = "train_log.csv";
  std::string checkpoint;
  std::string resume;
  int stop_after = 0;  // >0: run this many epochs of the configured total, then exit
  // synthetic source
  std::string generator = "blobs";
  int n = 3000;
  int k = 3;
  int d = 2;
  double sigma = 0.5;
  double rho = 0.0;
};

struct SynthOpts {
  std::string generator = "blobs";
  int n = 300;
  int k = 3;
  int d = 2;
  double sigma = 0.5;
  double rho = 0.0;
};

calib::MetaTrainConfig build_train_config(const TrainOpts& t, std::uint64_t seed) {
  calib::MetaTrainConfig cfg;
  cfg.mode = calib::train_mode_from_name(t.mode);
  cfg.epochs = t.epochs;
  cfg.batch_size = t.batch;
  cfg.inner.kind = calib::opt_kind_from_name(t.inner_opt);
  cfg.inner.lr = t.lr;
  cfg.inner.momentum = t.momentum;
  cfg.outer.kind = calib::OptKind::adam;
  cfg.outer.lr = t.meta_lr;
  cfg.fixed_gamma = t.fixed_gamma;
  cfg.gamma_init = t.gamma_init;
  cfg.gamma_net_tau = t.tau;
  cfg.gamma_heads = t.heads;
  cfg.kernel.bandwidth = t.bandwidth;
  cfg.soft_acc.tau = t.tau_acc;
  cfg.split.test = t.test_frac;
  cfg.seed = seed;
  cfg.hidden = t.hidden;
  cfg.penultimate = t.penultimate;
  cfg.detach_features = !t.no_detach;
  cfg.first_order = t.first_order;
  cfg.report.bins = t.bins;
  cfg.report.ace_ranges = t.ranges;
  cfg.report.kernel.bandwidth = t.bandwidth;
  cfg.report.kde_grid = t.grid;
  return cfg;
}

int run_metrics(const CommonOpts& common, const MetricOpts& m) {
  calib::PredictionSet preds = calib::load_predictions(m.file);
  log_line(LogLevel::debug, "loaded " + std::to_string(preds.n()) + " predictions");
  calib::CalibrationReport r = calib::make_calibration_report(preds, m.report());
  log_report_summary(r);
  emit(common.output, dump_json(calib::report_to_json(r), common.format));
  return 0;
}

int run_sweep(const CommonOpts& common, const MetricOpts& m, const std::string& bins_list) {
  calib::PredictionSet preds = calib::load_predictions(m.file);
  std::vector<int> ms = parse_int_list(bins_list);
  auto rows = calib::bin_sweep(preds, ms);
  std::string out = "m,ece,mce\n";
  for (const auto& row : rows)
    out += std::to_string(row.m) + "," + calib::format_double(row.ece) + "," +
           calib::format_double(row.mce) + "\n";
  emit(common.output, out);
  return 0;
}

int run_reliability(const CommonOpts& common, const MetricOpts& m) {
  calib::PredictionSet preds = calib::load_predictions(m.file);
  calib::BinningScheme scheme =
      m.scheme == "equal-mass" ? calib::BinningScheme::equal_mass(m.bins, preds.confidences())
                               : calib::BinningScheme::equal_width(m.bins);
  calib::BinStats st = calib::reliability(preds, scheme);
  std::string out = "bin_lo,bin_hi,count,acc,conf,gap\n";
  for (int b = 0; b < scheme.m; ++b) {
    out += calib::format_double(scheme.edges[b]) + "," + calib::format_double(scheme.edges[b + 1]) +
           "," + std::to_string(st.count[b]) + ",";
    if (st.count[b] == 0) {
      out += ",,\n";
    } else {
      out += calib::format_double(st.acc[b]) + "," + calib::format_double(st.conf[b]) + "," +
             calib::format_double(st.gap[b]) + "\n";
    }
  }
  emit(common.output, out);
  return 0;
}

int run_temp_scale(const CommonOpts& common, const MetricOpts& m) {
  calib::PredictionSet preds = calib::load_predictions(m.file);
  if (!preds.logits.has_value())
    throw calib::InputError(
        "temperature scaling requires logits; provide a file with an l0..l{K-1} header");
  calib::TemperatureFit fit = calib::fit_temperature(*preds.logits, preds.labels);
  log_line(LogLevel::info, "fitted temperature " + calib::format_double(fit.temperature) + " in " +
                               std::to_string(fit.iterations) + " iterations");
  calib::ReportOptions ropt = m.report();
  calib::CalibrationReport before = calib::make_calibration_report(preds, ropt);

  calib::Matrix scaled = *preds.logits;
  for (int i = 0; i < scaled.size(); ++i) scaled[i] /= fit.temperature;
  calib::PredictionSet after_preds = calib::PredictionSet::from_logits(scaled, preds.labels);
  calib::CalibrationReport after = calib::make_calibration_report(after_preds, ropt);

  nlohmann::json j{{"temperature", fit.temperature},
                   {"nll", fit.nll},
                   {"iterations", fit.iterations},
                   {"degenerate", fit.degenerate},
                   {"before", calib::report_to_json(before)},
                   {"after", calib::report_to_json(after)}};
  emit(common.output, dump_json(j, common.format));
  return 0;
}

nlohmann::json synthetic_source_json(const calib::SyntheticSpec& spec) {
  return nlohmann::json{{"kind", "synthetic"},
                        {"generator", calib::generator_name(spec.generator)},
                        {"n", spec.samples},
                        {"k", spec.classes},
                        {"d", spec.features},
                        {"sigma", spec.sigma},
                        {"rho", spec.label_noise},
                        {"seed", spec.seed}};
}

calib::Dataset dataset_from_source_json(const nlohmann::json& j) {
  if (j.at("kind") == "file") return calib::load_features(j.at("path"));
  calib::SyntheticSpec spec;
  spec.generator = calib::generator_from_name(j.at("generator"));
  spec.samples = j.at("n");
  spec.classes = j.at("k");
  spec.features = j.at("d");
  spec.sigma = j.at("sigma");
  spec.label_noise = j.at("rho");
  spec.seed = j.at("seed");
  return calib::generate_synthetic(spec);
}

int run_train(const CommonOpts& common, const TrainOpts& t) {
  calib::TrainResult result;
  if (!t.resume.empty()) {
    nlohmann::json ckpt = calib::MetaTrainer::read_checkpoint(t.resume);
    if (!ckpt.contains("data_source"))
      throw calib::InputError("checkpoint lacks a data source; cannot resume");
    nlohmann::json source = ckpt.at("data_source");
    calib::Dataset data = dataset_from_source_json(source);
    calib::MetaTrainer trainer = calib::MetaTrainer::from_checkpoint(ckpt, std::move(data));
    log_line(LogLevel::info, "resuming at epoch " + std::to_string(trainer.next_epoch() + 1));
    result = trainer.run(t.checkpoint.empty() ? t.resume : t.checkpoint, source);
  } else {
    nlohmann::json source;
    calib::Dataset data;
    if (!t.data_file.empty()) {
      data = calib::load_features(t.data_file);
      source = nlohmann::json{{"kind", "file"}, {"path", t.data_file}};
    } else {
      calib::SyntheticSpec spec;
      spec.generator = calib::generator_from_name(t.generator);
      spec.samples = t.n;
      spec.classes = t.k;
      spec.features = t.d;
      spec.sigma = t.sigma;
      spec.label_noise = t.rho;
      spec.seed = common.seed;
      data = calib::generate_synthetic(spec);
      source = synthetic_source_json(spec);
    }
    calib::MetaTrainConfig cfg = build_train_config(t, common.seed);
    calib::MetaTrainer trainer(cfg, std::move(data));
    log_line(LogLevel::info, "training mode=" + t.mode + " epochs=" + std::to_string(t.epochs) +
                                 " n=" + std::to_string(trainer.split().train.size()) + " train");
    if (t.stop_after > 0) {
      if (t.checkpoint.empty())
        throw calib::ConfigError("--stop-after requires --checkpoint to be useful");
      trainer.run_epochs(t.stop_after, t.checkpoint, source);
      log_line(LogLevel::info,
               "stopped after epoch " + std::to_string(trainer.next_epoch()) + " of " +
                   std::to_string(t.epochs));
      emit(common.output,
           dump_json(nlohmann::json{{"stopped_after", trainer.next_epoch()}}, common.format));
      return 0;
    }
    result = trainer.run(t.checkpoint, source);
  }

  if (!t.log_file.empty()) {
    std::ofstream log_out(t.log_file, std::ios::binary);
    if (!log_out) throw calib::InputError("cannot open log file: " + t.log_file);
    log_out << calib::train_log_csv(result.log);
    log_line(LogLevel::info, "wrote " + std::to_string(result.log.size()) + " epoch rows to " +
                                 t.log_file);
  }
  log_report_summary(result.report);
  nlohmann::json j{{"report", calib::report_to_json(result.report)},
                   {"selected_epoch", result.selected_epoch},
                   {"best_val_error", result.best_val_error}};
  emit(common.output, dump_json(j, common.format));
  return 0;
}

int run_synth(const CommonOpts& common, const SynthOpts& s) {
  if (common.output.empty())
    throw calib::ConfigError("synth requires --output for the feature file");
  calib::SyntheticSpec spec;
  spec.generator = calib::generator_from_name(s.generator);
  spec.samples = s.n;
  spec.classes = s.k;
  spec.features = s.d;
  spec.sigma = s.sigma;
  spec.label_noise = s.rho;
  spec.seed = common.seed;
  calib::Dataset data = calib::generate_synthetic(spec);
  calib::save_features(common.output, data);
  std::ofstream meta(common.output + ".meta.json", std::ios::binary);
  if (!meta) throw calib::InputError("cannot write " + common.output + ".meta.json");
  meta << synthetic_source_json(spec).dump(2) << "\n";
  log_line(LogLevel::info, "wrote " + std::to_string(data.n()) + " samples to " + common.output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calibration toolkit: estimators, temperature scaling, meta-trained focal gamma"};
  app.require_subcommand(1);
  app.fallthrough();

  CommonOpts common;
  app.add_option("--seed", common.seed, "RNG seed for anything stochastic");
  app.add_option("--output", common.output, "write primary output here instead of stdout");
  app.add_option("--format", common.format, "json (compact) or pretty")
      ->check(CLI::IsMember({"json", "pretty"}));

  MetricOpts m;
  std::string bins_list = "10,20,50,100,200,500,1000";

  auto add_metric_opts = [&m](CLI::App* sub, bool with_kernel = true) {
    sub->add_option("file", m.file, "prediction file (csv, csv.gz or CALP binary)")->required();
    sub->add_option("-m,--bins", m.bins, "bin count");
    sub->add_option("--scheme", m.scheme, "equal-width or equal-mass")
        ->check(CLI::IsMember({"equal-width", "equal-mass"}));
    if (with_kernel) {
      sub->add_option("-R,--ranges", m.ranges, "adaptive-ECE ranges");
      sub->add_option("--bandwidth", m.bandwidth, "Gaussian kernel bandwidth");
      sub->add_option("--tau-acc", m.tau_acc, "soft-accuracy temperature");
      sub->add_option("--grid", m.grid, "KDE-ECE quadrature grid points");
    }
  };

  auto* metrics_cmd = app.add_subcommand("metrics", "full calibration report as JSON");
  add_metric_opts(metrics_cmd);

  auto* sweep_cmd = app.add_subcommand("sweep-bins", "ECE/MCE across bin counts as CSV");
  sweep_cmd->add_option("file", m.file, "prediction file")->required();
  sweep_cmd->add_option("--bins", bins_list, "comma-separated bin counts");

  auto* rel_cmd = app.add_subcommand("reliability", "reliability-diagram series as CSV");
  add_metric_opts(rel_cmd, false);

  auto* ts_cmd = app.add_subcommand("temp-scale", "fit temperature on logits; before/after report");
  add_metric_opts(ts_cmd);

  TrainOpts t;
  auto* train_cmd = app.add_subcommand("train", "train a backbone; TrainLog CSV + JSON report");
  train_cmd->add_option("--mode", t.mode, "ce | focal-fixed | fl-gamma-sece | fl-gamma-none")
      ->check(CLI::IsMember({"ce", "focal-fixed", "fl-gamma-sece", "fl-gamma-none"}));
  train_cmd->add_option("--epochs", t.epochs, "training epochs");
  train_cmd->add_option("--batch", t.batch, "batch size");
  train_cmd->add_option("--lr", t.lr, "inner learning rate");
  train_cmd->add_option("--momentum", t.momentum, "inner momentum");
  train_cmd->add_option("--inner-opt", t.inner_opt, "sgd | sgd-momentum | adam")
      ->check(CLI::IsMember({"sgd", "sgd-momentum", "adam"}));
  train_cmd->add_option("--meta-lr", t.meta_lr, "outer (gamma-net) Adam learning rate");
  train_cmd->add_option("--fixed-gamma", t.fixed_gamma, "gamma for focal-fixed mode");
  train_cmd->add_option("--gamma-init", t.gamma_init, "target mean initial gamma");
  train_cmd->add_option("--tau", t.tau, "gamma-net temperature");
  train_cmd->add_option("--bandwidth", t.bandwidth, "SECE kernel bandwidth");
  train_cmd->add_option("--tau-acc", t.tau_acc, "soft-accuracy temperature");
  train_cmd->add_option("--hidden", t.hidden, "first hidden width");
  train_cmd->add_option("--penultimate", t.penultimate, "penultimate width (gamma-net input)");
  train_cmd->add_option("--heads", t.heads, "gamma-net heads (0: number of classes)");
  train_cmd->add_flag("--first-order", t.first_order, "detach the inner gradient (ablation)");
  train_cmd->add_flag("--no-detach-features", t.no_detach,
                      "let gamma-net input gradients reach the backbone");
  train_cmd->add_option("--test-frac", t.test_frac, "test fraction carved before 8:1:1");
  train_cmd->add_option("-m,--bins", t.bins, "report bin count");
  train_cmd->add_option("-R,--ranges", t.ranges, "report ACE ranges");
  train_cmd->add_option("--grid", t.grid, "report KDE grid");
  train_cmd->add_option("--data", t.data_file, "feature csv (f0..,label); otherwise synthetic");
  train_cmd->add_option("--log", t.log_file, "TrainLog CSV path ('' to skip)");
  train_cmd->add_option("--checkpoint", t.checkpoint, "write a checkpoint after each epoch");
  train_cmd->add_option("--resume", t.resume, "resume from a checkpoint");
  train_cmd->add_option("--stop-after", t.stop_after,
                        "run only this many epochs of the configured total, then exit");
  train_cmd->add_option("--generator", t.generator, "blobs | two-rings");
  train_cmd->add_option("--n", t.n, "synthetic sample count");
  train_cmd->add_option("--k", t.k, "synthetic class count");
  train_cmd->add_option("--d", t.d, "synthetic feature dimensions");
  train_cmd->add_option("--sigma", t.sigma, "synthetic class overlap");
  train_cmd->add_option("--rho", t.rho, "synthetic label-noise rate");

  SynthOpts s;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset file");
  synth_cmd->add_option("--generator", s.generator, "blobs | two-rings");
  synth_cmd->add_option("--n", s.n, "sample count");
  synth_cmd->add_option("--k", s.k, "class count");
  synth_cmd->add_option("--d", s.d, "feature dimensions");
  synth_cmd->add_option("--sigma", s.sigma, "class overlap");
  synth_cmd->add_option("--rho", s.rho, "label-noise rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(metrics_cmd)) return run_metrics(common, m);
    if (app.got_subcommand(sweep_cmd)) return run_sweep(common, m, bins_list);
    if (app.got_subcommand(rel_cmd)) return run_reliability(common, m);
    if (app.got_subcommand(ts_cmd)) return run_temp_scale(common, m);
    if (app.got_subcommand(train_cmd)) return run_train(common, t);
    if (app.got_subcommand(synth_cmd)) return run_synth(common, s);
    return 3;
  } catch (const calib::DivergenceError& e) {
    log_line(LogLevel::error, std::string("divergence: ") + e.what());
    return 4;
  } catch (const calib::InputError& e) {
    log_line(LogLevel::error, std::string("input error: ") + e.what());
    return 2;
  } catch (const calib::ConfigError& e) {
    log_line(LogLevel::error, std::string("config error: ") + e.what());
    return 2;
  } catch (const std::exception& e) {
    log_line(LogLevel::error, std::string("internal error: ") + e.what());
    return 3;
  }
}
