#pragma once

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "calib/errors.hpp"
#include "calib/matrix.hpp"
#include "calib/metrics.hpp"

namespace calib {

struct Dataset {
  Matrix features;  // n x d
  std::vector<int> labels;
  int num_classes = 0;

  int n() const { return features.rows(); }
  int dim() const { return features.cols(); }
};

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Test fraction is carved first; the remainder splits train/val/meta-val.
struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double metaval = 0.1;
  double test = 0.2;
};

struct Split {
  std::vector<int> train, val, metaval, test;
};

inline Split split_dataset(int n, const SplitRatios& ratios, std::uint64_t seed) {
  if (ratios.test < 0.0 || ratios.test >= 1.0) throw ConfigError("test fraction must be in [0,1)");
  if (ratios.train <= 0.0 || ratios.val <= 0.0 || ratios.metaval <= 0.0)
    throw ConfigError("split ratios must be positive");
  if (std::fabs(ratios.train + ratios.val + ratios.metaval - 1.0) > 1e-9)
    throw ConfigError("train/val/metaval ratios must sum to 1");

  int n_test = static_cast<int>(std::llround(ratios.test * n));
  int rest = n - n_test;
  int n_val = static_cast<int>(ratios.val * rest);
  int n_metaval = static_cast<int>(ratios.metaval * rest);
  int n_train = rest - n_val - n_metaval;
  if (n_test < 1 || n_val < 1 || n_metaval < 1 || n_train < 1)
    throw ConfigError("split produces an empty part (n=" + std::to_string(n) + ")");

  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  Split s;
  auto take = [&perm](int from, int count) {
    return std::vector<int>(perm.begin() + from, perm.begin() + from + count);
  };
  s.test = take(0, n_test);
  s.train = take(n_test, n_train);
  s.val = take(n_test + n_train, n_val);
  s.metaval = take(n_test + n_train + n_val, n_metaval);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

enum class Generator { blobs, two_rings };

inline const char* generator_name(Generator g) {
  return g == Generator::blobs ? "blobs" : "two-rings";
}

inline Generator generator_from_name(const std::string& s) {
  if (s == "blobs") return Generator::blobs;
  if (s == "two-rings") return Generator::two_rings;
  throw ConfigError("unknown generator: " + s);
}

struct SyntheticSpec {
  Generator generator = Generator::blobs;
  int classes = 3;
  int samples = 300;
  int features = 2;
  double sigma = 0.5;       // class overlap: cluster centers sit at simplex/sigma
  double label_noise = 0.0; // rho: fraction flipped to a uniform other class
  std::uint64_t seed = 0;

  void validate() const {
    if (classes < 2) throw ConfigError("need at least 2 classes");
    if (samples < classes) throw ConfigError("need at least one sample per class");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
    if (label_noise < 0.0 || label_noise >= 1.0) throw ConfigError("label noise must be in [0,1)");
    if (generator == Generator::blobs && features < classes - 1)
      throw ConfigError("blobs need at least K-1 feature dimensions");
    if (generator == Generator::two_rings && (classes != 2 || features < 2))
      throw ConfigError("two-rings is a binary generator needing >= 2 dimensions");
  }
};

/// K unit vectors in R^{K-1} with pairwise dot product -1/(K-1): the
/// vertices of a regular simplex centered at the origin.
inline Matrix simplex_vertices(int k) {
  int d = k - 1;
  double q = -1.0 / d;
  Matrix v(k, d);
  for (int i = 0; i < k; ++i) {
    double norm2 = 0.0;
    for (int j = 0; j < std::min(i, d); ++j) {
      double dot = 0.0;
      for (int t = 0; t < j; ++t) dot += v(i, t) * v(j, t);
      v(i, j) = (q - dot) / v(j, j);
      norm2 += v(i, j) * v(i, j);
    }
    if (i < d) v(i, i) = std::sqrt(std::max(1.0 - norm2, 0.0));
  }
  return v;
}

/// Balanced classes (sizes within one sample), unit Gaussian clusters whose
/// centers separate as 1/sigma; label noise flips a rho fraction to a
/// uniformly chosen other class, injecting irreducible error.
inline Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  int n = spec.samples, k = spec.classes, d = spec.features;

  Dataset data;
  data.num_classes = k;
  data.features = Matrix(n, d);
  data.labels.resize(n);
  int base = n / k, extra = n % k;
  int row = 0;
  for (int c = 0; c < k; ++c) {
    int count = base + (c < extra ? 1 : 0);
    for (int i = 0; i < count; ++i) data.labels[row++] = c;
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  if (spec.generator == Generator::blobs) {
    Matrix vertices = simplex_vertices(k);
    for (int i = 0; i < n; ++i) {
      int c = data.labels[i];
      for (int j = 0; j < d; ++j) {
        double center = j < vertices.cols() ? vertices(c, j) / spec.sigma : 0.0;
        data.features(i, j) = center + gauss(rng);
      }
    }
  } else {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * 3.14159265358979323846);
    for (int i = 0; i < n; ++i) {
      double radius = data.labels[i] == 0 ? 1.0 : 2.0;
      double theta = angle(rng);
      double r = radius + spec.sigma * gauss(rng);
      data.features(i, 0) = r * std::cos(theta);
      data.features(i, 1) = r * std::sin(theta);
      for (int j = 2; j < d; ++j) data.features(i, j) = spec.sigma * gauss(rng);
    }
  }

  // Noise pass. The coin is drawn for every sample so that rho only changes
  // labels, never the feature stream.
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    double u = coin(rng);
    if (u < spec.label_noise) {
      std::uniform_int_distribution<int> other(0, k - 2);
      int pick = other(rng);
      data.labels[i] = pick >= data.labels[i] ? pick + 1 : pick;
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline std::string read_file(const std::string& path) {
  if (ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw InputError("cannot open file: " + path);
    std::string out;
    char buf[1 << 15];
    int got;
    while ((got = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<size_t>(got));
    gzclose(f);
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  if (ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw InputError("cannot open file for writing: " + path);
    if (gzwrite(f, content.data(), static_cast<unsigned>(content.size())) !=
        static_cast<int>(content.size())) {
      gzclose(f);
      throw InputError("short write: " + path);
    }
    gzclose(f);
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot open file for writing: " + path);
  out << content;
}

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  size_t start = 0;
  while (true) {
    size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return cells;
}

inline double parse_double(const std::string& cell, int line_no) {
  double v;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size())
    throw ParseError("line " + std::to_string(line_no) + ": not a number: '" + cell + "'");
  return v;
}

inline long parse_int(const std::string& cell, int line_no) {
  long v;
  auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (res.ec != std::errc{} || res.ptr != cell.data() + cell.size())
    throw ParseError("line " + std::to_string(line_no) + ": not an integer label: '" + cell + "'");
  return v;
}

/// Lines without the trailing newline; tolerates CRLF and a final newline.
inline std::vector<std::string> split_lines(const std::string& content) {
  std::vector<std::string> lines;
  size_t start = 0;
  while (start < content.size()) {
    size_t nl = content.find('\n', start);
    std::string line = nl == std::string::npos ? content.substr(start)
                                               : content.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    if (nl == std::string::npos) break;
    start = nl + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

constexpr char kBinaryMagic[4] = {'C', 'A', 'L', 'P'};

template <typename T>
inline void append_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
inline T read_raw(const std::string& in, size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ParseError("binary prediction file truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline PredictionSet parse_binary_predictions(const std::string& content) {
  size_t pos = 4;  // magic checked by caller
  auto n = read_raw<std::uint32_t>(content, pos);
  auto k = read_raw<std::uint32_t>(content, pos);
  auto kind = read_raw<std::uint8_t>(content, pos);
  if (n < 1 || k < 2) throw ParseError("binary prediction file has bad dimensions");
  Matrix values(static_cast<int>(n), static_cast<int>(k));
  for (int i = 0; i < values.size(); ++i)
    values[i] = static_cast<double>(read_raw<float>(content, pos));
  std::vector<int> labels(n);
  for (auto& l : labels) l = static_cast<int>(read_raw<std::uint32_t>(content, pos));
  return kind == 1 ? PredictionSet::from_logits(std::move(values), std::move(labels))
                   : PredictionSet::from_probs(std::move(values), std::move(labels));
}

}  // namespace detail

/// Loads a prediction file: CSV with header `p0..p{K-1},label` (probabilities)
/// or `l0..l{K-1},label` (logits), optionally gzip-compressed by extension,
/// or the little-endian CALP binary format (sniffed by magic).
inline PredictionSet load_predictions(const std::string& path) {
  std::string content = detail::read_file(path);
  if (content.size() >= 4 && std::memcmp(content.data(), detail::kBinaryMagic, 4) == 0)
    return detail::parse_binary_predictions(content);

  auto lines = detail::split_lines(content);
  if (lines.size() < 2) throw ParseError("prediction file needs a header and at least one row");
  auto header = detail::split_line(lines[0]);
  int k = static_cast<int>(header.size()) - 1;
  if (k < 2 || header.back() != "label")
    throw ParseError("line 1: header must be p0..p{K-1},label or l0..l{K-1},label");
  char prefix = header[0].empty() ? '?' : header[0][0];
  if (prefix != 'p' && prefix != 'l')
    throw ParseError("line 1: columns must start with 'p' (probabilities) or 'l' (logits)");
  for (int j = 0; j < k; ++j)
    if (header[j] != std::string(1, prefix) + std::to_string(j))
      throw ParseError("line 1: unexpected column name '" + header[j] + "'");
  bool is_logits = prefix == 'l';

  int n = static_cast<int>(lines.size()) - 1;
  Matrix values(n, k);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    int line_no = i + 2;
    auto cells = detail::split_line(lines[i + 1]);
    if (static_cast<int>(cells.size()) != k + 1)
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(k + 1) +
                       " fields, got " + std::to_string(cells.size()));
    for (int j = 0; j < k; ++j) values(i, j) = detail::parse_double(cells[j], line_no);
    long label = detail::parse_int(cells[k], line_no);
    if (label < 0 || label >= k)
      throw ParseError("line " + std::to_string(line_no) + ": label " + std::to_string(label) +
                       " out of range [0," + std::to_string(k) + ")");
    labels[i] = static_cast<int>(label);
    if (!is_logits) {
      double sum = 0.0;
      for (int j = 0; j < k; ++j) sum += values(i, j);
      if (std::fabs(sum - 1.0) > 1e-4)
        throw InputError("row " + std::to_string(i) + " (line " + std::to_string(line_no) +
                         "): probabilities sum to " + format_double(sum));
      if (std::fabs(sum - 1.0) > 1e-6)
        for (int j = 0; j < k; ++j) values(i, j) /= sum;  // renormalize loose rows
    }
  }
  return is_logits ? PredictionSet::from_logits(std::move(values), std::move(labels))
                   : PredictionSet::from_probs(std::move(values), std::move(labels));
}

/// Writes CSV with 17-significant-digit floats (re-parses bit-identically).
/// as_logits requires the set to carry logits.
inline void save_predictions(const std::string& path, const PredictionSet& preds,
                             bool as_logits = false) {
  if (as_logits && !preds.logits.has_value())
    throw InputError("cannot save logits: prediction set has none");
  const Matrix& values = as_logits ? *preds.logits : preds.probs;
  std::string out;
  char prefix = as_logits ? 'l' : 'p';
  for (int j = 0; j < preds.k(); ++j) out += std::string(1, prefix) + std::to_string(j) + ",";
  out += "label\n";
  for (int i = 0; i < preds.n(); ++i) {
    for (int j = 0; j < preds.k(); ++j) out += format_double17(values(i, j)) + ",";
    out += std::to_string(preds.labels[i]) + "\n";
  }
  detail::write_file(path, out);
}

/// CALP binary writer (f32 payload; a compact secondary format).
inline void save_predictions_binary(const std::string& path, const PredictionSet& preds,
                                    bool as_logits = false) {
  if (as_logits && !preds.logits.has_value())
    throw InputError("cannot save logits: prediction set has none");
  const Matrix& values = as_logits ? *preds.logits : preds.probs;
  std::string out(detail::kBinaryMagic, 4);
  detail::append_raw<std::uint32_t>(out, static_cast<std::uint32_t>(preds.n()));
  detail::append_raw<std::uint32_t>(out, static_cast<std::uint32_t>(preds.k()));
  detail::append_raw<std::uint8_t>(out, as_logits ? 1 : 0);
  for (int i = 0; i < values.size(); ++i)
    detail::append_raw<float>(out, static_cast<float>(values[i]));
  for (int label : preds.labels)
    detail::append_raw<std::uint32_t>(out, static_cast<std::uint32_t>(label));
  detail::write_file(path, out);
}

/// Feature files: header `f0..f{d-1},label`.
inline void save_features(const std::string& path, const Dataset& data) {
  std::string out;
  for (int j = 0; j < data.dim(); ++j) out += "f" + std::to_string(j) + ",";
  out += "label\n";
  for (int i = 0; i < data.n(); ++i) {
    for (int j = 0; j < data.dim(); ++j) out += format_double17(data.features(i, j)) + ",";
    out += std::to_string(data.labels[i]) + "\n";
  }
  detail::write_file(path, out);
}

inline Dataset load_features(const std::string& path) {
  auto lines = detail::split_lines(detail::read_file(path));
  if (lines.size() < 2) throw ParseError("feature file needs a header and at least one row");
  auto header = detail::split_line(lines[0]);
  int d = static_cast<int>(header.size()) - 1;
  if (d < 1 || header.back() != "label")
    throw ParseError("line 1: header must be f0..f{d-1},label");
  for (int j = 0; j < d; ++j)
    if (header[j] != "f" + std::to_string(j))
      throw ParseError("line 1: unexpected column name '" + header[j] + "'");
  int n = static_cast<int>(lines.size()) - 1;
  Dataset data;
  data.features = Matrix(n, d);
  data.labels.resize(n);
  int max_label = 0;
  for (int i = 0; i < n; ++i) {
    int line_no = i + 2;
    auto cells = detail::split_line(lines[i + 1]);
    if (static_cast<int>(cells.size()) != d + 1)
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(d + 1) +
                       " fields, got " + std::to_string(cells.size()));
    for (int j = 0; j < d; ++j) data.features(i, j) = detail::parse_double(cells[j], line_no);
    long label = detail::parse_int(cells[d], line_no);
    if (label < 0) throw ParseError("line " + std::to_string(line_no) + ": negative label");
    data.labels[i] = static_cast<int>(label);
    max_label = std::max(max_label, data.labels[i]);
  }
  data.num_classes = max_label + 1;
  return data;
}

}  // namespace calib
