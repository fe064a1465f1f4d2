#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include "calib/errors.hpp"

namespace calib {

/// Dense 2-D array of 64-bit floats, row-major.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw DimensionError("matrix dimensions must be nonnegative");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = static_cast<int>(init.size());
    cols_ = rows_ > 0 ? static_cast<int>(init.begin()->size()) : 0;
    data_.reserve(static_cast<size_t>(rows_) * cols_);
    for (const auto& row : init) {
      if (static_cast<int>(row.size()) != cols_) throw DimensionError("ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix ones(int rows, int cols) { return Matrix(rows, cols, 1.0); }
  static Matrix scalar(double v) { return Matrix{{v}}; }
  static Matrix column(const std::vector<double>& v) {
    Matrix m(static_cast<int>(v.size()), 1);
    m.data_ = v;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  int size() const { return rows_ * cols_; }

  double& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double& operator[](int i) { return data_[i]; }
  double operator[](int i) const { return data_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& values() const { return data_; }
  std::vector<double>& values() { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool is_scalar() const { return rows_ == 1 && cols_ == 1; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

/// Matrix with i.i.d. uniform entries in [lo, hi).
inline Matrix uniform_matrix(std::mt19937_64& rng, int rows, int cols, double lo, double hi) {
  Matrix m(rows, cols);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (int i = 0; i < m.size(); ++i) m[i] = dist(rng);
  return m;
}

/// Matrix with i.i.d. normal entries.
inline Matrix normal_matrix(std::mt19937_64& rng, int rows, int cols, double mean = 0.0,
                            double stddev = 1.0) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(mean, stddev);
  for (int i = 0; i < m.size(); ++i) m[i] = dist(rng);
  return m;
}

/// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Fixed 17-significant-digit representation (also round-trip exact).
inline std::string format_double17(double v) {
  char buf[40];
  int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf, static_cast<size_t>(n));
}

}  // namespace calib
