// Dense row-major matrix of doubles plus the handful of linear-algebra
// helpers the toolkit needs. Kept deliberately small; no external BLAS.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dtq {

class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0)
      throw std::invalid_argument("Matrix: rows and cols must be >= 1");
  }
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0)
      throw std::invalid_argument("Matrix: rows and cols must be >= 1");
    if (data_.size() != rows * cols)
      throw std::invalid_argument("Matrix: data size does not match shape");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const Matrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Y = X * W^T, with X [n, c] and W [m, c].
inline Matrix matmul_nt(const Matrix& x, const Matrix& w) {
  if (x.cols() != w.cols())
    throw std::invalid_argument("matmul_nt: inner dimensions differ");
  Matrix y(x.rows(), w.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xi = x.row_ptr(i);
    for (std::size_t j = 0; j < w.rows(); ++j) {
      const double* wj = w.row_ptr(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < x.cols(); ++k) acc += xi[k] * wj[k];
      y(i, j) = acc;
    }
  }
  return y;
}

inline double max_abs(const Matrix& m) {
  double v = 0.0;
  for (double x : m.data()) v = std::max(v, std::abs(x));
  return v;
}

inline double mse(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("mse: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

// Per-column absolute maxima; length cols().
inline std::vector<double> col_absmax(const Matrix& m) {
  std::vector<double> out(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      out[c] = std::max(out[c], std::abs(m(r, c)));
  return out;
}

inline std::vector<double> row_absmax(const Matrix& m) {
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      out[r] = std::max(out[r], std::abs(m(r, c)));
  return out;
}

} // namespace dtq
