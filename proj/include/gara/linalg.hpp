// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gara/errors.hpp"

namespace gara {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {}
  Vector(std::initializer_list<double> values) : data_(values) {}

  std::size_t len() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  // len x 1 / 1 x len views as matrices.
  Matrix as_column() const { return Matrix(data_.size(), 1, data_); }
  Matrix as_row() const { return Matrix(1, data_.size(), data_); }

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

// In-place accumulating products: out += a*b, a*b^T, a^T*b. Shapes are checked by callers.
namespace detail {

inline void gemm_nn_acc(Matrix& out, const Matrix& a, const Matrix& b) {
  const std::size_t n = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    const double* ar = a.row(i).data();
    for (std::size_t k = 0; k < n; ++k) {
      const double av = ar[k];
      const double* br = b.row(k).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

inline void gemm_nt_acc(Matrix& out, const Matrix& a, const Matrix& b) {
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i).data();
    double* o = out.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* br = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += ar[k] * br[k];
      o[j] += s;
    }
  }
}

inline void gemm_tn_acc(Matrix& out, const Matrix& a, const Matrix& b) {
  const std::size_t m = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* ar = a.row(k).data();
    const double* br = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double av = ar[i];
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch (" + a.shape_str() + ") x (" + b.shape_str() + ")");
  }
  Matrix out(a.rows(), b.cols());
  detail::gemm_nn_acc(out, a, b);
  return out;
}

// a * b^T without materialising the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: shape mismatch (" + a.shape_str() + ") x (" + b.shape_str() +
                     ")^T");
  }
  Matrix out(a.rows(), b.rows());
  detail::gemm_nt_acc(out, a, b);
  return out;
}

// a^T * b.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: shape mismatch (" + a.shape_str() + ")^T x (" + b.shape_str() +
                     ")");
  }
  Matrix out(a.cols(), b.cols());
  detail::gemm_tn_acc(out, a, b);
  return out;
}

inline Vector matvec(const Matrix& m, const Vector& v) {
  if (m.cols() != v.len()) {
    throw ShapeError("matvec: shape mismatch (" + m.shape_str() + ") x (" +
                     std::to_string(v.len()) + ")");
  }
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    const auto r = m.row(i);
    for (std::size_t k = 0; k < v.len(); ++k) s += r[k] * v[k];
    out[i] = s;
  }
  return out;
}

inline Matrix outer(const Vector& u, const Vector& v) {
  if (u.len() == 0 || v.len() == 0) {
    throw ShapeError("outer: empty vector (" + std::to_string(u.len()) + ", " +
                     std::to_string(v.len()) + ")");
  }
  Matrix out(u.len(), v.len());
  for (std::size_t i = 0; i < u.len(); ++i)
    for (std::size_t j = 0; j < v.len(); ++j) out(i, j) = u[i] * v[j];
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("add: (" + a.shape_str() + ") + (" + b.shape_str() + ")");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: (" + a.shape_str() + ") - (" + b.shape_str() + ")");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

inline Vector operator+(const Vector& a, const Vector& b) {
  if (a.len() != b.len()) throw ShapeError("add: vector lengths differ");
  Vector out = a;
  for (std::size_t i = 0; i < out.len(); ++i) out[i] += b[i];
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: (" + a.shape_str() + ") vs (" + b.shape_str() + ")");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

// Singular values by one-sided (Hestenes) Jacobi rotations, descending.
inline std::vector<double> singular_values(const Matrix& m) {
  Matrix a = m.rows() >= m.cols() ? m : transpose(m);
  const std::size_t rows = a.rows(), n = a.cols();
  auto col_dot = [&](std::size_t p, std::size_t q) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += a(i, p) * a(i, q);
    return s;
  };
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double alpha = col_dot(p, p), beta = col_dot(q, q), gamma = col_dot(p, q);
        if (gamma == 0.0) continue;
        const double scale = std::sqrt(alpha * beta);
        if (scale == 0.0 || std::abs(gamma) <= 1e-15 * scale) continue;
        off = std::max(off, std::abs(gamma) / scale);
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double ap = a(i, p), aq = a(i, q);
          a(i, p) = c * ap - s * aq;
          a(i, q) = s * ap + c * aq;
        }
      }
    }
    if (off <= 1e-15) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = std::sqrt(col_dot(j, j));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

// Count of singular values above tol * largest; the zero matrix has rank 0.
inline std::size_t numerical_rank(const Matrix& m, double tol = 1e-9) {
  if (!(tol > 0.0)) throw ConfigError("numerical_rank: tol must be > 0");
  if (m.empty()) return 0;
  const auto sv = singular_values(m);
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double cut = tol * sv.front();
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [cut](double s) { return s > cut; }));
}

}  // namespace gara
