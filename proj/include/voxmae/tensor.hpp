#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "voxmae/errors.hpp"

namespace voxmae {

// Dense row-major matrix. Every learnable array and every activation in the
// network is one of these; vectors are 1 x n rows.
template <typename Real>
class Matrix {
 public:
  using value_type = Real;

  Matrix() = default;
  Matrix(int rows, int cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), fill) {
    if (rows < 0 || cols < 0) throw InvalidArgument("Matrix: negative extent");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real& operator()(int r, int c) { return data_[index(r, c)]; }
  Real operator()(int r, int c) const { return data_[index(r, c)]; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real* row(int r) { return data_.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_); }
  const Real* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_); }

  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool operator==(const Matrix& o) const = default;

 private:
  std::size_t index(int r, int c) const {
    return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(c);
  }

  int rows_ = 0;
  int cols_ = 0;
  std::vector<Real> data_;
};

template <typename To, typename From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
  Matrix<To> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = static_cast<To>(m[i]);
  return out;
}

template <typename Real>
Matrix<Real> transpose(const Matrix<Real>& m) {
  Matrix<Real> t(m.cols(), m.rows());
  for (int r = 0; r < m.rows(); ++r)
    for (int c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

template <typename Real>
bool all_finite(const Matrix<Real>& m) {
  return std::all_of(m.storage().begin(), m.storage().end(), [](Real v) { return std::isfinite(v); });
}

// c (+)= a * b
template <typename Real>
void gemm_nn(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>& c, bool accumulate) {
  if (a.cols() != b.rows()) throw InvalidArgument("gemm_nn: inner extents " + a.shape_string() + " * " + b.shape_string());
  if (c.rows() != a.rows() || c.cols() != b.cols()) c = Matrix<Real>(a.rows(), b.cols());
  else if (!accumulate) c.fill(Real(0));
  const int n = a.rows(), k = a.cols(), m = b.cols();
  for (int i = 0; i < n; ++i) {
    Real* ci = c.row(i);
    const Real* ai = a.row(i);
    for (int p = 0; p < k; ++p) {
      const Real av = ai[p];
      if (av == Real(0)) continue;
      const Real* bp = b.row(p);
      for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c (+)= a^T * b
template <typename Real>
void gemm_tn(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>& c, bool accumulate) {
  if (a.rows() != b.rows()) throw InvalidArgument("gemm_tn: inner extents " + a.shape_string() + "^T * " + b.shape_string());
  if (c.rows() != a.cols() || c.cols() != b.cols()) c = Matrix<Real>(a.cols(), b.cols());
  else if (!accumulate) c.fill(Real(0));
  const int k = a.rows(), n = a.cols(), m = b.cols();
  for (int p = 0; p < k; ++p) {
    const Real* ap = a.row(p);
    const Real* bp = b.row(p);
    for (int i = 0; i < n; ++i) {
      const Real av = ap[i];
      if (av == Real(0)) continue;
      Real* ci = c.row(i);
      for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c (+)= a * b^T
template <typename Real>
void gemm_nt(const Matrix<Real>& a, const Matrix<Real>& b, Matrix<Real>& c, bool accumulate) {
  if (a.cols() != b.cols()) throw InvalidArgument("gemm_nt: inner extents " + a.shape_string() + " * " + b.shape_string() + "^T");
  gemm_nn(a, transpose(b), c, accumulate);
}

}  // namespace voxmae
