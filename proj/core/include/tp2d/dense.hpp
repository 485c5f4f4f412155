// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Single-device dense math. Everything here is a pure value-level function;
// the mesh workers and the serial reference model both build on it.

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace tp2d {

/// Row-major f64 matrix. Block extraction always copies.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  /// Copy of the [r0, r0+nr) x [c0, c0+nc) sub-block.
  Matrix block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const;
  void set_block(std::size_t r0, std::size_t c0, const Matrix& src);

  /// Reshape to rows x cols and zero-fill, keeping the allocation when it is large enough.
  void reset(std::size_t rows, std::size_t cols);
  /// Copy `src` into this matrix, keeping the allocation when it is large enough.
  void assign(const Matrix& src);
  void fill(double v);

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const;

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// xoshiro256** seeded through splitmix64. The stream depends only on the
/// seed, so oracle and mesh draw bit-identical parameters on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random mantissa bits.
  double next_unit();
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }
  /// Uniform integer in [0, n). Uses rejection, so it is unbiased.
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

Matrix random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0,
                      double hi = 1.0);

// Products. For every output entry the inner dimension is summed in ascending
// order, so results are reproducible bit-for-bit.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materialising the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// a^T * b without materialising the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// c += a * b (and the _nt/_tn forms). c must already have the result shape.
void matmul_acc(Matrix& c, const Matrix& a, const Matrix& b);
void matmul_nt_acc(Matrix& c, const Matrix& a, const Matrix& b);
void matmul_tn_acc(Matrix& c, const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& a, double s);

/// tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
double gelu(double x);
double gelu_derivative(double x);
Matrix gelu(const Matrix& x);
/// up_grad * dGELU/dx, elementwise.
Matrix gelu_backward(const Matrix& x, const Matrix& up_grad);

/// Row-wise softmax with per-row max subtraction. -inf entries map to 0.
Matrix softmax_rows(const Matrix& x);
/// Given P = softmax_rows(S) and dL/dP, returns dL/dS.
Matrix softmax_rows_backward(const Matrix& p, const Matrix& p_grad);

/// Sum over rows: 1 x cols.
Matrix column_sums(const Matrix& a);

double max_abs_diff(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double sum(const Matrix& a);
double sum_of_squares(const Matrix& a);

}  // namespace tp2d
