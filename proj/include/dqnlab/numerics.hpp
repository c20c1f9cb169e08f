#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace dqnlab {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  /// Builds a matrix from row-major entries; throws ShapeError on a size
  /// mismatch and EvaluationError on a non-finite entry.
  static Matrix from_row_major(std::size_t rows, std::size_t cols, std::vector<double> entries);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix transpose() const;
  double frobenius_norm() const;
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
std::vector<double> matvec(const Matrix& a, std::span<const double> x);

/// Eigenpairs of a symmetric matrix. `vectors` holds one unit eigenvector per
/// column, in the same order as `values` (descending).
struct SymEig {
  std::vector<double> values;
  Matrix vectors;
};

/// Cyclic Jacobi eigensolver. Requires a square input whose asymmetry
/// ||m - m^T||_F is at most 1e-10 * ||m||_F.
SymEig sym_eig(const Matrix& m);

/// Largest singular value, via the eigenvalues of the smaller Gram product.
double spectral_norm(const Matrix& m);

/// ||m||_2 of a symmetric matrix: the largest |eigenvalue|.
double symmetric_spectral_norm(const Matrix& m);

/// Default central-difference step: 1e-5 * max(1, ||x||_inf).
double default_fd_step(std::span<const double> x);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
/// When `h` is absent the default step is used.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, std::optional<double> h = {});

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double residual_norm = 0.0;
};

/// Ordinary least squares y = slope * x + intercept.
LineFit fit_line(std::span<const double> xs, std::span<const double> ys);

double norm2(std::span<const double> v);
double median(std::vector<double> values);

}  // namespace dqnlab
