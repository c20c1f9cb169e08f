#include "dqnlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dqnlab/errors.hpp"

namespace dqnlab {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix Matrix::from_row_major(std::size_t rows, std::size_t cols, std::vector<double> entries) {
  if (entries.size() != rows * cols) {
    throw ShapeError("matrix " + std::to_string(rows) + "x" + std::to_string(cols) + " given " +
                     std::to_string(entries.size()) + " entries");
  }
  for (double v : entries) {
    if (!std::isfinite(v)) throw EvaluationError("non-finite matrix entry");
  }
  Matrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.data_ = std::move(entries);
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

double Matrix::frobenius_norm() const { return norm2(data_); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matrix product: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  }
  return c;
}

namespace {

template <typename Op>
Matrix elementwise(const Matrix& a, const Matrix& b, Op op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("elementwise: shapes differ");
  Matrix c(a.rows(), a.cols());
  auto ad = a.data();
  auto bd = b.data();
  auto cd = c.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] = op(ad[i], bd[i]);
  return c;
}

}  // namespace

Matrix operator-(const Matrix& a, const Matrix& b) {
  return elementwise(a, b, [](double x, double y) { return x - y; });
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  return elementwise(a, b, [](double x, double y) { return x + y; });
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw ShapeError("matvec: dimension mismatch");
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) acc += a(i, j) * x[j];
    y[i] = acc;
  }
  return y;
}

SymEig sym_eig(const Matrix& m) {
  const std::size_t n = m.rows();
  if (m.cols() != n) throw ShapeError("sym_eig: matrix is not square");
  const double fro = m.frobenius_norm();
  if (!std::isfinite(fro)) throw EvaluationError("sym_eig: non-finite entries");
  double asym = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) asym += 2.0 * (m(i, j) - m(j, i)) * (m(i, j) - m(j, i));
  if (std::sqrt(asym) > 1e-10 * fro) throw ShapeError("sym_eig: matrix is not symmetric");

  // Work on the exactly symmetrized copy.
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (m(i, j) + m(j, i));
  Matrix v = Matrix::identity(n);

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) <= 1e-14 * fro) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-18 * fro) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Rutishauser's stable rotation.
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  SymEig out;
  out.values.resize(n);
  out.vectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, order[c]);
  }
  return out;
}

double spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  const Matrix mt = m.transpose();
  const Matrix gram = m.rows() <= m.cols() ? m * mt : mt * m;
  const auto eig = sym_eig(gram);
  return std::sqrt(std::max(0.0, eig.values.front()));
}

double symmetric_spectral_norm(const Matrix& m) {
  if (m.size() == 0) return 0.0;
  const auto eig = sym_eig(m);
  return std::max(std::abs(eig.values.front()), std::abs(eig.values.back()));
}

double default_fd_step(std::span<const double> x) {
  double inf = 0.0;
  for (double v : x) inf = std::max(inf, std::abs(v));
  return 1e-5 * std::max(1.0, inf);
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, std::optional<double> h) {
  const double step = h.value_or(default_fd_step(x));
  if (!(step > 0.0)) throw ParameterError("finite_diff_grad: step must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double fp = f(probe);
    probe[i] = x[i] - step;
    const double fm = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw EvaluationError("finite_diff_grad: non-finite value at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * step);
  }
  return grad;
}

LineFit fit_line(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("fit_line: xs and ys differ in length");
  if (xs.size() < 2) throw FitError("fit_line: need at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (!(sxx > 0.0)) throw FitError("fit_line: all xs identical (degenerate design)");
  LineFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (fit.slope * xs[i] + fit.intercept);
    rss += r * r;
  }
  fit.residual_norm = std::sqrt(rss);
  return fit;
}

double norm2(std::span<const double> v) {
  // Scaled accumulation avoids overflow for large entries.
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double acc = 0.0;
  for (double x : v) {
    const double y = x / scale;
    acc += y * y;
  }
  return scale * std::sqrt(acc);
}

double median(std::vector<double> values) {
  if (values.empty()) throw ParameterError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace dqnlab
