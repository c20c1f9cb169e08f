#include <cmath>
#include <vector>

#include "doctest.h"
#include "dqnlab/errors.hpp"
#include "dqnlab/numerics.hpp"
#include "dqnlab/rng.hpp"

using namespace dqnlab;

namespace {

Matrix random_symmetric(std::size_t n, Rng& rng) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = m(j, i) = rng.normal();
  return m;
}

double reconstruction_error(const Matrix& m, const SymEig& e) {
  const std::size_t n = m.rows();
  Matrix r(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += e.vectors(i, k) * e.values[k] * e.vectors(j, k);
      r(i, j) = s;
    }
  return (r - m).frobenius_norm();
}

}  // namespace

TEST_SUITE("numerics") {
  TEST_CASE("matrix construction validates shape and finiteness") {
    CHECK_THROWS_AS(Matrix::from_row_major(2, 2, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Matrix::from_row_major(1, 1, {NAN}), EvaluationError);
    const Matrix m = Matrix::from_row_major(2, 3, {1, 2, 3, 4, 5, 6});
    CHECK(m(1, 0) == 4.0);
    CHECK(m.transpose()(2, 1) == 6.0);
    const Matrix p = m * m.transpose();
    CHECK(p(0, 0) == 14.0);
    CHECK(p(0, 1) == 32.0);
    CHECK_THROWS_AS(m * m, ShapeError);
  }

  TEST_CASE("sym_eig on small hand matrices") {
    auto e = sym_eig(Matrix::from_row_major(2, 2, {2, 0, 0, 1}));
    CHECK(e.values[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(e.values[1] == doctest::Approx(1.0).epsilon(1e-14));

    e = sym_eig(Matrix::identity(3));
    for (double v : e.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));

    e = sym_eig(Matrix::from_row_major(2, 2, {0, 1, 1, 0}));
    CHECK(e.values[0] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(e.values[1] == doctest::Approx(-1.0).epsilon(1e-14));
  }

  TEST_CASE("sym_eig rejects non-square and asymmetric input") {
    CHECK_THROWS_AS(sym_eig(Matrix(2, 3)), ShapeError);
    CHECK_THROWS_AS(sym_eig(Matrix::from_row_major(2, 2, {1, 2, 0, 1})), ShapeError);
  }

  TEST_CASE("sym_eig residuals and reconstruction on random symmetric matrices") {
    Rng rng(7);
    for (std::size_t n : {1u, 2u, 5u, 17u, 64u, 256u}) {
      const Matrix m = random_symmetric(n, rng);
      const auto e = sym_eig(m);
      const double fro = m.frobenius_norm();
      for (std::size_t i = 1; i < n; ++i) CHECK(e.values[i - 1] >= e.values[i]);
      for (std::size_t k = 0; k < n; ++k) {
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = e.vectors(i, k);
        auto mv = matvec(m, v);
        for (std::size_t i = 0; i < n; ++i) mv[i] -= e.values[k] * v[i];
        CHECK(norm2(mv) <= 1e-8 * fro);
        CHECK(norm2(v) == doctest::Approx(1.0).epsilon(1e-10));
      }
      CHECK(reconstruction_error(m, e) <= 1e-8 * fro);
    }
  }

  TEST_CASE("spectral norms") {
    const Matrix m = Matrix::from_row_major(2, 2, {3, 0, 0, -4});
    CHECK(spectral_norm(m) == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(symmetric_spectral_norm(m) == doctest::Approx(4.0).epsilon(1e-12));
    // rank one u v^T has norm |u| |v|
    const Matrix r = Matrix::from_row_major(2, 3, {1, 2, 2, 2, 4, 4});
    CHECK(spectral_norm(r) == doctest::Approx(std::sqrt(5.0) * 3.0).epsilon(1e-12));
  }

  TEST_CASE("finite_diff_grad examples") {
    const std::vector<double> x{3.0};
    auto g = finite_diff_grad([](std::span<const double> w) { return w[0] * w[0]; }, x, 1e-4);
    CHECK(std::abs(g[0] - 6.0) <= 1e-6);

    const std::vector<double> y{0.3, -2.0, 7.0};
    g = finite_diff_grad([](std::span<const double>) { return 4.2; }, y);
    for (double v : g) CHECK(v == 0.0);

    const std::vector<double> z{2.0, 5.0};
    g = finite_diff_grad([](std::span<const double> w) { return w[0] * w[1]; }, z);
    CHECK(std::abs(g[0] - 5.0) <= 1e-6);
    CHECK(std::abs(g[1] - 2.0) <= 1e-6);

    CHECK_THROWS_AS(finite_diff_grad([](std::span<const double>) { return NAN; }, z),
                    EvaluationError);
    CHECK_THROWS_AS(finite_diff_grad([](std::span<const double> w) { return w[0]; }, z, 0.0),
                    ParameterError);
  }

  TEST_CASE("default finite-difference step") {
    const std::vector<double> small{0.1, -0.5};
    const std::vector<double> large{3.0, -40.0};
    CHECK(default_fd_step(small) == 1e-5);
    CHECK(default_fd_step(large) == doctest::Approx(4e-4).epsilon(1e-14));
  }

  TEST_CASE("fit_line examples") {
    std::vector<double> xs{0, 1, 2}, ys{1, 3, 5};
    auto f = fit_line(xs, ys);
    CHECK(f.slope == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(f.intercept == doctest::Approx(1.0).epsilon(1e-14));

    xs.clear();
    ys.clear();
    for (int t = 0; t <= 5; ++t) {
      xs.push_back(t);
      ys.push_back(std::log(std::pow(0.8, t)));
    }
    f = fit_line(xs, ys);
    CHECK(std::abs(f.slope - std::log(0.8)) <= 1e-12);

    xs = {std::log(100.0), std::log(400.0)};
    ys = {std::log(0.1), std::log(0.05)};
    f = fit_line(xs, ys);
    CHECK(std::abs(f.slope + 0.5) <= 1e-12);

    xs = {1.0, 1.0, 1.0};
    ys = {0.0, 1.0, 2.0};
    CHECK_THROWS_AS(fit_line(xs, ys), FitError);
  }

  TEST_CASE("fit_line recovers planted lines exactly") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const double slope = rng.uniform(-3, 3), intercept = rng.uniform(-3, 3);
      std::vector<double> xs, ys;
      for (int i = 0; i < 20; ++i) {
        const double x = rng.uniform(-5, 5);
        xs.push_back(x);
        ys.push_back(slope * x + intercept);
      }
      const auto f = fit_line(xs, ys);
      CHECK(std::abs(f.slope - slope) <= 1e-12);
      CHECK(std::abs(f.intercept - intercept) <= 1e-12);
    }
  }

  TEST_CASE("median") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK_THROWS_AS(median({}), ParameterError);
  }
}
