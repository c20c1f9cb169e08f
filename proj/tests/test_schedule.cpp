#include <cmath>

#include "doctest.h"
#include "dqnlab/errors.hpp"
#include "dqnlab/rng.hpp"
#include "dqnlab/schedule.hpp"

using namespace dqnlab;

namespace {

EpsilonSchedule oracle(double c_eps, double kappa_sqrt_n, double c_max, std::size_t actions,
                       double r_max) {
  EpsilonSchedule s;
  s.kind = ScheduleKind::theoretical_oracle;
  s.c_eps = c_eps;
  s.buffer_size = 100;
  s.kappa = kappa_sqrt_n / 10.0;
  s.c_max = c_max;
  s.num_actions = actions;
  s.r_max = r_max;
  s.gamma = 0.5;
  return s;
}

}  // namespace

TEST_SUITE("schedule") {
  TEST_CASE("geometric and fixed examples") {
    EpsilonSchedule g;
    g.kind = ScheduleKind::geometric;
    g.eps0 = 1.0;
    g.decay = 0.9;
    CHECK(epsilon_at(g, 3) == doctest::Approx(0.729).epsilon(1e-15));
    for (std::size_t t = 1; t < 50; ++t) CHECK(epsilon_at(g, t) <= epsilon_at(g, t - 1));

    EpsilonSchedule f;
    f.kind = ScheduleKind::fixed;
    f.eps0 = 0.0;
    for (std::size_t t = 0; t < 10; ++t) CHECK(epsilon_at(f, t) == 0.0);
  }

  TEST_CASE("oracle example") {
    const auto s = oracle(0.25, 10.0, 0.1, 2, 1.0);
    const double expect = 0.25 * 10 * 0.2 / 1.8 - 0.1 / 0.9;
    CHECK(epsilon_at(s, 0, 0.2) == doctest::Approx(expect).epsilon(1e-14));
    CHECK(epsilon_at(s, 0, 0.2) == doctest::Approx(0.1667).epsilon(1e-3));
    CHECK_THROWS_AS(epsilon_at(s, 0), ParameterError);
    // a per-iteration C_t replaces C_max
    CHECK(epsilon_at(s, 0, 0.2, 0.0) == doctest::Approx(0.25 * 10 * 0.2 / 2.0).epsilon(1e-14));
  }

  TEST_CASE("oracle emits zero at the fixed point") {
    const auto s = oracle(0.25, 10.0, 0.0, 2, 1.0);
    CHECK(epsilon_at(s, 0, 0.0) == 0.0);
  }

  TEST_CASE("parameter validation") {
    auto s = oracle(0.3, 10.0, 0.1, 2, 1.0);  // c_eps above (1 - gamma)^2
    CHECK_THROWS_AS(epsilon_at(s, 0, 0.2), ParameterError);
    s = oracle(0.0, 10.0, 0.1, 2, 1.0);
    CHECK_THROWS_AS(epsilon_at(s, 0, 0.2), ParameterError);
    s = oracle(0.25, 10.0, 1.0, 2, 1.0);
    CHECK_THROWS_AS(epsilon_at(s, 0, 0.2), ParameterError);
    EpsilonSchedule g;
    g.eps0 = 1.5;
    CHECK_THROWS_AS(epsilon_at(g, 0), ParameterError);
  }

  TEST_CASE("negative raw values clamp to eps_min and large ones to eps_max") {
    auto s = oracle(0.25, 10.0, 0.5, 2, 1.0);
    CHECK(epsilon_at(s, 0, 0.0) == 0.0);
    s.eps_min = 0.01;
    CHECK(epsilon_at(s, 0, 0.0) == 0.01);
    s.eps_max = 0.6;
    CHECK(epsilon_at(s, 0, 100.0) == 0.6);
  }

  TEST_CASE("bounds examples") {
    auto b = epsilon_bounds(10.0, 0.2, 0.5, 0.0, 1, 1.0);
    CHECK(b.lower == 0.0);
    for (double k : {0.5, 3.0, 100.0}) CHECK(epsilon_bounds(k, 1.0, 0.5, 0.0, 1, 1.0).lower == 1.0);
    // kappa sqrt(N) e_t / (|A| R_max) = 2
    b = epsilon_bounds(10.0, 0.2, 0.5, 0.0, 1, 1.0);
    CHECK(b.upper == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(epsilon_bounds(10.0, 0.2, 0.5, 1.0, 1, 1.0), ParameterError);
  }

  TEST_CASE("estimated schedule is nonincreasing and bounded") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
      EpsilonSchedule s;
      s.kind = ScheduleKind::theoretical_estimated;
      s.gamma = rng.uniform(0.05, 0.95);
      s.c_eps = rng.uniform(1e-3, 1.0) * (1 - s.gamma) * (1 - s.gamma);
      s.kappa = rng.uniform(0.01, 2.0);
      s.buffer_size = 1 + rng.uniform_index(10000);
      s.c_max = rng.uniform(0.0, 0.9);
      s.num_actions = 1 + rng.uniform_index(6);
      s.r_max = rng.uniform(0.01, 2.0);
      s.e0 = rng.uniform(0.0, 3.0);
      double prev = 2.0;
      for (std::size_t t = 0; t < 60; ++t) {
        const double e = epsilon_at(s, t);
        CHECK(e >= 0.0);
        CHECK(e <= 1.0);
        CHECK(e <= prev);
        prev = e;
      }
    }
  }

  TEST_CASE("every emitted value lies in [0, 1]") {
    Rng rng(2);
    for (int trial = 0; trial < 500; ++trial) {
      auto s = oracle(rng.uniform(1e-3, 0.25), rng.uniform(0.0, 100.0), rng.uniform(0.0, 0.99),
                      1 + rng.uniform_index(5), rng.uniform(1e-3, 3.0));
      const double e = epsilon_at(s, 0, rng.uniform(0.0, 10.0), rng.uniform(0.0, 0.99));
      CHECK(e >= 0.0);
      CHECK(e <= 1.0);
      const auto b = epsilon_bounds(rng.uniform(0, 100), rng.uniform(0, 3), rng.uniform(0.01, 0.99),
                                    rng.uniform(0, 0.99), 1 + rng.uniform_index(5), rng.uniform(0.01, 2));
      CHECK(b.lower >= 0.0);
      CHECK(b.lower <= 1.0);
      CHECK(b.upper >= 0.0);
      CHECK(b.upper <= 1.0);
    }
  }

  TEST_CASE("kind names") {
    CHECK(parse_schedule_kind("theoretical-oracle") == ScheduleKind::theoretical_oracle);
    CHECK(parse_schedule_kind("geometric") == ScheduleKind::geometric);
    CHECK(to_string(ScheduleKind::theoretical_estimated) == "theoretical-estimated");
    CHECK_THROWS_AS(parse_schedule_kind("cosine"), ParameterError);
  }
}
