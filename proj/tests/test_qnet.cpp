#include <cmath>
#include <vector>

#include "doctest.h"
#include "dqnlab/errors.hpp"
#include "dqnlab/qnet.hpp"
#include "test_helpers.hpp"

using namespace dqnlab;
using testutil::random_weights;
using testutil::random_vector;

namespace {

NetworkWeights two_neuron_l1() {
  auto w = NetworkWeights::zeros(2, 2, 1);
  w.layers[0] = Matrix::from_row_major(2, 2, {1, -1, 0, 0});
  return w;
}

}  // namespace

TEST_SUITE("qnet") {
  TEST_CASE("forward examples") {
    const auto w = two_neuron_l1();
    const std::vector<double> x{1, 0};
    CHECK(q_value(w, x) == 0.5);

    Rng rng(1);
    const auto r = random_weights(3, 4, 2, rng);
    const std::vector<double> zero(3, 0.0);
    CHECK(q_value(r, zero) == 0.0);

    auto w2 = NetworkWeights::zeros(1, 2, 2);
    w2.layers[0] = Matrix::from_row_major(1, 2, {1, -1});
    w2.layers[1] = Matrix::identity(2);
    const std::vector<double> one{1};
    auto [q, trace] = q_forward(w2, one);
    CHECK(q == 0.5);
    CHECK(trace.activations[1] == std::vector<double>{1, 0});

    const std::vector<double> bad{1, 2, 3};
    CHECK_THROWS_AS(q_value(w, bad), ShapeError);
  }

  TEST_CASE("gradient examples") {
    const auto w = two_neuron_l1();
    const std::vector<double> x{1, 0};
    auto g = q_grad(w, q_forward(w, x).second);
    // column 0 (neuron 1) gets x / K, column 1 is inactive
    CHECK(g.layers[0](0, 0) == 0.5);
    CHECK(g.layers[0](1, 0) == 0.0);
    CHECK(g.layers[0](0, 1) == 0.0);
    CHECK(g.layers[0](1, 1) == 0.0);

    Rng rng(2);
    const auto r = random_weights(4, 3, 2, rng);
    const std::vector<double> zero(4, 0.0);
    g = q_grad(r, q_forward(r, zero).second);
    CHECK(g.frobenius_norm() == 0.0);
  }

  TEST_CASE("relu derivative at zero is zero") {
    auto w = NetworkWeights::zeros(2, 1, 1);
    w.layers[0] = Matrix::from_row_major(2, 1, {1, -1});
    const std::vector<double> x{0.5, 0.5};  // pre-activation exactly 0
    const auto g = q_grad(w, q_forward(w, x).second);
    CHECK(g.frobenius_norm() == 0.0);
  }

  TEST_CASE("analytic gradient matches finite differences") {
    Rng rng(3);
    std::size_t checked = 0;
    for (int trial = 0; trial < 400 && checked < 150; ++trial) {
      const std::size_t d = 2 + rng.uniform_index(7);
      const std::size_t k = 2 + rng.uniform_index(7);
      const std::size_t l = 1 + rng.uniform_index(3);
      auto w = random_weights(d, k, l, rng);
      const auto x = random_vector(d, rng);
      if (testutil::min_preactivation(w, x) < 1e-6) continue;
      const auto analytic = q_grad(w, q_forward(w, x).second).flatten();
      auto flat = w.flatten();
      auto probe = w;
      const auto fd = finite_diff_grad(
          [&](std::span<const double> p) {
            probe.assign(p);
            return q_value(probe, x);
          },
          flat, 1e-7);
      CHECK(testutil::relative_error(analytic, fd) <= 1e-5);
      ++checked;
    }
    CHECK(checked >= 100);
  }

  TEST_CASE("positive homogeneity in the input") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const auto w = random_weights(5, 4, 3, rng);
      const auto x = random_vector(5, rng);
      const double c = rng.uniform(0.1, 10.0);
      std::vector<double> cx(x);
      for (double& v : cx) v *= c;
      CHECK(q_value(w, cx) == doctest::Approx(c * q_value(w, x)).epsilon(1e-12));
    }
  }

  TEST_CASE("accumulate_q_grad adds a scaled gradient") {
    Rng rng(5);
    const auto w = random_weights(3, 3, 2, rng);
    const auto x = random_vector(3, rng);
    const auto trace = q_forward(w, x).second;
    auto acc = NetworkWeights::zeros(3, 3, 2);
    accumulate_q_grad(w, trace, 2.0, acc);
    accumulate_q_grad(w, trace, -0.5, acc);
    const auto g = q_grad(w, trace);
    CHECK((acc - 1.5 * g).frobenius_norm() <= 1e-15);
  }

  TEST_CASE("weight distance examples") {
    Rng rng(6);
    const auto a = random_weights(3, 4, 2, rng);
    CHECK(weight_distance(a, a) == 0.0);
    CHECK(weight_distance(a, a, true) == 0.0);

    auto b = a;
    b.layers[1](2, 3) += 0.3;
    CHECK(weight_distance(a, b) == doctest::Approx(0.3).epsilon(1e-12));

    const auto c = random_weights(4, 3, 1, rng);
    auto swapped = c;
    for (std::size_t i = 0; i < 4; ++i) std::swap(swapped.layers[0](i, 0), swapped.layers[0](i, 2));
    CHECK(weight_distance(c, swapped) > 0.0);
    CHECK(weight_distance(c, swapped, true) == 0.0);

    CHECK_THROWS_AS(weight_distance(a, c), ShapeError);
  }

  TEST_CASE("aligned distance never exceeds the plain distance") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t l = 1 + rng.uniform_index(3);
      const auto a = random_weights(4, 5, l, rng);
      const auto b = random_weights(4, 5, l, rng);
      CHECK(weight_distance(a, b, true) <= weight_distance(a, b));
    }
  }

  TEST_CASE("neuron permutation leaves the network function unchanged") {
    Rng rng(8);
    const auto w = random_weights(4, 3, 3, rng);
    const std::vector<std::vector<std::size_t>> perms{{2, 0, 1}, {1, 2, 0}, {0, 2, 1}};
    const auto p = permute_neurons(w, perms);
    for (int i = 0; i < 20; ++i) {
      const auto x = random_vector(4, rng);
      CHECK(q_value(p, x) == doctest::Approx(q_value(w, x)).epsilon(1e-13));
    }
    CHECK(weight_distance(w, p, true) <= 1e-12);
  }

  TEST_CASE("random_unit_spectral has unit spectral norm per layer") {
    Rng rng(9);
    const auto w = random_unit_spectral(6, 4, 3, rng);
    for (const auto& m : w.layers) CHECK(spectral_norm(m) == doctest::Approx(1.0).epsilon(1e-10));
    const auto u = random_direction(w, rng);
    CHECK(u.frobenius_norm() == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("h_bound holds per sample") {
    Rng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
      const auto ws = random_unit_spectral(5, 4, 3, rng);
      const auto w = ws + rng.uniform(0.01, 0.5) * random_direction(ws, rng);
      const auto bound = h_bound_factors(w, ws);
      CHECK(bound[0] == 0.0);
      for (int i = 0; i < 20; ++i) {
        const auto x = random_vector(5, rng);
        const auto ta = q_forward(w, x).second;
        const auto tb = q_forward(ws, x).second;
        const double xn = norm2(x);
        for (std::size_t l = 1; l < ta.activations.size(); ++l) {
          std::vector<double> diff(ta.activations[l]);
          for (std::size_t j = 0; j < diff.size(); ++j) diff[j] -= tb.activations[l][j];
          CHECK(norm2(diff) <= bound[l] * xn * (1 + 1e-12) + 1e-15);
        }
      }
    }
  }

  TEST_CASE("json round trip is bit exact") {
    Rng rng(11);
    const auto w = random_weights(3, 4, 2, rng);
    const auto text = weights_to_json(w).dump();
    const auto back = weights_from_json(nlohmann::json::parse(text));
    CHECK(back == w);
    const auto j = weights_to_json(w);
    CHECK(j.at("d") == 3);
    CHECK(j.at("K") == 4);
    CHECK(j.at("L") == 2);
  }

  TEST_CASE("validate rejects broken shapes") {
    auto w = NetworkWeights::zeros(3, 2, 2);
    w.layers[1] = Matrix(3, 2);
    CHECK_THROWS_AS(w.validate(), ShapeError);
  }
}
