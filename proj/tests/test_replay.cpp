#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "dqnlab/errors.hpp"
#include "dqnlab/replay.hpp"
#include "dqnlab/rng.hpp"

using namespace dqnlab;

namespace {

Instance toy(std::uint64_t seed, bool det = false, std::size_t states = 20) {
  Rng rng(seed);
  PlantParams pp;
  pp.deterministic = det;
  pp.num_states = states;
  return plant(pp, rng);
}

}  // namespace

TEST_SUITE("replay") {
  TEST_CASE("epsilon one gives uniform actions") {
    const auto inst = toy(1);
    Rng rng(2);
    const std::size_t n = 10000;
    const auto buf = collect(inst.spec, inst.wstar, 1.0, n, 100, rng);
    REQUIRE(buf.size() == n);
    std::vector<double> counts(inst.spec.num_actions, 0.0);
    for (const auto& t : buf.entries) counts[t.a] += 1.0;
    const double p = 1.0 / static_cast<double>(inst.spec.num_actions);
    const double sigma = std::sqrt(n * p * (1 - p));
    for (double c : counts) CHECK(std::abs(c - n * p) <= 3 * sigma);
  }

  TEST_CASE("epsilon zero follows the greedy action") {
    const auto inst = toy(3);
    Rng rng(4);
    const auto w = inst.wstar + 0.3 * random_direction(inst.wstar, rng);
    const auto greedy = greedy_policy(inst.spec, w);
    const auto buf = collect(inst.spec, w, 0.0, 2000, 50, rng);
    for (const auto& t : buf.entries) CHECK(t.a == greedy.action(t.s));
    CHECK(buf.collected_with_epsilon == 0.0);
    CHECK(buf.collection_mode == "fresh-per-outer-loop");
  }

  TEST_CASE("deterministic fixed point holds exactly on stored transitions") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto inst = toy(seed, true);
      Rng rng(seed + 100);
      const auto buf = collect(inst.spec, inst.wstar, 0.0, 500, 10, rng);
      const auto q = q_table(inst.spec, inst.wstar);
      const std::size_t A = inst.spec.num_actions;
      for (const auto& t : buf.entries) {
        double best = -INFINITY;
        for (std::size_t b = 0; b < A; ++b) best = std::max(best, q[t.s_next * A + b]);
        const double boot = inst.spec.gamma * best;
        const double qsa = q[t.s * A + t.a];
        CHECK((qsa - boot) - t.r == 0.0);
        // The additive label can miss Q* by half an ulp of the larger term.
        CHECK(std::abs(t.r + boot - qsa) <= 0x1p-53 * std::max(std::abs(t.r), std::abs(boot)));
      }
    }
  }

  TEST_CASE("transitions follow the trajectory and carry the planted reward") {
    const auto inst = toy(5);
    Rng rng(6);
    const auto buf = collect(inst.spec, inst.wstar, 0.5, 1000, 10, rng);
    for (std::size_t i = 0; i + 1 < buf.size(); ++i) {
      CHECK(buf.entries[i].s_next == buf.entries[i + 1].s);
      CHECK(buf.entries[i].r == inst.spec.r(buf.entries[i].s, buf.entries[i].a));
      CHECK(inst.spec.next_row(buf.entries[i].s, buf.entries[i].a)[buf.entries[i].s_next] > 0.0);
    }
  }

  TEST_CASE("minibatch examples") {
    const auto inst = toy(7);
    Rng rng(8);
    const auto buf = collect(inst.spec, inst.wstar, 0.5, 50, 0, rng);
    const auto all = sample_minibatch(buf, buf.size(), SamplingMode::sequential, rng, 0);
    CHECK(all == buf.entries);

    const auto window = sample_minibatch(buf, 10, SamplingMode::sequential, rng, 45);
    for (std::size_t i = 0; i < 10; ++i) CHECK(window[i] == buf.entries[(45 + i) % 50]);

    ReplayBuffer one;
    one.entries = {{1, 2, 0.5, 3}};
    const auto rep = sample_minibatch(one, 1, SamplingMode::iid, rng);
    CHECK(rep.size() == 1);
    CHECK(rep[0] == one.entries[0]);

    CHECK_THROWS_AS(sample_minibatch(buf, 51, SamplingMode::iid, rng), CapacityError);
    CHECK_THROWS_AS(sample_minibatch(buf, 51, SamplingMode::sequential, rng), CapacityError);
  }

  TEST_CASE("iid sampling is uniform over entries") {
    ReplayBuffer buf;
    for (std::size_t i = 0; i < 10; ++i) buf.entries.push_back({i, 0, 0.0, 0});
    Rng rng(9);
    std::vector<double> counts(10, 0.0);
    const std::size_t draws = 100000;
    for (std::size_t i = 0; i < draws / 10; ++i)
      for (const auto& t : sample_minibatch(buf, 10, SamplingMode::iid, rng)) counts[t.s] += 1.0;
    const double sigma = std::sqrt(draws * 0.1 * 0.9);
    for (double c : counts) CHECK(std::abs(c - draws * 0.1) <= 3 * sigma);
  }

  TEST_CASE("sequential windows are contiguous from a random offset") {
    ReplayBuffer buf;
    for (std::size_t i = 0; i < 10; ++i) buf.entries.push_back({i, 0, 0.0, 0});
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
      const auto w = sample_minibatch(buf, 4, SamplingMode::sequential, rng);
      for (std::size_t i = 1; i < w.size(); ++i) CHECK(w[i].s == (w[i - 1].s + 1) % 10);
    }
  }

  TEST_CASE("collected state marginal approaches the stationary distribution") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto inst = toy(seed, false, 10);
      Rng rng(seed + 50);
      const double eps = 0.3;
      const auto buf = collect(inst.spec, inst.wstar, eps, 100000, 1000, rng);
      const auto freq = state_marginal(buf, 10);
      const auto pol = epsilon_greedy(greedy_policy(inst.spec, inst.wstar), eps);
      const auto pi = stationary_distribution(inst.spec, pol).distribution;
      double tv = 0.0;
      for (std::size_t s = 0; s < 10; ++s) tv += std::abs(freq[s] - pi[s]);
      CHECK(0.5 * tv < 0.02);
    }
  }

  TEST_CASE("collect validates its arguments") {
    const auto inst = toy(11);
    Rng rng(12);
    CHECK_THROWS_AS(collect(inst.spec, inst.wstar, 1.5, 10, 0, rng), ParameterError);
    CHECK_THROWS_AS(collect(inst.spec, inst.wstar, 0.5, 0, 0, rng), ParameterError);
  }

  TEST_CASE("buffer csv dump") {
    ReplayBuffer buf;
    buf.entries = {{1, 2, 0.5, 3}, {3, 0, -0.25, 1}};
    std::ostringstream out;
    write_buffer_csv(buf, out);
    const auto text = out.str();
    CHECK(text.rfind("s,a,r,s_next\n", 0) == 0);
    CHECK(text.find("1,2,0.5,3") != std::string::npos);
  }

  TEST_CASE("sampling mode names") {
    CHECK(parse_sampling_mode("iid") == SamplingMode::iid);
    CHECK(parse_sampling_mode("sequential") == SamplingMode::sequential);
    CHECK(to_string(SamplingMode::sequential) == "sequential");
    CHECK_THROWS(parse_sampling_mode("shuffle"));
  }
}
