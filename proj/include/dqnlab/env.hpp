#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dqnlab/qnet.hpp"
#include "json.hpp"

namespace dqnlab {

class Rng;

/// Finite MDP with state feature vectors and an inverse-Bellman reward table.
/// Feature map: x(s, a) = state_features[s] ++ one_hot(a), so d = state_dim + num_actions.
struct MdpSpec {
  std::size_t state_dim = 0;
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::vector<std::vector<double>> state_features;
  /// P[s][a][s'] flattened as ((s * A) + a) * S + s'.
  std::vector<double> transition;
  /// r[s][a] flattened as s * A + a.
  std::vector<double> reward;
  double gamma = 0.5;
  double r_max = 0.0;
  bool deterministic = false;
  std::uint64_t plant_seed = 0;
  std::string wstar_file = "wstar.json";

  std::size_t input_dim() const { return state_dim + num_actions; }
  std::span<const double> next_row(std::size_t s, std::size_t a) const {
    return {transition.data() + (s * num_actions + a) * num_states, num_states};
  }
  double r(std::size_t s, std::size_t a) const { return reward[s * num_actions + a]; }

  /// Throws on malformed tables (row sums, feature bounds, sizes).
  void validate() const;
};

/// x(s, a) = state features ++ one-hot action; entries lie in [-1, 1].
std::vector<double> feature_map(const MdpSpec& spec, std::size_t s, std::size_t a);

/// All feature vectors, index s * A + a.
struct FeatureTable {
  std::size_t num_actions = 0;
  std::vector<std::vector<double>> rows;
  std::span<const double> operator()(std::size_t s, std::size_t a) const {
    return rows[s * num_actions + a];
  }
};
FeatureTable make_feature_table(const MdpSpec& spec);

/// Q(w; s, a) for every pair, index s * A + a.
std::vector<double> q_table(const MdpSpec& spec, const FeatureTable& features,
                            const NetworkWeights& w);
std::vector<double> q_table(const MdpSpec& spec, const NetworkWeights& w);

/// Per-state action probabilities, index s * A + a.
struct Policy {
  std::size_t num_states = 0;
  std::size_t num_actions = 0;
  std::vector<double> probs;

  static Policy deterministic(std::span<const std::size_t> actions, std::size_t num_actions);
  double prob(std::size_t s, std::size_t a) const { return probs[s * num_actions + a]; }
  /// Highest-probability action (lowest index on ties).
  std::size_t action(std::size_t s) const;
  bool is_deterministic() const;
};

/// Lowest-index argmax of each row of a q_table.
std::vector<std::size_t> greedy_actions(const std::vector<double>& q, std::size_t num_states,
                                        std::size_t num_actions);
Policy greedy_policy(const MdpSpec& spec, const NetworkWeights& w);
/// (1 - eps) * greedy + eps * uniform.
Policy epsilon_greedy(const Policy& greedy, double epsilon);

struct PlantParams {
  std::size_t state_dim = 4;
  std::size_t num_states = 20;
  std::size_t num_actions = 4;
  std::size_t width = 4;
  std::size_t depth = 2;
  double gamma = 0.5;
  bool deterministic = false;
};

struct Instance {
  MdpSpec spec;
  NetworkWeights wstar;
};

/// Samples features, W* and transitions, then sets
///   r(s,a) = Q*(s,a) - gamma * sum_s' P(s'|s,a) max_a' Q*(s',a')
/// so the Bellman optimality equation holds for Q* = Q(W*).
Instance plant(const PlantParams& params, Rng& rng);

/// Same reward construction for caller-supplied features, transitions and W*.
MdpSpec build_realizable(std::vector<std::vector<double>> state_features, std::size_t num_actions,
                         std::vector<double> transition, const NetworkWeights& wstar, double gamma,
                         bool deterministic);

/// max_(s,a) |Q*(s,a) - r(s,a) - gamma E_s' max_a' Q*(s',a')|.
double bellman_residual(const MdpSpec& spec, const NetworkWeights& wstar);

struct StationaryResult {
  std::vector<double> distribution;
  std::size_t iterations = 0;
  double tv_gap = 0.0;
  /// True when the chain did not converge and the 1e-3 uniform-restart
  /// mixture (1 - 1e-3) P + 1e-3 / S was used instead.
  bool restart_applied = false;
};

/// Row-stochastic state chain induced by a policy, index s * S + s'.
std::vector<double> policy_chain(const MdpSpec& spec, const Policy& pol);

/// Power iteration from the uniform vector to total-variation gap 1e-12.
StationaryResult stationary_distribution(const MdpSpec& spec, const Policy& pol,
                                         std::size_t max_iterations = 1'000'000);
StationaryResult stationary_of_chain(std::span<const double> chain, std::size_t num_states,
                                     std::size_t max_iterations = 1'000'000);

/// Weighted (s, a) support of a state-action distribution.
struct StateActionMeasure {
  std::vector<std::size_t> states;
  std::vector<std::size_t> actions;
  std::vector<double> weights;
  std::size_t size() const { return weights.size(); }
};

/// mu*: stationary distribution of the pi*-induced chain with a = pi*(s).
/// Zero-mass states are dropped.
StateActionMeasure optimal_measure(const MdpSpec& spec, const NetworkWeights& wstar);

/// f(W) = E_{mu*} (Q(W; s, a) - Q(W*; s, a))^2.
double population_risk(const MdpSpec& spec, const NetworkWeights& w, const NetworkWeights& wstar);
double population_risk(const MdpSpec& spec, const StateActionMeasure& mu, const NetworkWeights& w,
                       const NetworkWeights& wstar);

/// Exact gradient of population_risk: 2 E_{mu*} (Q(W) - Q(W*)) dQ(W)/dW.
NetworkWeights population_grad(const MdpSpec& spec, const NetworkWeights& w,
                               const NetworkWeights& wstar);
NetworkWeights population_grad(const MdpSpec& spec, const StateActionMeasure& mu,
                               const NetworkWeights& w, const NetworkWeights& wstar);

nlohmann::json spec_to_json(const MdpSpec& spec);
MdpSpec spec_from_json(const nlohmann::json& j);

}  // namespace dqnlab
