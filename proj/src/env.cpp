#include "dqnlab/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "dqnlab/errors.hpp"
#include "dqnlab/rng.hpp"

namespace dqnlab {

namespace {

constexpr double kStationaryTolerance = 1e-12;
constexpr double kRestartMix = 1e-3;

void check_pair(const MdpSpec& spec, std::size_t s, std::size_t a) {
  if (s >= spec.num_states) {
    throw IndexError("state index " + std::to_string(s) + " out of range");
  }
  if (a >= spec.num_actions) {
    throw IndexError("action index " + std::to_string(a) + " out of range");
  }
}

}  // namespace

void MdpSpec::validate() const {
  if (num_states == 0 || num_actions == 0) throw ParameterError("MDP needs states and actions");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("gamma must lie in (0, 1)");
  if (state_features.size() != num_states) throw ShapeError("one feature vector per state");
  for (const auto& f : state_features) {
    if (f.size() != state_dim) throw ShapeError("state feature length differs from state_dim");
    for (double v : f) {
      if (!(std::abs(v) <= 1.0)) throw ParameterError("state features must lie in [-1, 1]");
    }
  }
  if (transition.size() != num_states * num_actions * num_states) {
    throw ShapeError("transition tensor has the wrong size");
  }
  if (reward.size() != num_states * num_actions) throw ShapeError("reward table has the wrong size");
  for (std::size_t s = 0; s < num_states; ++s) {
    for (std::size_t a = 0; a < num_actions; ++a) {
      double sum = 0.0;
      for (double p : next_row(s, a)) {
        if (!(p >= 0.0)) throw ParameterError("negative transition probability");
        sum += p;
      }
      if (std::abs(sum - 1.0) > 1e-12) {
        throw ParameterError("transition row (" + std::to_string(s) + "," + std::to_string(a) +
                             ") does not sum to 1");
      }
    }
  }
  for (double r : reward) {
    if (!std::isfinite(r)) throw EvaluationError("non-finite reward");
  }
}

std::vector<double> feature_map(const MdpSpec& spec, std::size_t s, std::size_t a) {
  check_pair(spec, s, a);
  std::vector<double> x(spec.input_dim(), 0.0);
  std::copy(spec.state_features[s].begin(), spec.state_features[s].end(), x.begin());
  x[spec.state_dim + a] = 1.0;
  return x;
}

FeatureTable make_feature_table(const MdpSpec& spec) {
  FeatureTable table;
  table.num_actions = spec.num_actions;
  table.rows.reserve(spec.num_states * spec.num_actions);
  for (std::size_t s = 0; s < spec.num_states; ++s)
    for (std::size_t a = 0; a < spec.num_actions; ++a) table.rows.push_back(feature_map(spec, s, a));
  return table;
}

std::vector<double> q_table(const MdpSpec& spec, const FeatureTable& features,
                            const NetworkWeights& w) {
  std::vector<double> q(spec.num_states * spec.num_actions);
  ForwardTrace trace;
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = q_forward(w, features.rows[i], trace);
  return q;
}

std::vector<double> q_table(const MdpSpec& spec, const NetworkWeights& w) {
  return q_table(spec, make_feature_table(spec), w);
}

Policy Policy::deterministic(std::span<const std::size_t> actions, std::size_t num_actions) {
  Policy p;
  p.num_states = actions.size();
  p.num_actions = num_actions;
  p.probs.assign(p.num_states * num_actions, 0.0);
  for (std::size_t s = 0; s < actions.size(); ++s) {
    if (actions[s] >= num_actions) throw IndexError("policy action out of range");
    p.probs[s * num_actions + actions[s]] = 1.0;
  }
  return p;
}

std::size_t Policy::action(std::size_t s) const {
  std::size_t best = 0;
  for (std::size_t a = 1; a < num_actions; ++a) {
    if (prob(s, a) > prob(s, best)) best = a;
  }
  return best;
}

bool Policy::is_deterministic() const {
  return std::all_of(probs.begin(), probs.end(), [](double p) { return p == 0.0 || p == 1.0; });
}

std::vector<std::size_t> greedy_actions(const std::vector<double>& q, std::size_t num_states,
                                        std::size_t num_actions) {
  std::vector<std::size_t> actions(num_states, 0);
  for (std::size_t s = 0; s < num_states; ++s) {
    std::size_t best = 0;
    for (std::size_t a = 1; a < num_actions; ++a) {
      if (q[s * num_actions + a] > q[s * num_actions + best]) best = a;
    }
    actions[s] = best;
  }
  return actions;
}

Policy greedy_policy(const MdpSpec& spec, const NetworkWeights& w) {
  const auto actions = greedy_actions(q_table(spec, w), spec.num_states, spec.num_actions);
  return Policy::deterministic(actions, spec.num_actions);
}

Policy epsilon_greedy(const Policy& greedy, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ParameterError("epsilon must lie in [0, 1]");
  Policy p = greedy;
  const double uniform = epsilon / static_cast<double>(p.num_actions);
  for (double& v : p.probs) v = (1.0 - epsilon) * v + uniform;
  return p;
}

MdpSpec build_realizable(std::vector<std::vector<double>> state_features, std::size_t num_actions,
                         std::vector<double> transition, const NetworkWeights& wstar, double gamma,
                         bool deterministic) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ParameterError("gamma must lie in (0, 1)");
  MdpSpec spec;
  spec.num_states = state_features.size();
  spec.state_dim = spec.num_states > 0 ? state_features[0].size() : 0;
  spec.num_actions = num_actions;
  spec.state_features = std::move(state_features);
  spec.transition = std::move(transition);
  spec.gamma = gamma;
  spec.deterministic = deterministic;
  spec.reward.assign(spec.num_states * num_actions, 0.0);
  if (wstar.input_dim != spec.input_dim()) {
    throw ShapeError("W* input dimension differs from state_dim + num_actions");
  }

  const auto q = q_table(spec, wstar);
  std::vector<double> vmax(spec.num_states);
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    vmax[s] = *std::max_element(q.begin() + s * num_actions, q.begin() + (s + 1) * num_actions);
  }
  double r_max = 0.0;
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    for (std::size_t a = 0; a < num_actions; ++a) {
      const auto row = spec.next_row(s, a);
      double expected = 0.0;
      for (std::size_t s2 = 0; s2 < spec.num_states; ++s2) expected += row[s2] * vmax[s2];
      const double target = q[s * num_actions + a];
      const double bootstrap = gamma * expected;
      // Trainers form residuals as (Q - gamma V) - r, so this r makes the
      // residual at W* exactly zero wherever V is computed exactly.
      const double r = target - bootstrap;
      spec.reward[s * num_actions + a] = r;
      r_max = std::max(r_max, std::abs(r));
    }
  }
  spec.r_max = r_max;
  spec.validate();
  return spec;
}

Instance plant(const PlantParams& params, Rng& rng) {
  if (!(params.gamma > 0.0 && params.gamma < 1.0)) throw ParameterError("gamma must lie in (0, 1)");
  if (params.state_dim == 0 || params.num_states == 0 || params.num_actions == 0 ||
      params.width == 0 || params.depth == 0) {
    throw ParameterError("plant: all sizes must be at least 1");
  }
  const std::uint64_t seed = rng.seed();
  const std::size_t S = params.num_states;
  const std::size_t A = params.num_actions;

  std::vector<std::vector<double>> features(S, std::vector<double>(params.state_dim));
  for (auto& f : features)
    for (double& v : f) v = rng.uniform(-1.0, 1.0);

  NetworkWeights wstar =
      random_unit_spectral(params.state_dim + A, params.width, params.depth, rng);

  std::vector<double> transition(S * A * S, 0.0);
  for (std::size_t sa = 0; sa < S * A; ++sa) {
    double* row = transition.data() + sa * S;
    if (params.deterministic) {
      row[rng.uniform_index(S)] = 1.0;
    } else {
      // Dirichlet(1, ..., 1) via normalized exponentials.
      double total = 0.0;
      for (std::size_t s2 = 0; s2 < S; ++s2) total += (row[s2] = rng.exponential());
      for (std::size_t s2 = 0; s2 < S; ++s2) row[s2] /= total;
    }
  }

  Instance inst{build_realizable(std::move(features), A, std::move(transition), wstar,
                                 params.gamma, params.deterministic),
                std::move(wstar)};
  inst.spec.plant_seed = seed;
  return inst;
}

double bellman_residual(const MdpSpec& spec, const NetworkWeights& wstar) {
  const auto q = q_table(spec, wstar);
  const std::size_t A = spec.num_actions;
  std::vector<double> vmax(spec.num_states);
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    vmax[s] = *std::max_element(q.begin() + s * A, q.begin() + (s + 1) * A);
  }
  double worst = 0.0;
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      const auto row = spec.next_row(s, a);
      double expected = 0.0;
      for (std::size_t s2 = 0; s2 < spec.num_states; ++s2) expected += row[s2] * vmax[s2];
      worst = std::max(worst, std::abs(q[s * A + a] - spec.r(s, a) - spec.gamma * expected));
    }
  }
  return worst;
}

std::vector<double> policy_chain(const MdpSpec& spec, const Policy& pol) {
  const std::size_t S = spec.num_states;
  if (pol.num_states != S || pol.num_actions != spec.num_actions) {
    throw ShapeError("policy does not match the MDP");
  }
  std::vector<double> chain(S * S, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < spec.num_actions; ++a) {
      const double p = pol.prob(s, a);
      if (p == 0.0) continue;
      const auto row = spec.next_row(s, a);
      for (std::size_t s2 = 0; s2 < S; ++s2) chain[s * S + s2] += p * row[s2];
    }
  }
  return chain;
}

namespace {

struct PowerResult {
  std::vector<double> pi;
  std::size_t iterations = 0;
  double gap = 0.0;
  bool converged = false;
};

PowerResult power_iterate(std::span<const double> chain, std::size_t S, std::size_t max_iterations) {
  PowerResult res;
  res.pi.assign(S, 1.0 / static_cast<double>(S));
  std::vector<double> next(S);
  double checkpoint_gap = std::numeric_limits<double>::infinity();
  for (std::size_t it = 1; it <= max_iterations; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      const double ps = res.pi[s];
      if (ps == 0.0) continue;
      const double* row = chain.data() + s * S;
      for (std::size_t s2 = 0; s2 < S; ++s2) next[s2] += ps * row[s2];
    }
    const double total = std::accumulate(next.begin(), next.end(), 0.0);
    double gap = 0.0;
    for (std::size_t s = 0; s < S; ++s) {
      next[s] /= total;
      gap += std::abs(next[s] - res.pi[s]);
    }
    gap *= 0.5;
    res.pi.swap(next);
    res.iterations = it;
    res.gap = gap;
    if (gap <= kStationaryTolerance) {
      res.converged = true;
      return res;
    }
    // A periodic chain oscillates with a constant gap; stop early instead of
    // spinning to the iteration cap.
    if (it % 1000 == 0) {
      if (gap >= checkpoint_gap * (1.0 - 1e-6)) return res;
      checkpoint_gap = gap;
    }
  }
  return res;
}

}  // namespace

StationaryResult stationary_of_chain(std::span<const double> chain, std::size_t S,
                                     std::size_t max_iterations) {
  if (chain.size() != S * S) throw ShapeError("chain is not S x S");
  auto res = power_iterate(chain, S, max_iterations);
  StationaryResult out;
  if (!res.converged) {
    std::vector<double> mixed(chain.begin(), chain.end());
    for (double& p : mixed) p = (1.0 - kRestartMix) * p + kRestartMix / static_cast<double>(S);
    res = power_iterate(mixed, S, max_iterations);
    out.restart_applied = true;
    if (!res.converged) {
      throw ConvergenceError("stationary distribution did not converge; TV gap " +
                             std::to_string(res.gap) + " after " +
                             std::to_string(res.iterations) + " iterations");
    }
  }
  out.distribution = std::move(res.pi);
  out.iterations = res.iterations;
  out.tv_gap = res.gap;
  return out;
}

StationaryResult stationary_distribution(const MdpSpec& spec, const Policy& pol,
                                         std::size_t max_iterations) {
  const auto chain = policy_chain(spec, pol);
  return stationary_of_chain(chain, spec.num_states, max_iterations);
}

StateActionMeasure optimal_measure(const MdpSpec& spec, const NetworkWeights& wstar) {
  const auto pol = greedy_policy(spec, wstar);
  const auto stat = stationary_distribution(spec, pol);
  StateActionMeasure mu;
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    const double p = stat.distribution[s];
    if (p <= 0.0) continue;
    mu.states.push_back(s);
    mu.actions.push_back(pol.action(s));
    mu.weights.push_back(p);
  }
  return mu;
}

double population_risk(const MdpSpec& spec, const StateActionMeasure& mu, const NetworkWeights& w,
                       const NetworkWeights& wstar) {
  ForwardTrace trace;
  double risk = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const auto x = feature_map(spec, mu.states[i], mu.actions[i]);
    const double diff = q_forward(w, x, trace) - q_forward(wstar, x, trace);
    risk += mu.weights[i] * diff * diff;
  }
  return risk;
}

double population_risk(const MdpSpec& spec, const NetworkWeights& w, const NetworkWeights& wstar) {
  return population_risk(spec, optimal_measure(spec, wstar), w, wstar);
}

NetworkWeights population_grad(const MdpSpec& spec, const StateActionMeasure& mu,
                               const NetworkWeights& w, const NetworkWeights& wstar) {
  NetworkWeights g = NetworkWeights::zeros(w.input_dim, w.width, w.depth);
  ForwardTrace trace;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const auto x = feature_map(spec, mu.states[i], mu.actions[i]);
    const double target = q_value(wstar, x);
    const double q = q_forward(w, x, trace);
    accumulate_q_grad(w, trace, 2.0 * mu.weights[i] * (q - target), g);
  }
  return g;
}

NetworkWeights population_grad(const MdpSpec& spec, const NetworkWeights& w,
                               const NetworkWeights& wstar) {
  return population_grad(spec, optimal_measure(spec, wstar), w, wstar);
}

nlohmann::json spec_to_json(const MdpSpec& spec) {
  nlohmann::json j;
  j["state_dim"] = spec.state_dim;
  j["num_states"] = spec.num_states;
  j["num_actions"] = spec.num_actions;
  j["feature_map"] = "state-concat-onehot";
  j["gamma"] = spec.gamma;
  j["r_max"] = spec.r_max;
  j["deterministic"] = spec.deterministic;
  j["plant_seed"] = spec.plant_seed;
  j["wstar_file"] = spec.wstar_file;
  j["states"] = spec.state_features;
  auto rows = nlohmann::json::array();
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    auto per_action = nlohmann::json::array();
    for (std::size_t a = 0; a < spec.num_actions; ++a) {
      const auto row = spec.next_row(s, a);
      per_action.push_back(std::vector<double>(row.begin(), row.end()));
    }
    rows.push_back(std::move(per_action));
  }
  j["transition"] = std::move(rows);
  auto rewards = nlohmann::json::array();
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    rewards.push_back(std::vector<double>(spec.reward.begin() + s * spec.num_actions,
                                          spec.reward.begin() + (s + 1) * spec.num_actions));
  }
  j["reward"] = std::move(rewards);
  return j;
}

MdpSpec spec_from_json(const nlohmann::json& j) {
  MdpSpec spec;
  spec.state_dim = j.at("state_dim").get<std::size_t>();
  spec.num_states = j.at("num_states").get<std::size_t>();
  spec.num_actions = j.at("num_actions").get<std::size_t>();
  if (j.value("feature_map", std::string("state-concat-onehot")) != "state-concat-onehot") {
    throw ParameterError("unsupported feature_map mode");
  }
  spec.gamma = j.at("gamma").get<double>();
  spec.r_max = j.at("r_max").get<double>();
  spec.deterministic = j.at("deterministic").get<bool>();
  spec.plant_seed = j.value("plant_seed", std::uint64_t{0});
  spec.wstar_file = j.value("wstar_file", std::string("wstar.json"));
  spec.state_features = j.at("states").get<std::vector<std::vector<double>>>();
  const auto& rows = j.at("transition");
  if (rows.size() != spec.num_states) throw ShapeError("transition: one entry per state");
  for (const auto& per_action : rows) {
    if (per_action.size() != spec.num_actions) throw ShapeError("transition: one row per action");
    for (const auto& row : per_action) {
      auto probs = row.get<std::vector<double>>();
      if (probs.size() != spec.num_states) throw ShapeError("transition row length");
      spec.transition.insert(spec.transition.end(), probs.begin(), probs.end());
    }
  }
  const auto& rewards = j.at("reward");
  if (rewards.size() != spec.num_states) throw ShapeError("reward: one row per state");
  for (const auto& row : rewards) {
    auto vals = row.get<std::vector<double>>();
    if (vals.size() != spec.num_actions) throw ShapeError("reward row length");
    spec.reward.insert(spec.reward.end(), vals.begin(), vals.end());
  }
  spec.validate();
  return spec;
}

}  // namespace dqnlab
