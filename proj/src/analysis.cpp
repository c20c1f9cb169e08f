#include "dqnlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "dqnlab/errors.hpp"
#include "dqnlab/rng.hpp"
#include "dqnlab/trainer.hpp"

namespace dqnlab {

// ---------------------------------------------------------------------------
// metrics.csv

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(std::span<const MetricsRecord> records, std::ostream& out) {
  out << kMetricsHeader << '\n';
  for (const auto& r : records) {
    out << r.t << ',' << fmt17(r.epsilon) << ',' << fmt17(r.e_t) << ',' << fmt17(r.e_t_aligned)
        << ',' << fmt17(r.sup_q_err) << ',' << fmt17(r.c_t) << ',' << fmt17(r.f_pop) << ','
        << (r.grad_gap ? fmt17(*r.grad_gap) : std::string()) << ',' << fmt17(r.wall_ms) << '\n';
  }
}

std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  std::vector<MetricsRecord> records;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != kMetricsHeader) throw IoError("metrics.csv: unexpected header '" + line + "'");
      header_seen = true;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (fields.size() != 9) throw IoError("metrics.csv: expected 9 fields in '" + line + "'");
    MetricsRecord r;
    r.t = std::stoull(fields[0]);
    r.epsilon = std::stod(fields[1]);
    r.e_t = std::stod(fields[2]);
    r.e_t_aligned = std::stod(fields[3]);
    r.sup_q_err = std::stod(fields[4]);
    r.c_t = std::stod(fields[5]);
    r.f_pop = std::stod(fields[6]);
    if (!fields[7].empty()) r.grad_gap = std::stod(fields[7]);
    r.wall_ms = std::stod(fields[8]);
    records.push_back(r);
  }
  return records;
}

// ---------------------------------------------------------------------------
// Policy disagreement and Q error

double compute_ct(const MdpSpec& spec, const NetworkWeights& w, const NetworkWeights& wstar,
                  CtWeighting weighting) {
  const auto greedy = greedy_policy(spec, w);
  const auto optimal = greedy_actions(q_table(spec, wstar), spec.num_states, spec.num_actions);
  std::vector<double> weights;
  if (weighting == CtWeighting::stationary) {
    weights = stationary_distribution(spec, greedy).distribution;
  } else {
    weights.assign(spec.num_states, 1.0 / static_cast<double>(spec.num_states));
  }
  double ct = 0.0;
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    if (greedy.action(s) != optimal[s]) ct += weights[s];
  }
  return std::clamp(ct, 0.0, 1.0);
}

double compute_ct_empirical(const MdpSpec& spec, const NetworkWeights& w,
                            const NetworkWeights& wstar, const ReplayBuffer& buf) {
  const auto greedy = greedy_actions(q_table(spec, w), spec.num_states, spec.num_actions);
  const auto optimal = greedy_actions(q_table(spec, wstar), spec.num_states, spec.num_actions);
  const auto freq = state_marginal(buf, spec.num_states);
  double ct = 0.0;
  for (std::size_t s = 0; s < spec.num_states; ++s) {
    if (greedy[s] != optimal[s]) ct += freq[s];
  }
  return std::clamp(ct, 0.0, 1.0);
}

double sup_q_error(const MdpSpec& spec, const NetworkWeights& w, const NetworkWeights& wstar) {
  const auto features = make_feature_table(spec);
  const auto q = q_table(spec, features, w);
  const auto qs = q_table(spec, features, wstar);
  double sup = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) sup = std::max(sup, std::abs(q[i] - qs[i]));
  return sup;
}

// ---------------------------------------------------------------------------
// Gradient Gram matrix

RhoReport estimate_rho(std::span<const WeightedGradient> grads,
                       std::span<const std::size_t> layer_sizes) {
  if (grads.empty()) throw ParameterError("estimate_rho: no gradients");
  const std::size_t P = grads.front().gradient.size();
  Matrix gram(P, P);
  for (const auto& wg : grads) {
    if (wg.gradient.size() != P) throw ShapeError("estimate_rho: gradient lengths differ");
    for (std::size_t i = 0; i < P; ++i) {
      const double gi = wg.weight * wg.gradient[i];
      if (gi == 0.0) continue;
      for (std::size_t j = 0; j < P; ++j) gram(i, j) += gi * wg.gradient[j];
    }
  }
  RhoReport report;
  report.spectrum = sym_eig(gram).values;
  report.rho = report.spectrum.back();
  report.degenerate = report.rho <= kRhoDegenerateThreshold;

  std::size_t offset = 0;
  for (std::size_t n : layer_sizes) {
    if (offset + n > P) throw ShapeError("estimate_rho: layer sizes exceed the gradient length");
    Matrix block(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) block(i, j) = gram(offset + i, offset + j);
    report.per_layer_min.push_back(sym_eig(block).values.back());
    offset += n;
  }
  return report;
}

RhoReport estimate_rho(const MdpSpec& spec, const NetworkWeights& wstar) {
  const auto mu = optimal_measure(spec, wstar);
  std::vector<WeightedGradient> grads;
  grads.reserve(mu.size());
  ForwardTrace trace;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    q_forward(wstar, feature_map(spec, mu.states[i], mu.actions[i]), trace);
    grads.push_back({mu.weights[i], q_grad(wstar, trace).flatten()});
  }
  std::vector<std::size_t> sizes;
  for (const auto& m : wstar.layers) sizes.push_back(m.size());
  return estimate_rho(grads, sizes);
}

// ---------------------------------------------------------------------------
// Expected mini-batch direction and the gap to it

std::vector<double> behavior_measure(const MdpSpec& spec, const NetworkWeights& w_target,
                                     double epsilon) {
  const auto pol = epsilon_greedy(greedy_policy(spec, w_target), epsilon);
  const auto stat = stationary_distribution(spec, pol).distribution;
  std::vector<double> sa(spec.num_states * spec.num_actions);
  for (std::size_t s = 0; s < spec.num_states; ++s)
    for (std::size_t a = 0; a < spec.num_actions; ++a) sa[s * spec.num_actions + a] = stat[s] * pol.prob(s, a);
  return sa;
}

namespace {

/// Bootstrap value of each next state under the target rule.
std::vector<double> bootstrap_table(const MdpSpec& spec, const FeatureTable& features,
                                    const NetworkWeights& w, const NetworkWeights& w_target,
                                    TargetRule rule) {
  const std::size_t S = spec.num_states;
  const std::size_t A = spec.num_actions;
  const auto qt = q_table(spec, features, w_target);
  const auto best = greedy_actions(qt, S, A);
  std::vector<double> boot(S);
  for (std::size_t s = 0; s < S; ++s) {
    boot[s] = rule == TargetRule::dqn ? qt[s * A + best[s]] : q_value(w, features(s, best[s]));
  }
  return boot;
}

/// sum_(s,a) weight[s,a] residual[s,a] dQ/dW.
NetworkWeights weighted_direction(const FeatureTable& features, const NetworkWeights& w,
                                  std::span<const double> weight,
                                  std::span<const double> residual) {
  NetworkWeights g = NetworkWeights::zeros(w.input_dim, w.width, w.depth);
  ForwardTrace trace;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i] == 0.0) continue;
    q_forward(w, features.rows[i], trace);
    accumulate_q_grad(w, trace, weight[i] * residual[i], g);
  }
  return g;
}

}  // namespace

NetworkWeights expected_gradient(const MdpSpec& spec, std::span<const double> sa_weights,
                                 const NetworkWeights& w, const NetworkWeights& w_target,
                                 TargetRule rule) {
  const std::size_t S = spec.num_states;
  const std::size_t A = spec.num_actions;
  if (sa_weights.size() != S * A) throw ShapeError("expected_gradient: one weight per (s, a)");
  const auto features = make_feature_table(spec);
  const auto boot = bootstrap_table(spec, features, w, w_target, rule);
  const auto q = q_table(spec, features, w);
  // Residuals as (Q - gamma V) - r, matching the trainer.
  std::vector<double> residual(S * A);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t a = 0; a < A; ++a) {
      const auto row = spec.next_row(s, a);
      double expected = 0.0;
      for (std::size_t s2 = 0; s2 < S; ++s2) expected += row[s2] * boot[s2];
      residual[s * A + a] = (q[s * A + a] - spec.gamma * expected) - spec.r(s, a);
    }
  }
  return weighted_direction(features, w, sa_weights, residual);
}

GradientGapReport gradient_gap(const MdpSpec& spec, const ReplayBuffer& buf,
                               const NetworkWeights& w, const NetworkWeights& w_target,
                               TargetRule rule) {
  if (buf.entries.empty()) throw ParameterError("gradient_gap: empty buffer");
  const std::size_t S = spec.num_states;
  const std::size_t A = spec.num_actions;
  const auto features = make_feature_table(spec);
  const auto boot = bootstrap_table(spec, features, w, w_target, rule);
  const auto q = q_table(spec, features, w);

  // The whole-buffer average regroups exactly by (s, a): frequency times the
  // mean residual of that pair.
  std::vector<double> count(S * A, 0.0);
  std::vector<double> residual_sum(S * A, 0.0);
  for (const auto& tr : buf.entries) {
    const std::size_t i = tr.s * A + tr.a;
    count[i] += 1.0;
    residual_sum[i] += (q[i] - spec.gamma * boot[tr.s_next]) - tr.r;
  }
  const double n = static_cast<double>(buf.entries.size());
  std::vector<double> weight(S * A, 0.0);
  std::vector<double> residual(S * A, 0.0);
  for (std::size_t i = 0; i < S * A; ++i) {
    if (count[i] == 0.0) continue;
    weight[i] = count[i] / n;
    residual[i] = residual_sum[i] / count[i];
  }
  const auto empirical = weighted_direction(features, w, weight, residual);
  const auto reference = expected_gradient(
      spec, behavior_measure(spec, w_target, buf.collected_with_epsilon), w, w_target, rule);

  GradientGapReport report;
  const auto diff = empirical - reference;
  report.gap = diff.frobenius_norm();
  report.reference_norm = reference.frobenius_norm();
  for (const auto& m : diff.layers) report.per_layer.push_back(m.frobenius_norm());
  return report;
}

// ---------------------------------------------------------------------------
// Hessian blocks

Matrix hessian_block(const MdpSpec& spec, const StateActionMeasure& mu, const NetworkWeights& wstar,
                     const NetworkWeights& w, std::size_t layer, std::size_t cap,
                     std::optional<double> step) {
  if (layer >= w.depth) throw IndexError("hessian_block: layer out of range");
  const std::size_t n = w.layers[layer].size();
  if (n > cap) {
    throw CapacityError("hessian_block: layer has " + std::to_string(n) +
                        " parameters, probe cap is " + std::to_string(cap));
  }
  const std::size_t offset = w.layer_offset(layer);
  auto flat = w.flatten();
  double h = default_fd_step(flat);
  if (step) {
    if (!(*step > 0.0)) throw ParameterError("hessian_block: step must be positive");
    h = *step;
  } else {
    h = std::max(std::min(h, 0.5 * support_kink_margin(spec, mu, w)), 1e-9);
  }
  NetworkWeights probe = w;
  Matrix H(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const double keep = flat[offset + i];
    flat[offset + i] = keep + h;
    probe.assign(flat);
    const auto gp = population_grad(spec, mu, probe, wstar);
    flat[offset + i] = keep - h;
    probe.assign(flat);
    const auto gm = population_grad(spec, mu, probe, wstar);
    flat[offset + i] = keep;
    const auto pd = gp.layers[layer].data();
    const auto md = gm.layers[layer].data();
    for (std::size_t j = 0; j < n; ++j) H(j, i) = (pd[j] - md[j]) / (2.0 * h);
  }
  Matrix sym(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym(i, j) = 0.5 * (H(i, j) + H(j, i));
  return sym;
}

double support_kink_margin(const MdpSpec& spec, const StateActionMeasure& mu,
                           const NetworkWeights& w) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < mu.size(); ++k) {
    margin = std::min(margin, min_abs_preactivation(w, feature_map(spec, mu.states[k], mu.actions[k])));
  }
  return margin;
}

Matrix hessian_block(const MdpSpec& spec, const NetworkWeights& wstar, const NetworkWeights& w,
                     std::size_t layer, std::size_t cap) {
  return hessian_block(spec, optimal_measure(spec, wstar), wstar, w, layer, cap);
}

Matrix gauss_newton_block(const MdpSpec& spec, const StateActionMeasure& mu,
                          const NetworkWeights& wstar, std::size_t layer) {
  if (layer >= wstar.depth) throw IndexError("gauss_newton_block: layer out of range");
  const std::size_t n = wstar.layers[layer].size();
  Matrix G(n, n);
  ForwardTrace trace;
  for (std::size_t k = 0; k < mu.size(); ++k) {
    q_forward(wstar, feature_map(spec, mu.states[k], mu.actions[k]), trace);
    const auto grad = q_grad(wstar, trace);
    const auto g = grad.layers[layer].data();
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = 2.0 * mu.weights[k] * g[i];
      if (gi == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) G(i, j) += gi * g[j];
    }
  }
  return G;
}

LipschitzReport hessian_lipschitz_ratio(const MdpSpec& spec, const NetworkWeights& wstar,
                                        std::size_t layer, std::span<const double> radii,
                                        std::size_t directions, Rng& rng) {
  const auto mu = optimal_measure(spec, wstar);
  const Matrix h_star = hessian_block(spec, mu, wstar, wstar, layer);
  LipschitzReport report;
  report.layer = layer;
  report.width = wstar.width;
  for (std::size_t d = 0; d < directions; ++d) {
    const auto u = random_direction(wstar, rng);
    for (double r : radii) {
      if (!(r > 0.0)) throw ParameterError("hessian_lipschitz_ratio: radii must be positive");
      NetworkWeights w = wstar;
      axpy(r, u, w);
      const Matrix h = hessian_block(spec, mu, wstar, w, layer);
      const double ratio = symmetric_spectral_norm(h - h_star) / weight_distance(w, wstar);
      report.samples.push_back({r, d, ratio});
      report.max_ratio = std::max(report.max_ratio, ratio);
    }
  }
  return report;
}

HBoundReport h_bound_check(const NetworkWeights& w, const NetworkWeights& wstar,
                           std::span<const std::vector<double>> inputs) {
  const auto bound = h_bound_factors(w, wstar);
  HBoundReport report;
  ForwardTrace tw;
  ForwardTrace ts;
  for (const auto& x : inputs) {
    q_forward(w, x, tw);
    q_forward(wstar, x, ts);
    const double xn = norm2(x);
    ++report.samples;
    bool violated = false;
    for (std::size_t l = 1; l <= w.depth; ++l) {
      std::vector<double> diff(tw.activations[l].size());
      for (std::size_t k = 0; k < diff.size(); ++k) {
        diff[k] = tw.activations[l][k] - ts.activations[l][k];
      }
      const double lhs = norm2(diff);
      const double rhs = bound[l] * xn;
      // Rounding slack in the spectral norms only.
      if (lhs > rhs * (1.0 + 1e-12) + 1e-15) violated = true;
      if (rhs > 0.0) report.worst_ratio = std::max(report.worst_ratio, lhs / rhs);
    }
    if (violated) ++report.violations;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Fits

FitReport fit_rate(std::span<const MetricsRecord> records, FitWindow window) {
  FitReport fit;
  fit.quantity = "rate";
  if (records.empty()) throw FitError("fit_rate: no records");
  const std::size_t last = std::min(window.last, records.size() - 1);
  std::vector<double> xs;
  std::vector<double> ys;
  for (std::size_t i = window.first; i <= last && i < records.size(); ++i) {
    if (records[i].e_t > 0.0) {
      xs.push_back(static_cast<double>(records[i].t));
      ys.push_back(std::log(records[i].e_t));
    }
  }
  if (xs.size() < 3) throw FitError("fit_rate: degenerate window (fewer than 3 positive e_t)");
  const auto line = fit_line(xs, ys);
  fit.slope = line.slope;
  fit.intercept = line.intercept;
  fit.value = std::exp(line.slope);
  fit.residual = line.residual_norm;
  fit.count = xs.size();
  fit.first = window.first;
  fit.last = last;
  return fit;
}

FitWindow noise_floor_window(std::span<const MetricsRecord> records, double factor,
                             std::size_t first) {
  FitWindow window;
  window.first = first;
  if (records.empty()) return window;
  const std::size_t tail = std::max<std::size_t>(1, records.size() / 4);
  std::vector<double> plateau;
  for (std::size_t i = records.size() - tail; i < records.size(); ++i) {
    plateau.push_back(records[i].e_t);
  }
  const double floor = factor * median(plateau);
  window.last = records.size() - 1;
  for (std::size_t i = first; i < records.size(); ++i) {
    if (records[i].e_t < floor) {
      window.last = i == 0 ? 0 : i - 1;
      break;
    }
  }
  return window;
}

FitReport fit_holder(std::span<const MetricsRecord> records) {
  std::vector<double> xs;
  std::vector<double> ys;
  for (const auto& r : records) {
    if (r.c_t > 0.0 && r.e_t > 0.0) {
      xs.push_back(std::log(r.e_t));
      ys.push_back(std::log(r.c_t));
    }
  }
  if (xs.size() < 3) throw FitError("fit_holder: fewer than 3 records with c_t > 0 and e_t > 0");
  const auto line = fit_line(xs, ys);
  FitReport fit;
  fit.quantity = "holder_exponent";
  fit.slope = line.slope;
  fit.intercept = line.intercept;
  fit.value = line.slope;
  fit.residual = line.residual_norm;
  fit.count = xs.size();
  fit.last = records.empty() ? 0 : records.size() - 1;
  return fit;
}

FitReport fit_sample_scaling(const std::map<std::size_t, double>& error_by_n) {
  if (error_by_n.size() < 3) throw FitError("fit_sample_scaling: need at least 3 distinct N");
  std::vector<double> xs;
  std::vector<double> ys;
  for (const auto& [n, err] : error_by_n) {
    if (!(err > 0.0) || n == 0) throw FitError("fit_sample_scaling: errors and N must be positive");
    xs.push_back(std::log(static_cast<double>(n)));
    ys.push_back(std::log(err));
  }
  const auto line = fit_line(xs, ys);
  FitReport fit;
  fit.quantity = "log_error_vs_log_n";
  fit.slope = line.slope;
  fit.intercept = line.intercept;
  fit.value = line.slope;
  fit.residual = line.residual_norm;
  fit.count = xs.size();
  fit.first = error_by_n.begin()->first;
  fit.last = error_by_n.rbegin()->first;
  return fit;
}

nlohmann::json fit_to_json(const FitReport& fit) {
  return {{"quantity", fit.quantity}, {"slope", fit.slope},       {"intercept", fit.intercept},
          {"value", fit.value},       {"residual", fit.residual}, {"count", fit.count},
          {"first", fit.first},       {"last", fit.last}};
}

}  // namespace dqnlab
