#include "dqnlab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>

#include "dqnlab/errors.hpp"
#include "dqnlab/rng.hpp"

namespace dqnlab {

TargetRule parse_target_rule(const std::string& name) {
  if (name == "dqn") return TargetRule::dqn;
  if (name == "ddqn") return TargetRule::ddqn;
  throw ParameterError("unknown target rule '" + name + "'");
}

std::string to_string(TargetRule rule) { return rule == TargetRule::dqn ? "dqn" : "ddqn"; }

std::size_t TrainConfig::effective_batch() const {
  return batch_size == 0 ? std::min<std::size_t>(64, buffer_size) : batch_size;
}

void TrainConfig::validate() const {
  if (outer_loops == 0) throw ParameterError("T must be at least 1");
  if (buffer_size == 0) throw ParameterError("N must be at least 1");
  if (effective_batch() == 0 || effective_batch() > buffer_size) {
    throw ParameterError("batch size must lie in [1, N]");
  }
  if (!(step_size > 0.0)) throw ParameterError("step size must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must lie in [0, 1)");
  if (!(init_radius >= 0.0)) throw ParameterError("init radius must be nonnegative");
  if (c_max && !(*c_max >= 0.0 && *c_max < 1.0)) throw ParameterError("C_max must lie in [0, 1)");
}

DivergenceError::DivergenceError(std::size_t t_, std::size_t m_, std::vector<MetricsRecord> recs)
    : std::runtime_error("training diverged at t=" + std::to_string(t_) +
                         ", m=" + std::to_string(m_)),
      t(t_),
      m(m_),
      records(std::move(recs)) {}

NetworkWeights minibatch_gradient(const MdpSpec& spec, std::span<const Transition> batch,
                                  const NetworkWeights& w, const NetworkWeights& w_target,
                                  TargetRule rule) {
  if (batch.empty()) throw ParameterError("minibatch_gradient: empty batch");
  if (!w.same_shape(w_target)) throw ShapeError("minibatch_gradient: weight shapes differ");
  NetworkWeights g = NetworkWeights::zeros(w.input_dim, w.width, w.depth);
  ForwardTrace trace;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& tr : batch) {
    const std::size_t A = spec.num_actions;
    std::vector<double> target_q(A);
    for (std::size_t a = 0; a < A; ++a) {
      target_q[a] = q_value(w_target, feature_map(spec, tr.s_next, a));
    }
    const std::size_t best = static_cast<std::size_t>(
        std::max_element(target_q.begin(), target_q.end()) - target_q.begin());
    const double bootstrap = rule == TargetRule::dqn
                                 ? target_q[best]
                                 : q_value(w, feature_map(spec, tr.s_next, best));
    const double q = q_forward(w, feature_map(spec, tr.s, tr.a), trace);
    accumulate_q_grad(w, trace, scale * ((q - spec.gamma * bootstrap) - tr.r), g);
  }
  return g;
}

namespace {

void agd_step_into(const NetworkWeights& w, const NetworkWeights& w_prev, const NetworkWeights& g,
                   double eta, double beta, NetworkWeights& out) {
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto od = out.layers[l].data();
    auto wd = w.layers[l].data();
    auto pd = w_prev.layers[l].data();
    auto gd = g.layers[l].data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = wd[i] - eta * gd[i] + beta * (wd[i] - pd[i]);
  }
}

}  // namespace

NetworkWeights agd_step(const NetworkWeights& w, const NetworkWeights& w_prev,
                        const NetworkWeights& g, double eta, double beta) {
  if (!w.same_shape(w_prev) || !w.same_shape(g)) throw ShapeError("agd_step: weight shapes differ");
  NetworkWeights next = w;
  agd_step_into(w, w_prev, g, eta, beta, next);
  return next;
}

NetworkWeights initial_weights(const NetworkWeights& wstar, const TrainConfig& cfg, Rng& rng) {
  if (cfg.init == InitKind::random) {
    return random_unit_spectral(wstar.input_dim, wstar.width, wstar.depth, rng);
  }
  const auto u = random_direction(wstar, rng);
  NetworkWeights w = wstar;
  axpy(cfg.init_radius, u, w);
  return w;
}

namespace {

using Clock = std::chrono::steady_clock;

/// Per-run constants shared by the measurement and update steps.
struct RunContext {
  const MdpSpec& spec;
  const NetworkWeights& wstar;
  FeatureTable features;
  std::vector<double> q_star;
  StateActionMeasure mu_star;
  Clock::time_point started = Clock::now();
  bool timing = false;
};

MetricsRecord measure(const RunContext& ctx, std::size_t t, const NetworkWeights& w, double eps) {
  MetricsRecord rec;
  rec.t = t;
  rec.epsilon = eps;
  rec.e_t = weight_distance(w, ctx.wstar);
  rec.e_t_aligned = weight_distance(w, ctx.wstar, true);
  const auto q = q_table(ctx.spec, ctx.features, w);
  double sup = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) sup = std::max(sup, std::abs(q[i] - ctx.q_star[i]));
  rec.sup_q_err = sup;
  rec.c_t = compute_ct(ctx.spec, w, ctx.wstar, CtWeighting::stationary);
  rec.f_pop = population_risk(ctx.spec, ctx.mu_star, w, ctx.wstar);
  if (ctx.timing) {
    rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - ctx.started).count();
  }
  return rec;
}

/// Accumulates the mini-batch direction with labels drawn from per-outer-loop
/// tables: target_max[s'] for dqn, target_argmax[s'] for ddqn.
void batch_gradient(const RunContext& ctx, std::span<const Transition> batch,
                    const NetworkWeights& w, TargetRule rule,
                    std::span<const double> target_max,
                    std::span<const std::size_t> target_argmax, ForwardTrace& trace,
                    NetworkWeights& g) {
  for (auto& m : g.layers) std::fill(m.data().begin(), m.data().end(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  const double gamma = ctx.spec.gamma;
  for (const auto& tr : batch) {
    double bootstrap;
    if (rule == TargetRule::dqn) {
      bootstrap = target_max[tr.s_next];
    } else {
      bootstrap = q_forward(w, ctx.features(tr.s_next, target_argmax[tr.s_next]), trace);
    }
    const double q = q_forward(w, ctx.features(tr.s, tr.a), trace);
    accumulate_q_grad(w, trace, scale * ((q - gamma * bootstrap) - tr.r), g);
  }
}

}  // namespace

TrainResult run(const MdpSpec& spec, const NetworkWeights& wstar, const TrainConfig& cfg,
                const TrainHooks& hooks) {
  cfg.validate();
  wstar.validate();
  if (wstar.input_dim != spec.input_dim()) throw ShapeError("W* does not match the instance");

  Rng rng(cfg.seed);
  RunContext ctx{spec, wstar, make_feature_table(spec), {}, optimal_measure(spec, wstar)};
  ctx.q_star = q_table(spec, ctx.features, wstar);
  ctx.timing = cfg.timing;
  const std::size_t S = spec.num_states;
  const std::size_t A = spec.num_actions;

  NetworkWeights w = initial_weights(wstar, cfg, rng);
  const double e0 = weight_distance(w, wstar);

  TrainResult result;
  EpsilonSchedule sched = cfg.schedule;
  sched.buffer_size = cfg.buffer_size;
  sched.num_actions = A;
  sched.r_max = spec.r_max;
  sched.gamma = spec.gamma;
  sched.e0 = e0;
  if (!(sched.kappa > 0.0)) sched.kappa = 1.0 / std::sqrt(static_cast<double>(spec.input_dim()));
  // C_max must stay below 1 for the theoretical forms.
  sched.c_max = std::min(cfg.c_max.value_or(compute_ct(spec, w, wstar)), 0.99);
  result.schedule = sched;

  auto eps_for = [&](std::size_t t, double e_t) { return epsilon_at(sched, t, e_t); };

  auto& records = result.records;
  records.push_back(measure(ctx, 0, w, eps_for(0, e0)));
  if (cfg.inner_loops == 0) {
    result.final_weights = w;
    return result;
  }

  const double blowup = 1e6 * std::max(1.0, wstar.frobenius_norm());
  const std::size_t batch_size = cfg.effective_batch();
  std::vector<Transition> batch;
  ForwardTrace trace;
  NetworkWeights g = NetworkWeights::zeros(w.input_dim, w.width, w.depth);
  NetworkWeights w_prev = w;
  NetworkWeights w_next = w;
  std::vector<double> target_max(S);
  std::vector<std::size_t> target_argmax(S);

  for (std::size_t t = 0; t < cfg.outer_loops; ++t) {
    const NetworkWeights w_target = w;
    const double eps = records.back().epsilon;

    const auto q_target = q_table(spec, ctx.features, w_target);
    const auto greedy = greedy_actions(q_target, S, A);
    for (std::size_t s = 0; s < S; ++s) {
      target_argmax[s] = greedy[s];
      target_max[s] = q_target[s * A + greedy[s]];
    }
    const ReplayBuffer buffer = collect_with_actions(spec, greedy, eps, cfg.buffer_size,
                                                     cfg.burn_in, rng);
    if (hooks.on_buffer) hooks.on_buffer(t, w_target, buffer);
    if (cfg.diagnostics) {
      records.back().grad_gap = gradient_gap(spec, buffer, w, w_target, cfg.target_rule).gap;
    }

    // Momentum starts from rest in every outer loop: W^(t,-1) = W^(t,0).
    w_prev = w;
    for (std::size_t m = 0; m < cfg.inner_loops; ++m) {
      sample_minibatch_into(buffer, batch_size, cfg.sampling_mode, rng, batch);
      batch_gradient(ctx, batch, w, cfg.target_rule, target_max, target_argmax, trace, g);
      agd_step_into(w, w_prev, g, cfg.step_size, cfg.momentum, w_next);
      std::swap(w_prev, w);
      std::swap(w, w_next);
      if (!w.all_finite() || w.frobenius_norm() > blowup) {
        throw DivergenceError(t, m, records);
      }
    }
    const double e_next = weight_distance(w, wstar);
    records.push_back(measure(ctx, t + 1, w, eps_for(t + 1, e_next)));
  }
  result.final_weights = w;
  return result;
}

}  // namespace dqnlab
