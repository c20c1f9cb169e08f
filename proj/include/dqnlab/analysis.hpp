#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dqnlab/env.hpp"
#include "dqnlab/qnet.hpp"
#include "dqnlab/replay.hpp"

namespace dqnlab {

class Rng;
enum class TargetRule;

/// Measurements taken at the start of an outer loop, W = W^(t,0).
struct MetricsRecord {
  std::size_t t = 0;
  double epsilon = 0.0;
  double e_t = 0.0;
  double e_t_aligned = 0.0;
  double sup_q_err = 0.0;
  double c_t = 0.0;
  double f_pop = 0.0;
  std::optional<double> grad_gap;
  double wall_ms = 0.0;
};

/// Fixed column order of metrics.csv.
inline constexpr const char* kMetricsHeader =
    "t,epsilon,e_t,e_t_aligned,sup_q_err,c_t,f_pop,grad_gap,wall_ms";

/// Writes the header and one row per record; doubles use 17 significant
/// digits and an absent grad_gap is an empty field.
void write_metrics_csv(std::span<const MetricsRecord> records, std::ostream& out);
/// Parses what write_metrics_csv produced; lines starting with '#' are skipped.
std::vector<MetricsRecord> read_metrics_csv(std::istream& in);

enum class CtWeighting { stationary, uniform };

/// Mass of states where the lowest-index argmax of Q(w) differs from pi*.
/// stationary: weights from the stationary distribution of the w-greedy chain.
/// uniform: every state counts equally.
double compute_ct(const MdpSpec& spec, const NetworkWeights& w, const NetworkWeights& wstar,
                  CtWeighting weighting = CtWeighting::stationary);
/// Same disagreement, weighted by the buffer's empirical state frequencies.
double compute_ct_empirical(const MdpSpec& spec, const NetworkWeights& w,
                            const NetworkWeights& wstar, const ReplayBuffer& buf);

/// max over all (s, a) of |Q(w; s, a) - Q(w*; s, a)|.
double sup_q_error(const MdpSpec& spec, const NetworkWeights& w, const NetworkWeights& wstar);

struct WeightedGradient {
  double weight = 0.0;
  std::vector<double> gradient;  // flattened dQ/dW
};

struct RhoReport {
  double rho = 0.0;
  std::vector<double> spectrum;  // descending
  std::vector<double> per_layer_min;
  bool degenerate = false;  // rho <= 1e-8
};

inline constexpr double kRhoDegenerateThreshold = 1e-8;

/// Smallest eigenvalue of the Gram matrix sum_i w_i g_i g_i^T.
/// `layer_sizes` (optional) splits the parameter vector for per-layer minima.
RhoReport estimate_rho(std::span<const WeightedGradient> grads,
                       std::span<const std::size_t> layer_sizes = {});
/// Gram of dQ(W*)/dW over the mu* support.
RhoReport estimate_rho(const MdpSpec& spec, const NetworkWeights& wstar);

/// State-action distribution of the epsilon-greedy chain of w_target,
/// index s * A + a.
std::vector<double> behavior_measure(const MdpSpec& spec, const NetworkWeights& w_target,
                                     double epsilon);

/// Exact expectation of the mini-batch direction under a state-action
/// distribution `sa_weights` (index s * A + a) with exact next-state
/// expectations in the labels.
NetworkWeights expected_gradient(const MdpSpec& spec, std::span<const double> sa_weights,
                                 const NetworkWeights& w, const NetworkWeights& w_target,
                                 TargetRule rule);

struct GradientGapReport {
  double gap = 0.0;
  std::vector<double> per_layer;
  double reference_norm = 0.0;
};

/// ||g(W) - E g(W)||_2 where g is the mini-batch direction over the whole
/// buffer and the expectation is over the stationary state-action
/// distribution of the buffer's behavior policy (epsilon-greedy on w_target).
GradientGapReport gradient_gap(const MdpSpec& spec, const ReplayBuffer& buf,
                               const NetworkWeights& w, const NetworkWeights& w_target,
                               TargetRule rule);

/// Symmetrized central-difference Hessian of population_risk restricted to
/// one layer (0-based). Throws CapacityError above `cap` parameters.
/// Without `step`, h = min(default_fd_step, kink margin / 2) floored at 1e-9,
/// where the kink margin is the smallest |pre-activation| of W over the
/// support, so no probe crosses a ReLU gate when the margin allows it.
Matrix hessian_block(const MdpSpec& spec, const StateActionMeasure& mu, const NetworkWeights& wstar,
                     const NetworkWeights& w, std::size_t layer, std::size_t cap = 256,
                     std::optional<double> step = {});
Matrix hessian_block(const MdpSpec& spec, const NetworkWeights& wstar, const NetworkWeights& w,
                     std::size_t layer, std::size_t cap = 256);

/// Smallest |pre-activation| of W over the measure's (s, a) support.
double support_kink_margin(const MdpSpec& spec, const StateActionMeasure& mu,
                           const NetworkWeights& w);

/// 2 E_{mu*} grad_l Q(W*) grad_l Q(W*)^T, the exact Hessian block at W*.
Matrix gauss_newton_block(const MdpSpec& spec, const StateActionMeasure& mu,
                          const NetworkWeights& wstar, std::size_t layer);

struct LipschitzSample {
  double radius = 0.0;
  std::size_t direction = 0;
  double ratio = 0.0;
};

struct LipschitzReport {
  std::size_t layer = 0;
  std::size_t width = 0;
  double max_ratio = 0.0;
  std::vector<LipschitzSample> samples;
};

/// ||H_l(W) - H_l(W*)||_2 / ||W - W*||_F at W = W* + r u for each radius r and
/// each of `directions` random unit directions u.
LipschitzReport hessian_lipschitz_ratio(const MdpSpec& spec, const NetworkWeights& wstar,
                                        std::size_t layer, std::span<const double> radii,
                                        std::size_t directions, Rng& rng);

struct HBoundReport {
  std::size_t samples = 0;
  std::size_t violations = 0;
  /// max over samples and layers of ||h(W) - h(W*)|| / (B ||x||).
  double worst_ratio = 0.0;
};

/// Checks ||h^(l)(W) - h^(l)(W*)||_2 <= B_l ||x||_2 for every input and layer.
HBoundReport h_bound_check(const NetworkWeights& w, const NetworkWeights& wstar,
                           std::span<const std::vector<double>> inputs);

struct FitReport {
  std::string quantity;
  double slope = 0.0;
  double intercept = 0.0;
  /// exp(slope) for rate fits, the slope itself otherwise.
  double value = 0.0;
  double residual = 0.0;
  std::size_t count = 0;
  std::size_t first = 0;
  std::size_t last = 0;
};

struct FitWindow {
  std::size_t first = 0;
  std::size_t last = static_cast<std::size_t>(-1);  // inclusive; clipped to the records
};

/// Geometric rate from log e_t vs t over the window; value = exp(slope).
FitReport fit_rate(std::span<const MetricsRecord> records, FitWindow window = {});

/// Window starting at `first` and ending before the first record whose e_t
/// falls below factor * (median e_t over the final quarter of the run).
FitWindow noise_floor_window(std::span<const MetricsRecord> records, double factor = 10.0,
                             std::size_t first = 0);

/// Hoelder exponent: slope of log c_t vs log e_t over records with both positive.
FitReport fit_holder(std::span<const MetricsRecord> records);

/// Slope of log(error) vs log(N); needs three or more distinct N.
FitReport fit_sample_scaling(const std::map<std::size_t, double>& error_by_n);

nlohmann::json fit_to_json(const FitReport& fit);

}  // namespace dqnlab
