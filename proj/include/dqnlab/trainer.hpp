#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dqnlab/analysis.hpp"
#include "dqnlab/env.hpp"
#include "dqnlab/qnet.hpp"
#include "dqnlab/replay.hpp"
#include "dqnlab/schedule.hpp"

namespace dqnlab {

/// dqn:  y = r + gamma * max_a' Q(W_target; s', a')
/// ddqn: y = r + gamma * Q(W; s', argmax_a' Q(W_target; s', a'))
enum class TargetRule { dqn, ddqn };

TargetRule parse_target_rule(const std::string& name);
std::string to_string(TargetRule rule);

enum class InitKind { planted, random };

struct TrainConfig {
  std::size_t outer_loops = 30;   // T
  std::size_t inner_loops = 100;  // M
  double step_size = 0.05;        // eta
  double momentum = 0.3;          // beta
  std::size_t buffer_size = 4096; // N
  std::size_t batch_size = 0;     // 0 selects min(64, N)
  std::size_t burn_in = 100;
  TargetRule target_rule = TargetRule::dqn;
  SamplingMode sampling_mode = SamplingMode::iid;
  EpsilonSchedule schedule;
  /// When unset the schedule's C_max is the measured C_0 of W^(0,0).
  std::optional<double> c_max;
  InitKind init = InitKind::planted;
  double init_radius = 0.5;  // delta
  std::uint64_t seed = 1;
  bool diagnostics = false;  // fills grad_gap
  bool timing = false;       // fills wall_ms; off keeps output byte-reproducible

  std::size_t effective_batch() const;
  void validate() const;
};

/// Thrown when the weights leave the finite range or exceed 1e6 * ||W*||_F.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t t, std::size_t m, std::vector<MetricsRecord> records);
  std::size_t t;
  std::size_t m;
  std::vector<MetricsRecord> records;  // everything measured before divergence
};

/// (1/|B|) sum_n (Q(W; s_n, a_n) - y_n) dQ(W; s_n, a_n)/dW with y_n = r_n + gamma V(s'_n).
/// The residual is evaluated as (Q - gamma V) - r, which is exactly zero at W*
/// on deterministic instances.
NetworkWeights minibatch_gradient(const MdpSpec& spec, std::span<const Transition> batch,
                                  const NetworkWeights& w, const NetworkWeights& w_target,
                                  TargetRule rule);

/// w - eta g + beta (w - w_prev).
NetworkWeights agd_step(const NetworkWeights& w, const NetworkWeights& w_prev,
                        const NetworkWeights& g, double eta, double beta);

struct TrainResult {
  std::vector<MetricsRecord> records;
  NetworkWeights final_weights;
  /// Schedule after C_max, e0 and instance constants were filled in.
  EpsilonSchedule schedule;
};

/// Optional per-outer-loop hook, called after the buffer is collected with the
/// target weights, the buffer, and the current outer index.
struct TrainHooks {
  std::function<void(std::size_t t, const NetworkWeights& w_target, const ReplayBuffer& buf)>
      on_buffer;
};

/// Outer loops with a frozen target network and a fresh epsilon-greedy buffer,
/// inner loops of heavy-ball steps on mini-batches. Emits a baseline record for
/// W^(0,0) and one record per completed outer loop; with M = 0 only the baseline.
TrainResult run(const MdpSpec& spec, const NetworkWeights& wstar, const TrainConfig& cfg,
                const TrainHooks& hooks = {});

/// W^(0,0): W* + delta u for a random unit direction u, or a fresh random network.
NetworkWeights initial_weights(const NetworkWeights& wstar, const TrainConfig& cfg, Rng& rng);

}  // namespace dqnlab
