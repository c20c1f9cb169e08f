#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dqnlab/env.hpp"

namespace dqnlab {

class Rng;

struct Transition {
  std::size_t s = 0;
  std::size_t a = 0;
  double r = 0.0;
  std::size_t s_next = 0;

  friend bool operator==(const Transition&, const Transition&) = default;
};

enum class SamplingMode { iid, sequential };

SamplingMode parse_sampling_mode(const std::string& name);
std::string to_string(SamplingMode mode);

/// Transitions from one epsilon-greedy trajectory, rebuilt every outer loop.
struct ReplayBuffer {
  std::size_t capacity = 0;
  std::vector<Transition> entries;
  double collected_with_epsilon = 0.0;
  std::string collection_mode = "fresh-per-outer-loop";

  std::size_t size() const { return entries.size(); }
};

/// Rolls one trajectory from a uniform start state. At each step a uniform
/// action is taken with probability epsilon, otherwise the lowest-index argmax
/// of Q(w_target; s, .). The first burn_in transitions are discarded and the
/// next n stored.
ReplayBuffer collect(const MdpSpec& spec, const NetworkWeights& w_target, double epsilon,
                     std::size_t n, std::size_t burn_in, Rng& rng);

/// Same, with the greedy action per state precomputed.
ReplayBuffer collect_with_actions(const MdpSpec& spec, std::span<const std::size_t> greedy,
                                  double epsilon, std::size_t n, std::size_t burn_in, Rng& rng);

/// iid: uniform with replacement. sequential: contiguous window from a
/// uniform offset, wrapping at the end. `offset` forces the sequential start.
std::vector<Transition> sample_minibatch(const ReplayBuffer& buf, std::size_t size,
                                         SamplingMode mode, Rng& rng,
                                         std::optional<std::size_t> offset = {});

/// Allocation-free variant for the training loop.
void sample_minibatch_into(const ReplayBuffer& buf, std::size_t size, SamplingMode mode, Rng& rng,
                           std::vector<Transition>& out);

/// Empirical state frequencies of the stored transitions.
std::vector<double> state_marginal(const ReplayBuffer& buf, std::size_t num_states);

/// CSV with header s,a,r,s_next.
void write_buffer_csv(const ReplayBuffer& buf, std::ostream& out);

}  // namespace dqnlab
