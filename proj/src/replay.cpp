#include "dqnlab/replay.hpp"

#include <cstdio>
#include <ostream>

#include "dqnlab/errors.hpp"
#include "dqnlab/rng.hpp"

namespace dqnlab {

SamplingMode parse_sampling_mode(const std::string& name) {
  if (name == "iid") return SamplingMode::iid;
  if (name == "sequential") return SamplingMode::sequential;
  throw ParameterError("unknown sampling mode '" + name + "'");
}

std::string to_string(SamplingMode mode) {
  return mode == SamplingMode::iid ? "iid" : "sequential";
}

ReplayBuffer collect_with_actions(const MdpSpec& spec, std::span<const std::size_t> greedy,
                                  double epsilon, std::size_t n, std::size_t burn_in, Rng& rng) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ParameterError("epsilon must lie in [0, 1]");
  if (n == 0) throw ParameterError("collect: buffer size must be at least 1");
  if (greedy.size() != spec.num_states) throw ShapeError("collect: one greedy action per state");

  ReplayBuffer buf;
  buf.capacity = n;
  buf.collected_with_epsilon = epsilon;
  buf.entries.reserve(n);

  std::size_t s = rng.uniform_index(spec.num_states);
  for (std::size_t step = 0; step < burn_in + n; ++step) {
    const std::size_t a =
        rng.bernoulli(epsilon) ? rng.uniform_index(spec.num_actions) : greedy[s];
    const auto row = spec.next_row(s, a);
    // Inverse-CDF draw of the successor.
    const double u = rng.uniform();
    double cum = 0.0;
    std::size_t s_next = spec.num_states - 1;
    for (std::size_t s2 = 0; s2 < spec.num_states; ++s2) {
      cum += row[s2];
      if (u < cum) {
        s_next = s2;
        break;
      }
    }
    // Guard against rounding in the cumulative sum landing on a zero-mass tail.
    while (row[s_next] == 0.0 && s_next > 0) --s_next;
    if (step >= burn_in) buf.entries.push_back({s, a, spec.r(s, a), s_next});
    s = s_next;
  }
  return buf;
}

ReplayBuffer collect(const MdpSpec& spec, const NetworkWeights& w_target, double epsilon,
                     std::size_t n, std::size_t burn_in, Rng& rng) {
  const auto greedy = greedy_actions(q_table(spec, w_target), spec.num_states, spec.num_actions);
  return collect_with_actions(spec, greedy, epsilon, n, burn_in, rng);
}

void sample_minibatch_into(const ReplayBuffer& buf, std::size_t size, SamplingMode mode, Rng& rng,
                           std::vector<Transition>& out) {
  const std::size_t n = buf.entries.size();
  if (size > n) {
    throw CapacityError("mini-batch of " + std::to_string(size) + " exceeds buffer length " +
                        std::to_string(n));
  }
  out.resize(size);
  if (mode == SamplingMode::iid) {
    for (auto& t : out) t = buf.entries[rng.uniform_index(n)];
  } else {
    const std::size_t start = rng.uniform_index(n);
    for (std::size_t i = 0; i < size; ++i) out[i] = buf.entries[(start + i) % n];
  }
}

std::vector<Transition> sample_minibatch(const ReplayBuffer& buf, std::size_t size,
                                         SamplingMode mode, Rng& rng,
                                         std::optional<std::size_t> offset) {
  std::vector<Transition> out;
  if (offset && mode == SamplingMode::sequential) {
    const std::size_t n = buf.entries.size();
    if (size > n) throw CapacityError("mini-batch exceeds buffer length");
    if (n == 0) return out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) out.push_back(buf.entries[(*offset + i) % n]);
    return out;
  }
  sample_minibatch_into(buf, size, mode, rng, out);
  return out;
}

std::vector<double> state_marginal(const ReplayBuffer& buf, std::size_t num_states) {
  std::vector<double> freq(num_states, 0.0);
  if (buf.entries.empty()) return freq;
  for (const auto& t : buf.entries) freq.at(t.s) += 1.0;
  for (double& f : freq) f /= static_cast<double>(buf.entries.size());
  return freq;
}

void write_buffer_csv(const ReplayBuffer& buf, std::ostream& out) {
  out << "s,a,r,s_next\n";
  char num[32];
  for (const auto& t : buf.entries) {
    std::snprintf(num, sizeof num, "%.17g", t.r);
    out << t.s << ',' << t.a << ',' << num << ',' << t.s_next << '\n';
  }
}

}  // namespace dqnlab
