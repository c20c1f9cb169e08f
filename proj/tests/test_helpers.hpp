#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dqnlab/numerics.hpp"
#include "dqnlab/qnet.hpp"
#include "dqnlab/rng.hpp"

namespace testutil {

inline dqnlab::NetworkWeights random_weights(std::size_t d, std::size_t k, std::size_t l,
                                             dqnlab::Rng& rng, double scale = 1.0) {
  auto w = dqnlab::NetworkWeights::zeros(d, k, l);
  for (auto& m : w.layers)
    for (double& v : m.data()) v = scale * rng.normal();
  return w;
}

inline std::vector<double> random_vector(std::size_t n, dqnlab::Rng& rng, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

/// Smallest |pre-activation| of the forward pass, computed from scratch.
inline double min_preactivation(const dqnlab::NetworkWeights& w, std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end());
  double best = INFINITY;
  for (const auto& m : w.layers) {
    std::vector<double> next(m.cols(), 0.0);
    for (std::size_t k = 0; k < m.cols(); ++k) {
      double z = 0.0;
      for (std::size_t i = 0; i < m.rows(); ++i) z += m(i, k) * h[i];
      best = std::min(best, std::abs(z));
      next[k] = z > 0 ? z : 0.0;
    }
    h = std::move(next);
  }
  return best;
}

}  // namespace testutil
