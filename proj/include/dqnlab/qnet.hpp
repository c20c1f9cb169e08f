#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dqnlab/numerics.hpp"
#include "json.hpp"

namespace dqnlab {

class Rng;

/// Weights of the bias-free ReLU Q-network
///   Q(W; x) = (1/K) * 1^T relu(W_L^T ... relu(W_1^T x)).
/// layers[0] is d x K, layers[l] is K x K for l >= 1. Column k of a layer is
/// the incoming weight vector of neuron k.
struct NetworkWeights {
  std::size_t input_dim = 0;
  std::size_t width = 0;
  std::size_t depth = 0;
  std::vector<Matrix> layers;

  static NetworkWeights zeros(std::size_t input_dim, std::size_t width, std::size_t depth);

  /// Throws ShapeError if the layer shapes do not chain, EvaluationError on
  /// non-finite entries.
  void validate() const;

  std::size_t parameter_count() const;
  std::size_t layer_offset(std::size_t layer) const;
  bool same_shape(const NetworkWeights& other) const;

  /// Layer-by-layer concatenation of the row-major entries.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);

  double frobenius_norm() const;
  bool all_finite() const;

  friend bool operator==(const NetworkWeights&, const NetworkWeights&) = default;
};

NetworkWeights operator-(const NetworkWeights& a, const NetworkWeights& b);
NetworkWeights operator+(const NetworkWeights& a, const NetworkWeights& b);
NetworkWeights operator*(double s, const NetworkWeights& a);
/// y += s * x, shapes must agree.
void axpy(double s, const NetworkWeights& x, NetworkWeights& y);

/// Post-activation values h^(1) = x, h^(l+1) = relu(W_l^T h^(l)).
/// activations has depth + 1 entries; the last is the output-layer vector
/// whose mean is q.
struct ForwardTrace {
  std::vector<std::vector<double>> activations;
  double q = 0.0;
};

/// Evaluates the network, reusing `trace` storage.
double q_forward(const NetworkWeights& w, std::span<const double> x, ForwardTrace& trace);
std::pair<double, ForwardTrace> q_forward(const NetworkWeights& w, std::span<const double> x);

/// Network value only.
double q_value(const NetworkWeights& w, std::span<const double> x);

/// dQ/dW by backpropagation through `trace`, with relu'(0) = 0.
NetworkWeights q_grad(const NetworkWeights& w, const ForwardTrace& trace);

/// out += scale * dQ/dW. `out` must already have the shape of `w`.
void accumulate_q_grad(const NetworkWeights& w, const ForwardTrace& trace, double scale,
                       NetworkWeights& out);

/// Frobenius norm of a - b. With `aligned`, b's hidden neurons are first
/// permuted layer by layer (greedy column matching) to best match a; the
/// smaller of the aligned and identity distances is returned.
double weight_distance(const NetworkWeights& a, const NetworkWeights& b, bool aligned = false);

/// Applies a per-layer neuron permutation: column j of layer l becomes column
/// perm[l][j] and the rows of layer l+1 follow. The network function is unchanged.
NetworkWeights permute_neurons(const NetworkWeights& w,
                               const std::vector<std::vector<std::size_t>>& perms);

/// Smallest |pre-activation| over all layers and neurons for input x.
double min_abs_preactivation(const NetworkWeights& w, std::span<const double> x);

/// Gaussian entries, each layer rescaled to unit spectral norm.
NetworkWeights random_unit_spectral(std::size_t input_dim, std::size_t width, std::size_t depth,
                                    Rng& rng);

/// Unit-Frobenius random direction with the shape of `like`.
NetworkWeights random_direction(const NetworkWeights& like, Rng& rng);

/// Per-layer bounds B_l with ||h^(l)(W) - h^(l)(W*)||_2 <= B_l * ||x||_2 for every
/// input x; entry l corresponds to h^(l+1) (index 0 is the input, always 0).
/// Built from B_1 = 0, B_{l+1} = ||W_l|| B_l + ||W_l - W*_l|| prod_{j<l} ||W*_j||.
std::vector<double> h_bound_factors(const NetworkWeights& w, const NetworkWeights& wstar);

nlohmann::json weights_to_json(const NetworkWeights& w);
NetworkWeights weights_from_json(const nlohmann::json& j);

}  // namespace dqnlab
