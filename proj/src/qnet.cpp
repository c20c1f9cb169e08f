#include "dqnlab/qnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "dqnlab/errors.hpp"
#include "dqnlab/rng.hpp"

namespace dqnlab {

NetworkWeights NetworkWeights::zeros(std::size_t input_dim, std::size_t width, std::size_t depth) {
  if (input_dim == 0 || width == 0 || depth == 0) {
    throw ParameterError("network dimensions must be positive");
  }
  NetworkWeights w;
  w.input_dim = input_dim;
  w.width = width;
  w.depth = depth;
  w.layers.reserve(depth);
  w.layers.emplace_back(input_dim, width);
  for (std::size_t l = 1; l < depth; ++l) w.layers.emplace_back(width, width);
  return w;
}

void NetworkWeights::validate() const {
  if (layers.size() != depth || depth == 0) throw ShapeError("layer count differs from depth");
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t rows = l == 0 ? input_dim : width;
    if (layers[l].rows() != rows || layers[l].cols() != width) {
      throw ShapeError("layer " + std::to_string(l + 1) + " has shape " +
                       std::to_string(layers[l].rows()) + "x" + std::to_string(layers[l].cols()) +
                       ", expected " + std::to_string(rows) + "x" + std::to_string(width));
    }
  }
  if (!all_finite()) throw EvaluationError("network weights contain non-finite entries");
}

std::size_t NetworkWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& m : layers) n += m.size();
  return n;
}

std::size_t NetworkWeights::layer_offset(std::size_t layer) const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < layer; ++l) n += layers[l].size();
  return n;
}

bool NetworkWeights::same_shape(const NetworkWeights& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].rows() != other.layers[l].rows() || layers[l].cols() != other.layers[l].cols()) {
      return false;
    }
  }
  return true;
}

std::vector<double> NetworkWeights::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& m : layers) flat.insert(flat.end(), m.data().begin(), m.data().end());
  return flat;
}

void NetworkWeights::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw ShapeError("assign: flat vector length mismatch");
  std::size_t k = 0;
  for (auto& m : layers) {
    for (double& v : m.data()) v = flat[k++];
  }
}

double NetworkWeights::frobenius_norm() const { return norm2(flatten()); }

bool NetworkWeights::all_finite() const {
  return std::all_of(layers.begin(), layers.end(), [](const Matrix& m) { return m.all_finite(); });
}

namespace {

void require_same_shape(const NetworkWeights& a, const NetworkWeights& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": weight shapes differ");
}

}  // namespace

NetworkWeights operator-(const NetworkWeights& a, const NetworkWeights& b) {
  require_same_shape(a, b, "subtract");
  NetworkWeights c = a;
  for (std::size_t l = 0; l < c.layers.size(); ++l) c.layers[l] = a.layers[l] - b.layers[l];
  return c;
}

NetworkWeights operator+(const NetworkWeights& a, const NetworkWeights& b) {
  require_same_shape(a, b, "add");
  NetworkWeights c = a;
  for (std::size_t l = 0; l < c.layers.size(); ++l) c.layers[l] = a.layers[l] + b.layers[l];
  return c;
}

NetworkWeights operator*(double s, const NetworkWeights& a) {
  NetworkWeights c = a;
  for (auto& m : c.layers)
    for (double& v : m.data()) v *= s;
  return c;
}

void axpy(double s, const NetworkWeights& x, NetworkWeights& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t l = 0; l < y.layers.size(); ++l) {
    auto xd = x.layers[l].data();
    auto yd = y.layers[l].data();
    for (std::size_t i = 0; i < yd.size(); ++i) yd[i] += s * xd[i];
  }
}

double q_forward(const NetworkWeights& w, std::span<const double> x, ForwardTrace& trace) {
  if (x.size() != w.input_dim) {
    throw ShapeError("q_forward: input has length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(w.input_dim));
  }
  const std::size_t K = w.width;
  trace.activations.resize(w.depth + 1);
  trace.activations[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < w.depth; ++l) {
    const Matrix& W = w.layers[l];
    const auto& h = trace.activations[l];
    auto& next = trace.activations[l + 1];
    next.assign(K, 0.0);
    for (std::size_t i = 0; i < W.rows(); ++i) {
      const double hi = h[i];
      if (hi == 0.0) continue;
      const auto row = W.row(i);
      for (std::size_t k = 0; k < K; ++k) next[k] += row[k] * hi;
    }
    for (double& v : next) v = v > 0.0 ? v : 0.0;
  }
  const auto& out = trace.activations.back();
  trace.q = std::accumulate(out.begin(), out.end(), 0.0) / static_cast<double>(K);
  return trace.q;
}

std::pair<double, ForwardTrace> q_forward(const NetworkWeights& w, std::span<const double> x) {
  ForwardTrace trace;
  const double q = q_forward(w, x, trace);
  return {q, std::move(trace)};
}

double q_value(const NetworkWeights& w, std::span<const double> x) {
  thread_local ForwardTrace trace;
  return q_forward(w, x, trace);
}

void accumulate_q_grad(const NetworkWeights& w, const ForwardTrace& trace, double scale,
                       NetworkWeights& out) {
  if (trace.activations.size() != w.depth + 1 || trace.activations[0].size() != w.input_dim) {
    throw ShapeError("q_grad: trace does not match the weights");
  }
  require_same_shape(w, out, "q_grad");
  const std::size_t K = w.width;
  // delta holds dQ/dh^(l+1); at the head it is 1/K for every output neuron.
  thread_local std::vector<double> delta;
  thread_local std::vector<double> gate;
  delta.assign(K, 1.0 / static_cast<double>(K));
  for (std::size_t l = w.depth; l-- > 0;) {
    const auto& h_out = trace.activations[l + 1];
    const auto& h_in = trace.activations[l];
    if (h_out.size() != K) throw ShapeError("q_grad: trace width mismatch");
    gate.resize(K);
    bool any = false;
    for (std::size_t k = 0; k < K; ++k) {
      gate[k] = h_out[k] > 0.0 ? delta[k] : 0.0;
      any = any || gate[k] != 0.0;
    }
    if (!any) return;  // everything upstream is gated off
    Matrix& G = out.layers[l];
    for (std::size_t i = 0; i < h_in.size(); ++i) {
      const double hi = scale * h_in[i];
      if (hi == 0.0) continue;
      for (std::size_t k = 0; k < K; ++k) G(i, k) += hi * gate[k];
    }
    if (l > 0) {
      const Matrix& W = w.layers[l];
      delta.assign(K, 0.0);
      for (std::size_t i = 0; i < K; ++i) {
        const auto row = W.row(i);
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) acc += row[k] * gate[k];
        delta[i] = acc;
      }
    }
  }
}

NetworkWeights q_grad(const NetworkWeights& w, const ForwardTrace& trace) {
  NetworkWeights g = NetworkWeights::zeros(w.input_dim, w.width, w.depth);
  accumulate_q_grad(w, trace, 1.0, g);
  return g;
}

NetworkWeights permute_neurons(const NetworkWeights& w,
                               const std::vector<std::vector<std::size_t>>& perms) {
  if (perms.size() != w.depth) throw ShapeError("permute_neurons: one permutation per layer");
  NetworkWeights out = w;
  for (std::size_t l = 0; l < w.depth; ++l) {
    const auto& perm = perms[l];
    if (perm.size() != w.width) throw ShapeError("permute_neurons: permutation length");
    Matrix& dst = out.layers[l];
    const Matrix& src = w.layers[l];
    // Rows follow the previous layer's permutation (input rows stay put).
    for (std::size_t i = 0; i < src.rows(); ++i) {
      const std::size_t ri = l == 0 ? i : perms[l - 1][i];
      for (std::size_t j = 0; j < src.cols(); ++j) dst(ri, perm[j]) = src(i, j);
    }
  }
  return out;
}

double weight_distance(const NetworkWeights& a, const NetworkWeights& b, bool aligned) {
  require_same_shape(a, b, "weight_distance");
  const double plain = (a - b).frobenius_norm();
  if (!aligned) return plain;

  const std::size_t K = a.width;
  std::vector<std::vector<std::size_t>> perms;
  for (std::size_t l = 0; l < a.depth; ++l) {
    // b's layer with rows already following the previous layer's matching.
    const Matrix& src = b.layers[l];
    Matrix rowed(src.rows(), src.cols());
    for (std::size_t i = 0; i < src.rows(); ++i) {
      const std::size_t ri = l == 0 ? i : perms[l - 1][i];
      for (std::size_t j = 0; j < K; ++j) rowed(ri, j) = src(i, j);
    }
    const Matrix& ref = a.layers[l];
    std::vector<double> cost(K * K);
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < ref.rows(); ++r) {
          const double diff = ref(r, i) - rowed(r, j);
          acc += diff * diff;
        }
        cost[i * K + j] = acc;
      }
    }
    // Greedy: repeatedly take the globally cheapest unmatched pair.
    std::vector<std::size_t> perm(K);
    std::vector<bool> used_a(K, false);
    std::vector<bool> used_b(K, false);
    for (std::size_t step = 0; step < K; ++step) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t bi = 0;
      std::size_t bj = 0;
      for (std::size_t i = 0; i < K; ++i) {
        if (used_a[i]) continue;
        for (std::size_t j = 0; j < K; ++j) {
          if (!used_b[j] && cost[i * K + j] < best) {
            best = cost[i * K + j];
            bi = i;
            bj = j;
          }
        }
      }
      used_a[bi] = true;
      used_b[bj] = true;
      perm[bj] = bi;  // b's neuron bj moves to slot bi
    }
    perms.push_back(std::move(perm));
  }
  const double matched = (a - permute_neurons(b, perms)).frobenius_norm();
  return std::min(plain, matched);
}

double min_abs_preactivation(const NetworkWeights& w, std::span<const double> x) {
  if (x.size() != w.input_dim) throw ShapeError("min_abs_preactivation: input length differs from d");
  std::vector<double> h(x.begin(), x.end());
  double worst = std::numeric_limits<double>::infinity();
  for (const auto& m : w.layers) {
    std::vector<double> next(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      if (h[i] == 0.0) continue;
      for (std::size_t k = 0; k < m.cols(); ++k) next[k] += m(i, k) * h[i];
    }
    for (double& v : next) {
      worst = std::min(worst, std::abs(v));
      v = std::max(v, 0.0);
    }
    h = std::move(next);
  }
  return worst;
}

NetworkWeights random_unit_spectral(std::size_t input_dim, std::size_t width, std::size_t depth,
                                    Rng& rng) {
  NetworkWeights w = NetworkWeights::zeros(input_dim, width, depth);
  for (auto& m : w.layers) {
    for (double& v : m.data()) v = rng.normal();
    const double s = spectral_norm(m);
    for (double& v : m.data()) v /= s;
  }
  return w;
}

NetworkWeights random_direction(const NetworkWeights& like, Rng& rng) {
  NetworkWeights u = like;
  for (auto& m : u.layers)
    for (double& v : m.data()) v = rng.normal();
  const double n = u.frobenius_norm();
  return (1.0 / n) * u;
}

std::vector<double> h_bound_factors(const NetworkWeights& w, const NetworkWeights& wstar) {
  require_same_shape(w, wstar, "h_bound_factors");
  std::vector<double> bound(w.depth + 1, 0.0);
  double star_product = 1.0;  // prod_{j<l} ||W*_j||
  for (std::size_t l = 0; l < w.depth; ++l) {
    const double wn = spectral_norm(w.layers[l]);
    const double dn = spectral_norm(w.layers[l] - wstar.layers[l]);
    bound[l + 1] = wn * bound[l] + dn * star_product;
    star_product *= spectral_norm(wstar.layers[l]);
  }
  return bound;
}

nlohmann::json weights_to_json(const NetworkWeights& w) {
  nlohmann::json j;
  j["d"] = w.input_dim;
  j["K"] = w.width;
  j["L"] = w.depth;
  auto layers = nlohmann::json::array();
  for (const auto& m : w.layers) {
    layers.push_back(std::vector<double>(m.data().begin(), m.data().end()));
  }
  j["layers"] = std::move(layers);
  return j;
}

NetworkWeights weights_from_json(const nlohmann::json& j) {
  NetworkWeights w = NetworkWeights::zeros(j.at("d").get<std::size_t>(), j.at("K").get<std::size_t>(),
                                           j.at("L").get<std::size_t>());
  const auto& layers = j.at("layers");
  if (layers.size() != w.depth) throw ShapeError("weights json: layer count differs from L");
  for (std::size_t l = 0; l < w.depth; ++l) {
    auto entries = layers[l].get<std::vector<double>>();
    w.layers[l] = Matrix::from_row_major(w.layers[l].rows(), w.layers[l].cols(), std::move(entries));
  }
  w.validate();
  return w;
}

}  // namespace dqnlab
