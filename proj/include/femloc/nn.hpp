#pragma once

// Dense feed-forward networks with hand-written backpropagation, the MSE loss,
// and the SGD / ADAM update rules. Everything is templated on the scalar type;
// batches are stored column-wise (one sample per column).

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "femloc/errors.hpp"

namespace femloc::nn {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

enum class Activation { ReLU, Identity };

inline const char* to_string(Activation a) { return a == Activation::ReLU ? "relu" : "identity"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + s + "'");
}

template <typename Scalar>
struct DenseLayer {
  Matrix<Scalar> weights;  // [out x in]
  Vector<Scalar> biases;   // [out]
  Activation activation = Activation::Identity;

  DenseLayer() = default;
  DenseLayer(Index in, Index out, Activation act)
      : weights(Matrix<Scalar>::Zero(out, in)), biases(Vector<Scalar>::Zero(out)), activation(act) {}

  Index in_size() const { return weights.cols(); }
  Index out_size() const { return weights.rows(); }

  bool operator==(const DenseLayer&) const = default;
};

template <typename Scalar>
using Network = std::vector<DenseLayer<Scalar>>;

/// Inputs and pre-activations of every layer, recorded by forward().
template <typename Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> inputs;
  std::vector<Matrix<Scalar>> pre_activations;
};

template <typename Scalar>
struct LayerGradient {
  Matrix<Scalar> weights;
  Vector<Scalar> biases;
};

/// Gradients of a scalar loss with respect to every parameter of one network,
/// plus the gradient with respect to the network input (for chaining parts).
template <typename Scalar>
struct GradientBundle {
  std::vector<LayerGradient<Scalar>> layers;
  Matrix<Scalar> input_gradient;
  Index sample_count = 0;
};

template <typename Scalar>
struct LossResult {
  Scalar loss = 0;
  Matrix<Scalar> gradient;
};

template <typename Scalar>
struct AdamState {
  std::vector<LayerGradient<Scalar>> first_moment;
  std::vector<LayerGradient<Scalar>> second_moment;
  std::int64_t step_count = 0;
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
};

// ---------------------------------------------------------------------------
// Construction

inline Index input_size(const auto& net) { return net.empty() ? 0 : net.front().in_size(); }
inline Index output_size(const auto& net) { return net.empty() ? 0 : net.back().out_size(); }

/// Builds sizes[0] -> sizes[1] -> ... -> sizes.back(), hidden layers use
/// `hidden`, the last layer uses `output`. Weights are uniform in
/// [-sqrt(6/fan_in), sqrt(6/fan_in)], biases zero. Each layer draws from its
/// own generator seeded with (seed, layer index).
template <typename Scalar = double>
Network<Scalar> make_network(std::span<const Index> sizes, Activation hidden, Activation output,
                             std::uint64_t seed) {
  if (sizes.size() < 2) throw ConfigError("a network needs at least an input and an output size");
  for (Index s : sizes)
    if (s < 1) throw ConfigError("layer sizes must be >= 1");

  Network<Scalar> net;
  net.reserve(sizes.size() - 1);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const bool last = l + 2 == sizes.size();
    DenseLayer<Scalar> layer(sizes[l], sizes[l + 1], last ? output : hidden);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(l)};
    std::mt19937_64 rng(seq);
    const double limit = std::sqrt(6.0 / static_cast<double>(sizes[l]));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Index c = 0; c < layer.weights.cols(); ++c)
      for (Index r = 0; r < layer.weights.rows(); ++r) layer.weights(r, c) = static_cast<Scalar>(dist(rng));
    net.push_back(std::move(layer));
  }
  return net;
}

template <typename Scalar = double>
Network<Scalar> make_network(std::initializer_list<Index> sizes, Activation hidden, Activation output,
                             std::uint64_t seed) {
  std::vector<Index> v(sizes);
  return make_network<Scalar>(std::span<const Index>(v), hidden, output, seed);
}

template <typename Scalar>
void zero_parameters(Network<Scalar>& net) {
  for (auto& layer : net) {
    layer.weights.setZero();
    layer.biases.setZero();
  }
}

template <typename Scalar>
std::vector<LayerGradient<Scalar>> zeros_like(const Network<Scalar>& net) {
  std::vector<LayerGradient<Scalar>> out;
  out.reserve(net.size());
  for (const auto& layer : net)
    out.push_back({Matrix<Scalar>::Zero(layer.out_size(), layer.in_size()),
                   Vector<Scalar>::Zero(layer.out_size())});
  return out;
}

template <typename Scalar>
GradientBundle<Scalar> zero_gradient(const Network<Scalar>& net) {
  return {zeros_like(net), Matrix<Scalar>(), 0};
}

template <typename Scalar>
AdamState<Scalar> make_adam_state(const Network<Scalar>& net) {
  AdamState<Scalar> s;
  s.first_moment = zeros_like(net);
  s.second_moment = zeros_like(net);
  return s;
}

template <typename Scalar>
Index parameter_count(const Network<Scalar>& net) {
  Index n = 0;
  for (const auto& layer : net) n += layer.weights.size() + layer.biases.size();
  return n;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename Scalar>
Matrix<Scalar> activate(const Matrix<Scalar>& z, Activation a) {
  if (a == Activation::ReLU) return z.cwiseMax(Scalar(0));
  return z;
}

/// Batched forward pass over the columns of `x`.
template <typename Scalar>
std::pair<Matrix<Scalar>, ForwardCache<Scalar>> forward(const Network<Scalar>& net, const Matrix<Scalar>& x) {
  if (net.empty()) throw ConfigError("forward: empty network");
  if (x.rows() != net.front().in_size())
    throw ConfigError("forward: input has " + std::to_string(x.rows()) + " features, network expects " +
                      std::to_string(net.front().in_size()));
  ForwardCache<Scalar> cache;
  cache.inputs.reserve(net.size());
  cache.pre_activations.reserve(net.size());
  Matrix<Scalar> h = x;
  for (std::size_t l = 0; l < net.size(); ++l) {
    const auto& layer = net[l];
    if (h.rows() != layer.in_size())
      throw ConfigError("forward: layer " + std::to_string(l) + " expects " + std::to_string(layer.in_size()) +
                        " inputs, got " + std::to_string(h.rows()));
    Matrix<Scalar> z = layer.weights * h;
    z.colwise() += layer.biases;
    cache.inputs.push_back(std::move(h));
    h = activate(z, layer.activation);
    cache.pre_activations.push_back(std::move(z));
  }
  return {std::move(h), std::move(cache)};
}

template <typename Scalar>
std::pair<Vector<Scalar>, ForwardCache<Scalar>> forward(const Network<Scalar>& net, const Vector<Scalar>& x) {
  auto [y, cache] = forward(net, Matrix<Scalar>(x));
  return {Vector<Scalar>(y.col(0)), std::move(cache)};
}

/// Forward pass without keeping the cache.
template <typename Scalar>
Matrix<Scalar> predict(const Network<Scalar>& net, const Matrix<Scalar>& x) {
  return forward(net, x).first;
}

/// Backpropagates `upstream` (dL/dy, same shape as the forward output).
template <typename Scalar>
GradientBundle<Scalar> backward(const Network<Scalar>& net, const ForwardCache<Scalar>& cache,
                                const Matrix<Scalar>& upstream) {
  if (cache.inputs.size() != net.size() || cache.pre_activations.size() != net.size())
    throw InternalError("backward: cache was recorded for a network with a different layer count");
  if (net.empty()) throw InternalError("backward: empty network");
  const Index batch = cache.inputs.front().cols();
  if (upstream.rows() != net.back().out_size() || upstream.cols() != batch)
    throw InternalError("backward: upstream gradient shape does not match the cached forward pass");

  GradientBundle<Scalar> grads;
  grads.layers.resize(net.size());
  grads.sample_count = batch;
  Matrix<Scalar> delta = upstream;
  for (std::size_t i = net.size(); i-- > 0;) {
    const auto& layer = net[i];
    const auto& z = cache.pre_activations[i];
    const auto& in = cache.inputs[i];
    if (z.rows() != layer.out_size() || in.rows() != layer.in_size())
      throw InternalError("backward: stale cache for layer " + std::to_string(i));
    if (layer.activation == Activation::ReLU) delta = delta.cwiseProduct((z.array() > Scalar(0)).template cast<Scalar>().matrix());
    grads.layers[i].weights = delta * in.transpose();
    grads.layers[i].biases = delta.rowwise().sum();
    delta = layer.weights.transpose() * delta;
  }
  grads.input_gradient = std::move(delta);
  return grads;
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over all entries of (pred - target)^2; gradient 2 (pred - target) / count.
template <typename Scalar>
LossResult<Scalar> mse_loss(const Matrix<Scalar>& pred, const Matrix<Scalar>& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw ConfigError("mse_loss: prediction is " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
                      ", target is " + std::to_string(target.rows()) + "x" + std::to_string(target.cols()));
  if (pred.size() == 0) throw ConfigError("mse_loss: empty input");
  const Matrix<Scalar> diff = pred - target;
  const auto count = static_cast<Scalar>(diff.size());
  return {diff.squaredNorm() / count, (Scalar(2) / count) * diff};
}

template <typename Scalar>
LossResult<Scalar> mse_loss(const Vector<Scalar>& pred, const Vector<Scalar>& target) {
  return mse_loss(Matrix<Scalar>(pred), Matrix<Scalar>(target));
}

// ---------------------------------------------------------------------------
// Gradient arithmetic

template <typename Scalar>
void check_same_shape(const Network<Scalar>& net, const std::vector<LayerGradient<Scalar>>& g, const char* who) {
  if (g.size() != net.size()) throw ConfigError(std::string(who) + ": layer count mismatch");
  for (std::size_t l = 0; l < net.size(); ++l) {
    if (g[l].weights.rows() != net[l].weights.rows() || g[l].weights.cols() != net[l].weights.cols() ||
        g[l].biases.size() != net[l].biases.size())
      throw ConfigError(std::string(who) + ": shape mismatch at layer " + std::to_string(l));
  }
}

template <typename Scalar>
bool same_shape(const std::vector<LayerGradient<Scalar>>& a, const std::vector<LayerGradient<Scalar>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t l = 0; l < a.size(); ++l)
    if (a[l].weights.rows() != b[l].weights.rows() || a[l].weights.cols() != b[l].weights.cols() ||
        a[l].biases.size() != b[l].biases.size())
      return false;
  return true;
}

/// acc += scale * g
template <typename Scalar>
void accumulate(std::vector<LayerGradient<Scalar>>& acc, Scalar scale, const std::vector<LayerGradient<Scalar>>& g) {
  if (!same_shape(acc, g)) throw ConfigError("accumulate: gradient shape mismatch");
  for (std::size_t l = 0; l < acc.size(); ++l) {
    acc[l].weights += scale * g[l].weights;
    acc[l].biases += scale * g[l].biases;
  }
}

template <typename Scalar>
Scalar squared_norm(const std::vector<LayerGradient<Scalar>>& g) {
  Scalar s = 0;
  for (const auto& l : g) s += l.weights.squaredNorm() + l.biases.squaredNorm();
  return s;
}

template <typename Scalar>
Scalar squared_norm(const Network<Scalar>& net) {
  Scalar s = 0;
  for (const auto& l : net) s += l.weights.squaredNorm() + l.biases.squaredNorm();
  return s;
}

/// Concatenates all parameters: per layer, weights column-major then biases.
template <typename Scalar>
Vector<Scalar> flatten(const Network<Scalar>& net) {
  Vector<Scalar> out(parameter_count(net));
  Index k = 0;
  for (const auto& l : net) {
    out.segment(k, l.weights.size()) = l.weights.reshaped();
    k += l.weights.size();
    out.segment(k, l.biases.size()) = l.biases;
    k += l.biases.size();
  }
  return out;
}

template <typename Scalar>
Vector<Scalar> flatten(const std::vector<LayerGradient<Scalar>>& g) {
  Index n = 0;
  for (const auto& l : g) n += l.weights.size() + l.biases.size();
  Vector<Scalar> out(n);
  Index k = 0;
  for (const auto& l : g) {
    out.segment(k, l.weights.size()) = l.weights.reshaped();
    k += l.weights.size();
    out.segment(k, l.biases.size()) = l.biases;
    k += l.biases.size();
  }
  return out;
}

/// Inverse of flatten(); `flat` must hold exactly parameter_count(net) values.
template <typename Scalar>
void assign_flat(Network<Scalar>& net, const Eigen::Ref<const Vector<Scalar>>& flat) {
  if (flat.size() != parameter_count(net)) throw ConfigError("assign_flat: size mismatch");
  Index k = 0;
  for (auto& l : net) {
    l.weights.reshaped() = flat.segment(k, l.weights.size());
    k += l.weights.size();
    l.biases = flat.segment(k, l.biases.size());
    k += l.biases.size();
  }
}

// ---------------------------------------------------------------------------
// Optimizers

/// params <- params - rate * grads
template <typename Scalar>
void sgd_step(Network<Scalar>& net, const std::vector<LayerGradient<Scalar>>& grads, Scalar rate) {
  if (!(rate > Scalar(0))) throw ConfigError("sgd_step: learning rate must be > 0");
  check_same_shape(net, grads, "sgd_step");
  for (std::size_t l = 0; l < net.size(); ++l) {
    net[l].weights -= rate * grads[l].weights;
    net[l].biases -= rate * grads[l].biases;
  }
}

template <typename Scalar>
void sgd_step(Network<Scalar>& net, const GradientBundle<Scalar>& grads, Scalar rate) {
  sgd_step(net, grads.layers, rate);
}

/// Bias-corrected ADAM update.
template <typename Scalar>
void adam_step(Network<Scalar>& net, const std::vector<LayerGradient<Scalar>>& grads, AdamState<Scalar>& state,
               Scalar rate) {
  if (!(rate > Scalar(0))) throw ConfigError("adam_step: learning rate must be > 0");
  check_same_shape(net, grads, "adam_step");
  if (!same_shape(state.first_moment, grads) || !same_shape(state.second_moment, grads))
    throw ConfigError("adam_step: optimizer state does not match parameter shapes");

  ++state.step_count;
  const auto t = static_cast<Scalar>(state.step_count);
  const Scalar b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
  const Scalar c1 = Scalar(1) - std::pow(b1, t);
  const Scalar c2 = Scalar(1) - std::pow(b2, t);

  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    param.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t l = 0; l < net.size(); ++l) {
    update(net[l].weights, state.first_moment[l].weights, state.second_moment[l].weights, grads[l].weights);
    update(net[l].biases, state.first_moment[l].biases, state.second_moment[l].biases, grads[l].biases);
  }
}

template <typename Scalar>
void adam_step(Network<Scalar>& net, const GradientBundle<Scalar>& grads, AdamState<Scalar>& state, Scalar rate) {
  adam_step(net, grads.layers, state, rate);
}

}  // namespace femloc::nn
