#include <cmath>
#include <random>

#include "doctest.h"
#include "femloc/nn.hpp"
#include "oracles.hpp"

using namespace femloc;
using nn::Activation;

namespace {

nn::Network<double> single(const Matrix& w, Activation act) {
  nn::DenseLayer<double> l(w.cols(), w.rows(), act);
  l.weights = w;
  return {l};
}

}  // namespace

TEST_CASE("forward: identity layer passes input through") {
  auto net = single(Matrix::Identity(2, 2), Activation::Identity);
  Vector x(2);
  x << 1, 2;
  auto [y, cache] = nn::forward(net, x);
  CHECK(y == x);
}

TEST_CASE("forward: relu splits sign") {
  Matrix w(2, 1);
  w << 1, -1;
  auto net = single(w, Activation::ReLU);
  Vector x(1);
  x << 3;
  auto [y, cache] = nn::forward(net, x);
  CHECK(y(0) == 3);
  CHECK(y(1) == 0);
}

TEST_CASE("forward: seeded 2-layer net matches naive matmul oracle") {
  auto net = nn::make_network({5, 7, 3}, Activation::ReLU, Activation::Identity, 7);
  for (auto& l : net) l.biases.setLinSpaced(-0.3, 0.4);
  std::mt19937_64 rng(1);
  const Matrix x = oracle::random_matrix(5, 4, rng);
  const Matrix y = nn::predict(net, x);
  const Matrix ref = oracle::forward(net, x);
  CHECK((y - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: deterministic and shape-checked") {
  auto a = nn::make_network({4, 6, 2}, Activation::ReLU, Activation::Identity, 11);
  auto b = nn::make_network({4, 6, 2}, Activation::ReLU, Activation::Identity, 11);
  CHECK(a == b);
  std::mt19937_64 rng(2);
  const Matrix x = oracle::random_matrix(4, 3, rng);
  CHECK(nn::predict(a, x) == nn::predict(b, x));
  CHECK_THROWS_AS(nn::predict(a, Matrix(Matrix::Zero(5, 3))), ConfigError);
}

TEST_CASE("make_network: He-uniform limits, zero biases, distinct layer streams") {
  auto net = nn::make_network({50, 40, 30}, Activation::ReLU, Activation::Identity, 3);
  CHECK(net[0].activation == Activation::ReLU);
  CHECK(net[1].activation == Activation::Identity);
  CHECK(net[0].weights.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 50));
  CHECK(net[1].weights.cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 40));
  CHECK(net[0].biases.isZero());
  auto other = nn::make_network({50, 40, 30}, Activation::ReLU, Activation::Identity, 4);
  CHECK(other[0].weights != net[0].weights);
}

TEST_CASE("backward: scalar chain by hand") {
  Matrix w(1, 1);
  w << 2;
  auto net = single(w, Activation::Identity);
  Vector x(1);
  x << 1;
  auto [y, cache] = nn::forward(net, x);
  // loss = 0.5 y^2, dL/dy = y = 2
  Matrix up(1, 1);
  up << y(0);
  auto g = nn::backward(net, cache, up);
  CHECK(g.layers[0].weights(0, 0) == doctest::Approx(2));
  CHECK(g.layers[0].biases(0) == doctest::Approx(2));
  CHECK(g.input_gradient(0, 0) == doctest::Approx(4));
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  auto net = nn::make_network({3, 5, 2}, Activation::ReLU, Activation::Identity, 5);
  std::mt19937_64 rng(3);
  auto [y, cache] = nn::forward(net, Matrix(oracle::random_matrix(3, 4, rng)));
  auto g = nn::backward(net, cache, Matrix(Matrix::Zero(2, 4)));
  CHECK(nn::squared_norm(g.layers) == 0);
  CHECK(g.input_gradient.isZero());
}

TEST_CASE("backward: mismatched cache is an internal error") {
  auto net = nn::make_network({3, 5, 2}, Activation::ReLU, Activation::Identity, 5);
  auto other = nn::make_network({3, 4, 2}, Activation::ReLU, Activation::Identity, 5);
  auto [y, cache] = nn::forward(other, Matrix(Matrix::Ones(3, 2)));
  CHECK_THROWS_AS(nn::backward(net, cache, Matrix(Matrix::Ones(2, 2))), InternalError);
}

TEST_CASE("backward: 3-layer net agrees with central differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto net = nn::make_network({4, 6, 5, 3}, Activation::ReLU, Activation::Identity, seed);
    for (auto& l : net) l.biases.setConstant(0.05);
    std::mt19937_64 rng(seed + 100);
    const Matrix x = oracle::random_matrix(4, 5, rng);
    const Matrix t = oracle::random_matrix(3, 5, rng);
    auto [y, cache] = nn::forward(net, x);
    auto loss = nn::mse_loss(y, t);
    auto g = nn::backward(net, cache, loss.gradient);

    std::vector<double> analytic, numeric;
    auto f = [&] { return oracle::mse(oracle::forward(net, x), t); };
    for (std::size_t l = 0; l < net.size(); ++l) {
      for (Eigen::Index i = 0; i < net[l].weights.size(); ++i) {
        analytic.push_back(g.layers[l].weights.data()[i]);
        numeric.push_back(oracle::central_difference(net[l].weights.data() + i, f));
      }
      for (Eigen::Index i = 0; i < net[l].biases.size(); ++i) {
        analytic.push_back(g.layers[l].biases(i));
        numeric.push_back(oracle::central_difference(net[l].biases.data() + i, f));
      }
    }
    CHECK(oracle::relative_error(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("mse_loss examples") {
  Vector p(2), t(2);
  p << 1, 0;
  t << 0, 0;
  auto r = nn::mse_loss(p, t);
  CHECK(r.loss == doctest::Approx(0.5));
  CHECK(r.gradient(0) == doctest::Approx(1));
  CHECK(r.gradient(1) == 0);

  auto same = nn::mse_loss(p, p);
  CHECK(same.loss == 0);
  CHECK(same.gradient.isZero());

  Vector bad(3);
  CHECK_THROWS(nn::mse_loss(p, bad));
}

TEST_CASE("mse_loss: batch mean equals mean of per-sample losses, order-free") {
  std::mt19937_64 rng(9);
  const Matrix p = oracle::random_matrix(2, 6, rng), t = oracle::random_matrix(2, 6, rng);
  double per = 0;
  for (int j = 0; j < 6; ++j) per += nn::mse_loss(Vector(p.col(j)), Vector(t.col(j))).loss;
  CHECK(nn::mse_loss(p, t).loss == doctest::Approx(per / 6).epsilon(1e-14));
  std::vector<int> perm = {3, 1, 5, 0, 2, 4};
  CHECK(nn::mse_loss(Matrix(p(Eigen::all, perm)), Matrix(t(Eigen::all, perm))).loss ==
        doctest::Approx(nn::mse_loss(p, t).loss).epsilon(1e-14));
}

TEST_CASE("sgd_step examples") {
  Matrix w(1, 1);
  w << 1;
  auto net = single(w, Activation::Identity);
  auto g = nn::zeros_like(net);
  g[0].weights(0, 0) = 0.5;
  nn::sgd_step(net, g, 0.1);
  CHECK(net[0].weights(0, 0) == doctest::Approx(0.95));

  auto before = net;
  nn::sgd_step(net, nn::zeros_like(net), 0.1);
  CHECK(net == before);

  CHECK_THROWS_AS(nn::sgd_step(net, g, 0.0), ConfigError);
}

TEST_CASE("sgd_step: two steps with g equal one step with 2g; linear in the gradient") {
  auto a = nn::make_network({3, 4, 2}, Activation::ReLU, Activation::Identity, 1);
  auto b = a, c = a;
  auto g = nn::zeros_like(a);
  for (auto& l : g) {
    l.weights.setConstant(0.25);
    l.biases.setConstant(-0.5);
  }
  auto g2 = g;
  for (auto& l : g2) {
    l.weights *= 2;
    l.biases *= 2;
  }
  nn::sgd_step(a, g, 0.125);
  nn::sgd_step(a, g, 0.125);
  nn::sgd_step(b, g2, 0.125);
  CHECK(a == b);
  nn::sgd_step(c, g, 0.25);
  CHECK(b == c);
}

TEST_CASE("sgd_step: shape mismatch rejected") {
  auto net = nn::make_network({3, 4, 2}, Activation::ReLU, Activation::Identity, 1);
  auto other = nn::make_network({3, 5, 2}, Activation::ReLU, Activation::Identity, 1);
  CHECK_THROWS_AS(nn::sgd_step(net, nn::zeros_like(other), 0.1), ConfigError);
}

TEST_CASE("adam_step: first step with g=1") {
  Matrix w(1, 1);
  w << 0;
  auto net = single(w, Activation::Identity);
  auto state = nn::make_adam_state(net);
  CHECK(state.step_count == 0);
  auto g = nn::zeros_like(net);
  g[0].weights(0, 0) = 1;
  nn::adam_step(net, g, state, 0.001);
  CHECK(net[0].weights(0, 0) == doctest::Approx(-0.001 / (1 + 1e-8)).epsilon(1e-12));
  CHECK(net[0].biases(0) == 0);  // zero gradient, zero moments
  CHECK(state.step_count == 1);
}

TEST_CASE("adam_step: ten steps on w^2 strictly decrease, matching a scalar reference") {
  Matrix w(1, 1);
  w << 1;
  auto net = single(w, Activation::Identity);
  auto state = nn::make_adam_state(net);
  double ref = 1, m = 0, v = 0;
  double prev = 1;
  for (int t = 1; t <= 10; ++t) {
    auto g = nn::zeros_like(net);
    g[0].weights(0, 0) = 2 * net[0].weights(0, 0);
    nn::adam_step(net, g, state, 0.01);
    const double gr = 2 * ref;
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    ref -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    const double f = net[0].weights(0, 0) * net[0].weights(0, 0);
    CHECK(f < prev);
    prev = f;
    CHECK(net[0].weights(0, 0) == doctest::Approx(ref).epsilon(1e-14));
  }
  CHECK(state.step_count == 10);
}

TEST_CASE("flatten / assign_flat round trip") {
  auto net = nn::make_network({3, 4, 2}, Activation::ReLU, Activation::Identity, 1);
  const Vector v = nn::flatten(net);
  CHECK(v.size() == nn::parameter_count(net));
  auto other = nn::make_network({3, 4, 2}, Activation::ReLU, Activation::Identity, 2);
  nn::assign_flat<double>(other, v);
  CHECK(other == net);
}
