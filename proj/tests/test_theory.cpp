#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "femloc/theory.hpp"
#include "oracles.hpp"

using namespace femloc;


static_assert(ProbeObjective<LinearLeastSquares>);
static_assert(ProbeObjective<CompositeObjective>);

TEST_CASE("LinearLeastSquares: gradient matches central differences; parameter round trip") {
  auto p = LinearLeastSquares::random(4, 2, 15, 8, 3);
  Vector w = p.parameters();
  const Vector g = p.support_gradient();
  std::vector<double> analytic(g.data(), g.data() + g.size()), numeric;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    numeric.push_back(oracle::central_difference(w.data() + i, [&] {
      p.set_parameters(w);
      return p.support_loss();
    }));
  p.set_parameters(w);
  CHECK(oracle::relative_error(analytic, numeric) < 1e-8);
  CHECK(p.parameters() == w);
  CHECK_THROWS_AS(p.set_parameters(Vector::Zero(3)), ConfigError);
  CHECK_THROWS_AS(LinearLeastSquares(Matrix::Zero(2, 3), Matrix::Zero(1, 3), Matrix::Zero(2, 2), Matrix::Zero(1, 2),
                                     Matrix::Zero(1, 2)),
                  ConfigError);
}

TEST_CASE("linearization residual matches the (I - mu H)^n oracle within 1e-8") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = LinearLeastSquares::random(8, 2, 40, 20, seed);
    const oracle::LsqOracle o(p);
    for (double mu : {1e-1, 1e-2, 1e-3, 1e-4})
      for (int n : {1, 2, 5, 10}) {
        const double r = linearization_residual(p, mu, n);
        CHECK(std::abs(r - o.residual(mu, n)) <= 1e-8);
        CHECK(p.weights() == o.w0);
      }
  }
}

TEST_CASE("linearization residual: n = 1 is exact; shrinks with mu") {
  auto p = LinearLeastSquares::random(8, 2, 40, 20, 7);
  CHECK(linearization_residual(p, 1e-2, 1) == 0);
  const auto r = lemma1_probe(p, {1e-1, 1e-2, 1e-3, 1e-4, 1e-5}, 5);
  for (std::size_t i = 1; i < r.size(); ++i) CHECK(r[i] < r[i - 1]);
  CHECK_THROWS_AS(linearization_residual(p, 1e-2, 0), ConfigError);

  ClientModel m(oracle::small_model(8), 3);
  CompositeObjective c(m, oracle::synthetic_task("r", 8, 30, 1));
  CHECK(linearization_residual(c, 1e-3, 1) == 0);
  const auto rc = lemma1_probe(c, {1e-2, 1e-3, 1e-4}, 5);
  CHECK(rc[1] < rc[0]);
  CHECK(rc[2] < rc[1]);
}

TEST_CASE("epsilon_accuracy_steps: huge eps gives 1 step, tiny eps never reached") {
  auto p = LinearLeastSquares::random(8, 2, 40, 20, 1);
  auto big = epsilon_accuracy_steps(p, 1e300, 50, 1e-2);
  CHECK(big.steps == 1);
  CHECK(big.squared_grad_norms.size() == 1);
  auto tiny = epsilon_accuracy_steps(p, 1e-300, 30, 1e-2);
  CHECK(!tiny.steps.has_value());
  CHECK(tiny.squared_grad_norms.size() == 30);
  for (double g : tiny.squared_grad_norms) CHECK(g >= 0);
  CHECK_THROWS_AS(epsilon_accuracy_steps(p, 0.0, 10, 1e-2), ConfigError);
}

TEST_CASE("epsilon_accuracy_steps: least squares matches the closed-form decay within one step") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto p = LinearLeastSquares::random(8, 2, 40, 20, seed);
    const oracle::LsqOracle o(p);
    const double mu = 0.05;
    const double start = o.query_grad_sq(o.w0), floor = o.query_grad_sq(o.w_star);
    const double eps = std::sqrt(start * floor) + floor;
    int expected = -1;
    for (int t = 1; t <= 2000 && expected < 0; ++t)
      if (o.query_grad_sq(o.after(mu, t)) < eps) expected = t;
    REQUIRE(expected > 0);
    const auto tr = epsilon_accuracy_steps(p, eps, 2000, mu);
    REQUIRE(tr.steps);
    CHECK(std::abs(*tr.steps - expected) <= 1);
    CHECK(tr.initial_squared_grad_norm == doctest::Approx(start).epsilon(1e-10));
  }
}

TEST_CASE("estimate_constants: zeta bounds observed norms, delta1 within the Hessian spectrum") {
  auto p = LinearLeastSquares::random(8, 2, 40, 20, 2);
  const oracle::LsqOracle o(p);
  const auto c = estimate_constants(p, 0.05, 20);
  CHECK(p.weights() == o.w0);
  const auto tr = epsilon_accuracy_steps(p, 1e-300, 20, 0.05);
  CHECK(c.zeta >= std::sqrt(tr.initial_squared_grad_norm));
  for (double g : tr.squared_grad_norms) CHECK(c.zeta >= std::sqrt(g));
  Eigen::SelfAdjointEigenSolver<Matrix> eig(o.h);
  CHECK(c.delta1 <= eig.eigenvalues().maxCoeff() * (1 + 1e-9));
  CHECK(c.delta1 >= eig.eigenvalues().minCoeff() * (1 - 1e-9));
}

TEST_CASE("CompositeObjective: flat layout and gradient agreement") {
  ClientModel m(oracle::small_model(8), 5);
  auto task = oracle::synthetic_task("r", 8, 30, 2);
  CompositeObjective c(m, task);
  nn::Index total = 0;
  for (Part p : kAllParts) total += nn::parameter_count(m.part(p));
  const Vector v = c.parameters();
  CHECK(v.size() == total);
  CHECK(v.head(nn::parameter_count(m.part(Part::Encoder))) == nn::flatten(m.part(Part::Encoder)));
  CHECK(c.support_gradient().size() == total);
  CHECK(c.query_meta_gradient().size() == nn::parameter_count(m.part(Part::Meta)));
  CHECK(c.support_loss() == m.composite_loss(task.support_inputs(), task.support_targets()).total);
  c.set_parameters(v);
  CHECK(c.parameters() == v);
  CHECK_THROWS_AS(c.set_parameters(Vector::Zero(total + 1)), ConfigError);
}

TEST_CASE("step_bound_squared arithmetic") {
  // ((1 - 2 * 0.2) / 4 + 1) / (2 * 0.5)^2
  CHECK(step_bound_squared(1.0, 2.0, 0.5, 2.0, 0.1) == doctest::Approx(1.15));
  CHECK(std::isnan(step_bound_squared(1.0, 0.0, 0.5, 2.0, 0.1)));
  CHECK(std::isnan(step_bound_squared(1.0, 1.0, 0.5, 0.0, 0.1)));
}

TEST_CASE("report JSON layout") {
  TheoryProbeReport r;
  r.task_id = "x";
  r.random_init.steps = 7;
  r.lemma1_rates = {1e-2};
  r.lemma1_residuals = {0.5};
  const nlohmann::json j = r;
  CHECK(j.at("RI").at("steps") == 7);
  CHECK(j.at("MI").at("reached") == false);
  CHECK(j.at("lemma1").at("residuals")[0] == 0.5);
  CHECK(j.contains("constants"));
}
