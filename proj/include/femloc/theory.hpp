#pragma once

// Empirical probes of the convergence analysis: epsilon-accuracy step counts,
// the linearized inner-loop update, and estimates of the smoothness and
// gradient-bound constants. All probes run full-batch plain SGD.

#include <concepts>
#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "femloc/data.hpp"
#include "femloc/model.hpp"

namespace femloc {

/// A differentiable objective over a flat parameter vector with a support
/// loss (driving the updates) and a query loss (measuring accuracy). The
/// meta segment marks the parameters belonging to the shared meta-model.
template <typename T>
concept ProbeObjective = requires(T& t, const T& ct, const Vector& v) {
  { ct.parameters() } -> std::convertible_to<Vector>;
  { t.set_parameters(v) };
  { ct.support_loss() } -> std::convertible_to<double>;
  { ct.support_gradient() } -> std::convertible_to<Vector>;
  { ct.query_meta_gradient() } -> std::convertible_to<Vector>;
};

/// Affine least squares y = W [x; 1], loss = mean over entries of squared error.
class LinearLeastSquares {
 public:
  /// Inputs and targets are column-per-sample.
  LinearLeastSquares(Matrix support_x, Matrix support_y, Matrix query_x, Matrix query_y, Matrix initial_weights);

  /// Random well-conditioned problem with m inputs, p outputs.
  static LinearLeastSquares random(nn::Index m, nn::Index p, nn::Index support, nn::Index query, std::uint64_t seed);

  Vector parameters() const { return weights_.reshaped(); }
  void set_parameters(const Vector& v);
  double support_loss() const;
  Vector support_gradient() const;
  double query_loss() const;
  Vector query_meta_gradient() const;

  const Matrix& support_design() const { return support_a_; }  // [x; 1]
  const Matrix& support_targets() const { return support_y_; }
  const Matrix& query_design() const { return query_a_; }
  const Matrix& query_targets() const { return query_y_; }
  const Matrix& weights() const { return weights_; }

 private:
  Matrix support_a_, support_y_, query_a_, query_y_;
  Matrix weights_;  // [p x (m+1)]
};

/// The full client model on a task. Parameters are flattened part by part in
/// encoder, decoder, meta, mapper order.
class CompositeObjective {
 public:
  CompositeObjective(ClientModel model, const LocalizationTask& task);

  Vector parameters() const;
  void set_parameters(const Vector& v);
  double support_loss() const;
  Vector support_gradient() const;
  Vector query_meta_gradient() const;

  const ClientModel& model() const { return model_; }

 private:
  ClientModel model_;
  Matrix xs_, ys_, xq_, yq_;
};

struct EpsilonTrace {
  std::optional<int> steps;              // first step with ||grad_theta L(D^q)||^2 < eps
  std::vector<double> squared_grad_norms;  // after each step
  std::vector<double> support_losses;      // after each step
  double initial_squared_grad_norm = 0;
  Vector final_parameters;
};

/// SGD on the support loss; after step n (1-based) evaluates the squared norm
/// of the query meta-gradient and stops as soon as it drops below eps.
template <ProbeObjective Obj>
EpsilonTrace epsilon_accuracy_steps(Obj& obj, double eps, int max_steps, double rate) {
  if (!(eps > 0)) throw ConfigError("epsilon_accuracy_steps: eps must be > 0");
  if (!(rate > 0)) throw ConfigError("epsilon_accuracy_steps: rate must be > 0");
  EpsilonTrace out;
  out.initial_squared_grad_norm = obj.query_meta_gradient().squaredNorm();
  Vector params = obj.parameters();
  for (int n = 1; n <= max_steps; ++n) {
    params -= rate * obj.support_gradient();
    obj.set_parameters(params);
    const double g2 = obj.query_meta_gradient().squaredNorm();
    out.squared_grad_norms.push_back(g2);
    out.support_losses.push_back(obj.support_loss());
    if (g2 < eps) {
      out.steps = n;
      break;
    }
  }
  out.final_parameters = params;
  return out;
}

/// || Omega^n - (Omega^0 - rate n grad L(Omega^0)) || / || Omega^0 ||, with
/// Omega^n from n plain SGD steps. Leaves `obj` at its starting parameters.
template <ProbeObjective Obj>
double linearization_residual(Obj& obj, double rate, int n) {
  if (n < 1) throw ConfigError("lemma1_probe: n must be >= 1");
  const Vector start = obj.parameters();
  const Vector g0 = obj.support_gradient();
  Vector params = start;
  for (int i = 0; i < n; ++i) {
    if (i > 0) obj.set_parameters(params);
    params -= rate * (i == 0 ? g0 : obj.support_gradient());
  }
  obj.set_parameters(start);
  const Vector linear = start - (rate * static_cast<double>(n)) * g0;
  const double scale = start.norm();
  if (!(scale > 0)) throw ConfigError("lemma1_probe: initial parameters are all zero");
  return (params - linear).norm() / scale;
}

template <ProbeObjective Obj>
std::vector<double> lemma1_probe(Obj& obj, const std::vector<double>& rates, int n) {
  std::vector<double> out;
  out.reserve(rates.size());
  for (double r : rates) out.push_back(linearization_residual(obj, r, n));
  return out;
}

struct ConstantEstimates {
  double zeta = 0;    // max observed ||grad_theta L(D^q)||
  double delta1 = 0;  // max ||g(a) - g(b)|| / ||a - b|| over consecutive iterates
};

/// Runs `steps` SGD steps from the current parameters and records the
/// estimates; restores the starting parameters afterwards.
template <ProbeObjective Obj>
ConstantEstimates estimate_constants(Obj& obj, double rate, int steps) {
  ConstantEstimates c;
  const Vector start = obj.parameters();
  Vector params = start;
  Vector grad = obj.support_gradient();
  c.zeta = obj.query_meta_gradient().norm();
  for (int i = 0; i < steps; ++i) {
    const Vector next = params - rate * grad;
    obj.set_parameters(next);
    const Vector next_grad = obj.support_gradient();
    const double dp = (next - params).norm();
    if (dp > 0) c.delta1 = std::max(c.delta1, (next_grad - grad).norm() / dp);
    c.zeta = std::max(c.zeta, obj.query_meta_gradient().norm());
    params = next;
    grad = next_grad;
  }
  obj.set_parameters(start);
  return c;
}

/// Right-hand side of the step-count bound
///   N^2 < 1/(delta1 mu)^2 ((eps - 2 G) / ||g_i||^2 + 1),  G = ||g_i|| ||g_eps||.
double step_bound_squared(double eps, double delta1, double rate, double initial_grad_norm, double final_grad_norm);

struct ModeProbe {
  std::optional<int> steps;
  double initial_squared_grad_norm = 0;
  double final_squared_grad_norm = 0;
  double bound_squared = 0;
  std::vector<double> squared_grad_norms;
};

struct TheoryProbeReport {
  double epsilon = 0;
  double rate = 0;
  std::string task_id;
  ModeProbe random_init;  // N^0
  ModeProbe meta_init;    // N^m
  std::vector<double> lemma1_rates;
  std::vector<double> lemma1_residuals;
  int lemma1_steps = 0;
  ConstantEstimates constants;
};

void to_json(nlohmann::json& j, const ModeProbe& m);
void to_json(nlohmann::json& j, const TheoryProbeReport& r);

}  // namespace femloc
