#include "femloc/theory.hpp"

#include <limits>
#include <random>

namespace femloc {

namespace {

Matrix with_bias_row(const Matrix& x) {
  Matrix a(x.rows() + 1, x.cols());
  a.topRows(x.rows()) = x;
  a.row(x.rows()).setOnes();
  return a;
}

// d/dW of mean((W a - y)^2) over all entries.
Matrix lsq_gradient(const Matrix& w, const Matrix& a, const Matrix& y) {
  return (2.0 / static_cast<double>(y.size())) * (w * a - y) * a.transpose();
}

}  // namespace

LinearLeastSquares::LinearLeastSquares(Matrix support_x, Matrix support_y, Matrix query_x, Matrix query_y,
                                       Matrix initial_weights)
    : support_a_(with_bias_row(support_x)),
      support_y_(std::move(support_y)),
      query_a_(with_bias_row(query_x)),
      query_y_(std::move(query_y)),
      weights_(std::move(initial_weights)) {
  if (support_x.rows() != query_x.rows() || support_y_.rows() != query_y_.rows())
    throw ConfigError("LinearLeastSquares: support and query dimensions differ");
  if (support_y_.cols() != support_a_.cols() || query_y_.cols() != query_a_.cols())
    throw ConfigError("LinearLeastSquares: one target column per sample required");
  if (support_a_.cols() == 0 || query_a_.cols() == 0) throw ConfigError("LinearLeastSquares: empty set");
  if (weights_.rows() != support_y_.rows() || weights_.cols() != support_a_.rows())
    throw ConfigError("LinearLeastSquares: weights must be p x (m+1)");
}

LinearLeastSquares LinearLeastSquares::random(nn::Index m, nn::Index p, nn::Index support, nn::Index query,
                                              std::uint64_t seed) {
  if (m < 1 || p < 1 || support < 1 || query < 1) throw ConfigError("LinearLeastSquares::random: sizes must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](nn::Index r, nn::Index c) { return Matrix(Matrix::NullaryExpr(r, c, [&] { return normal(rng); })); };
  const Matrix truth = draw(p, m + 1);
  const Matrix xs = draw(m, support);
  const Matrix xq = draw(m, query);
  Matrix ys = truth * with_bias_row(xs) + 0.1 * draw(p, support);
  Matrix yq = truth * with_bias_row(xq) + 0.1 * draw(p, query);
  Matrix w0 = 0.5 * draw(p, m + 1);
  return LinearLeastSquares(xs, std::move(ys), xq, std::move(yq), std::move(w0));
}

void LinearLeastSquares::set_parameters(const Vector& v) {
  if (v.size() != weights_.size()) throw ConfigError("LinearLeastSquares: parameter vector has wrong length");
  weights_ = v.reshaped(weights_.rows(), weights_.cols());
}

double LinearLeastSquares::support_loss() const {
  return (weights_ * support_a_ - support_y_).squaredNorm() / static_cast<double>(support_y_.size());
}

Vector LinearLeastSquares::support_gradient() const {
  return lsq_gradient(weights_, support_a_, support_y_).reshaped();
}

double LinearLeastSquares::query_loss() const {
  return (weights_ * query_a_ - query_y_).squaredNorm() / static_cast<double>(query_y_.size());
}

Vector LinearLeastSquares::query_meta_gradient() const {
  return lsq_gradient(weights_, query_a_, query_y_).reshaped();
}

CompositeObjective::CompositeObjective(ClientModel model, const LocalizationTask& task)
    : model_(std::move(model)),
      xs_(task.support_inputs()),
      ys_(task.support_targets()),
      xq_(task.query_inputs()),
      yq_(task.query_targets()) {}

Vector CompositeObjective::parameters() const {
  std::vector<Vector> parts;
  nn::Index total = 0;
  for (Part p : kAllParts) {
    parts.push_back(nn::flatten(model_.part(p)));
    total += parts.back().size();
  }
  Vector out(total);
  nn::Index at = 0;
  for (const auto& v : parts) {
    out.segment(at, v.size()) = v;
    at += v.size();
  }
  return out;
}

void CompositeObjective::set_parameters(const Vector& v) {
  nn::Index at = 0;
  for (Part p : kAllParts) {
    auto& net = model_.part(p);
    const nn::Index n = nn::parameter_count(net);
    if (at + n > v.size()) throw ConfigError("CompositeObjective: parameter vector too short");
    nn::assign_flat<double>(net, v.segment(at, n));
    at += n;
  }
  if (at != v.size()) throw ConfigError("CompositeObjective: parameter vector too long");
}

double CompositeObjective::support_loss() const { return model_.composite_loss(xs_, ys_).total; }

Vector CompositeObjective::support_gradient() const {
  const auto loss = model_.composite_loss(xs_, ys_);
  std::vector<Vector> parts;
  nn::Index total = 0;
  for (Part p : kAllParts) {
    parts.push_back(nn::flatten(loss.grads[p].layers));
    total += parts.back().size();
  }
  Vector out(total);
  nn::Index at = 0;
  for (const auto& v : parts) {
    out.segment(at, v.size()) = v;
    at += v.size();
  }
  return out;
}

Vector CompositeObjective::query_meta_gradient() const {
  return nn::flatten(model_.composite_loss(xq_, yq_).grads.meta.layers);
}

double step_bound_squared(double eps, double delta1, double rate, double initial_grad_norm, double final_grad_norm) {
  if (!(delta1 > 0) || !(rate > 0) || !(initial_grad_norm > 0)) return std::numeric_limits<double>::quiet_NaN();
  const double g = initial_grad_norm * final_grad_norm;
  const double scale = delta1 * rate;
  return ((eps - 2.0 * g) / (initial_grad_norm * initial_grad_norm) + 1.0) / (scale * scale);
}

void to_json(nlohmann::json& j, const ModeProbe& m) {
  j = {{"steps", m.steps ? nlohmann::json(*m.steps) : nlohmann::json(nullptr)},
       {"reached", m.steps.has_value()},
       {"initial_squared_grad_norm", m.initial_squared_grad_norm},
       {"final_squared_grad_norm", m.final_squared_grad_norm},
       {"bound_squared", m.bound_squared},
       {"squared_grad_norms", m.squared_grad_norms}};
}

void to_json(nlohmann::json& j, const TheoryProbeReport& r) {
  j = {{"task", r.task_id},
       {"epsilon", r.epsilon},
       {"rate", r.rate},
       {"RI", r.random_init},
       {"MI", r.meta_init},
       {"lemma1", {{"steps", r.lemma1_steps}, {"rates", r.lemma1_rates}, {"residuals", r.lemma1_residuals}}},
       {"constants", {{"zeta", r.constants.zeta}, {"delta1", r.constants.delta1}}}};
}

}  // namespace femloc
