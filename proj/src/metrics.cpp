#include "femloc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace femloc {

Vector distance_errors(const Matrix& pred, const Matrix& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw ConfigError("mde: prediction is " + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
                      ", truth is " + std::to_string(truth.rows()) + "x" + std::to_string(truth.cols()));
  if (pred.rows() == 0) throw ConfigError("mde: no samples");
  return (pred - truth).rowwise().norm();
}

double mde(const Matrix& pred, const Matrix& truth) { return distance_errors(pred, truth).mean(); }

const char* to_string(InitMode m) { return m == InitMode::Meta ? "MI" : "RI"; }

InitMode init_mode_from_string(const std::string& s) {
  if (s == "MI" || s == "mi" || s == "meta") return InitMode::Meta;
  if (s == "RI" || s == "ri" || s == "random") return InitMode::Random;
  throw ConfigError("unknown init mode '" + s + "' (MI or RI)");
}

void AdaptationTrace::validate() const {
  for (std::size_t i = 0; i < steps.size(); ++i)
    if (steps[i].step != static_cast<int>(i) + 1)
      throw InternalError("adaptation trace steps must run contiguously from 1");
}

std::optional<int> AdaptationTrace::steps_to_reach(double target) const {
  for (const auto& s : steps)
    if (s.query_mde <= target) return s.step;
  return std::nullopt;
}

double AdaptationTrace::mde_at(int step) const {
  if (step < 1 || step > static_cast<int>(steps.size()))
    throw ConfigError("trace has " + std::to_string(steps.size()) + " steps; step " + std::to_string(step) +
                      " requested");
  return steps[static_cast<std::size_t>(step - 1)].query_mde;
}

double speed_from_steps(int steps, int batch) {
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  if (steps < 1) throw ConfigError("step count must be >= 1");
  return 1.0 / (static_cast<double>(batch) * static_cast<double>(steps));
}

double speed_from_mde(double mde_value, int batch) {
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  return mde_value / static_cast<double>(batch);
}

AccuracySpeed adaptation_speed_accuracy(std::span<const AdaptationTrace> traces, double target, int batch) {
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  if (traces.empty()) throw ConfigError("adaptation_speed_accuracy: no traces");
  AccuracySpeed out;
  out.total = static_cast<int>(traces.size());
  double sum = 0;
  for (const auto& t : traces) {
    if (t.steps.empty()) throw ConfigError("adaptation_speed_accuracy: empty trace");
    auto n = t.steps_to_reach(target);
    out.steps.push_back(n);
    if (n) {
      ++out.reached;
      sum += speed_from_steps(*n, batch);
    }
  }
  out.value = sum / static_cast<double>(traces.size());
  return out;
}

AccuracySpeed adaptation_speed_accuracy(const AdaptationTrace& trace, double target, int batch) {
  return adaptation_speed_accuracy(std::span<const AdaptationTrace>(&trace, 1), target, batch);
}

double adaptation_speed_steps(const AdaptationTrace& trace, int n_star, int batch) {
  return speed_from_mde(trace.mde_at(n_star), batch);
}

double improvement_percent(double mi_value, double ri_value, ImprovementKind kind) {
  (void)kind;  // both kinds share the relative-reduction form; the flag documents the column
  if (ri_value == 0) throw ConfigError("improvement_percent: RI value is zero");
  return 100.0 * (ri_value - mi_value) / ri_value;
}

std::vector<CdfPoint> cdf_curve(std::vector<double> errors) {
  if (errors.empty()) throw ConfigError("cdf_curve: no errors");
  std::sort(errors.begin(), errors.end());
  const double n = static_cast<double>(errors.size());
  std::vector<CdfPoint> out;
  out.reserve(errors.size());
  for (std::size_t i = 0; i < errors.size(); ++i) out.push_back({errors[i], static_cast<double>(i + 1) / n});
  return out;
}

double cdf_quantile(std::span<const CdfPoint> curve, double q) {
  if (curve.empty()) throw ConfigError("cdf_quantile: empty curve");
  for (const auto& p : curve)
    if (p.fraction >= q - 1e-12) return p.error;
  return curve.back().error;
}

Matrix knn_predict(const Matrix& support_rssi, const Matrix& support_coords, const Matrix& query_rssi, int k) {
  const nn::Index n = support_rssi.rows();
  if (k < 1) throw ConfigError("knn: k must be >= 1");
  if (n < k) throw ConfigError("knn: support has " + std::to_string(n) + " samples, fewer than k=" + std::to_string(k));
  if (query_rssi.cols() != support_rssi.cols()) throw ConfigError("knn: query and support AP counts differ");
  if (support_coords.rows() != n) throw ConfigError("knn: support coordinates do not match fingerprints");

  Matrix out(query_rssi.rows(), support_coords.cols());
  std::vector<std::pair<double, nn::Index>> dist(static_cast<std::size_t>(n));
  for (nn::Index q = 0; q < query_rssi.rows(); ++q) {
    for (nn::Index s = 0; s < n; ++s)
      dist[static_cast<std::size_t>(s)] = {(support_rssi.row(s) - query_rssi.row(q)).norm(), s};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::vector<nn::Index> chosen;
    for (int i = 0; i < k; ++i) chosen.push_back(dist[static_cast<std::size_t>(i)].second);
    std::sort(chosen.begin(), chosen.end());
    Vector acc = Vector::Zero(support_coords.cols());
    for (auto idx : chosen) acc += support_coords.row(idx).transpose();
    out.row(q) = (acc / static_cast<double>(k)).transpose();
  }
  return out;
}

KnnResult knn_baseline(const LocalizationTask& task, int k) {
  KnnResult r;
  r.predictions = knn_predict(task.support.rssi, task.support.coords, task.query.rssi, k);
  r.mde = mde(r.predictions, task.query.coords);
  return r;
}

}  // namespace femloc
