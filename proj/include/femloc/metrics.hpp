#pragma once

// Localization metrics: mean distance error, adaptation speed (accuracy- and
// step-based), improvement percentages, error CDFs, and the KNN baseline.

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "femloc/data.hpp"

namespace femloc {

/// Mean Euclidean norm of row differences; rows are samples.
double mde(const Matrix& pred, const Matrix& truth);

/// Per-sample Euclidean errors.
Vector distance_errors(const Matrix& pred, const Matrix& truth);

enum class InitMode { Random, Meta };  // RI, MI
const char* to_string(InitMode m);     // "RI" / "MI"
InitMode init_mode_from_string(const std::string& s);

struct StepRecord {
  int step = 0;  // 1-based
  double support_loss = 0;
  double query_mde = 0;
};

struct AdaptationTrace {
  std::string task_id;
  InitMode mode = InitMode::Random;
  std::uint64_t seed = 0;
  std::vector<StepRecord> steps;

  /// Throws InternalError unless steps run 1..N without gaps.
  void validate() const;
  /// Earliest step whose query MDE is <= target.
  std::optional<int> steps_to_reach(double target) const;
  double mde_at(int step) const;
};

struct AccuracySpeed {
  double value = 0;     // mean over traces of 1/(b n_A), 0 for traces that never reach A
  int reached = 0;      // traces that reached A
  int total = 0;
  std::vector<std::optional<int>> steps;  // n_A per trace

  bool all_reached() const { return reached == total; }
};

/// Accuracy-based adaptation speed: 1/(b * n_A) with n_A the earliest step at
/// which query MDE <= target, averaged over the given traces.
AccuracySpeed adaptation_speed_accuracy(std::span<const AdaptationTrace> traces, double target, int batch);
AccuracySpeed adaptation_speed_accuracy(const AdaptationTrace& trace, double target, int batch);

/// Step-based adaptation speed: MDE(n*) / b. Lower is better.
double adaptation_speed_steps(const AdaptationTrace& trace, int n_star, int batch);

/// Arithmetic forms, for values reported without a trace.
double speed_from_steps(int steps, int batch);
double speed_from_mde(double mde_value, int batch);

enum class ImprovementKind { Steps, Accuracy };

/// Steps: 100 (n_RI - n_MI) / n_RI. Accuracy: 100 (MDE_RI - MDE_MI) / MDE_RI.
double improvement_percent(double mi_value, double ri_value, ImprovementKind kind);

struct CdfPoint {
  double error;
  double fraction;
};

/// Sorted errors with cumulative fraction i/N at the i-th (1-based) error.
std::vector<CdfPoint> cdf_curve(std::vector<double> errors);

/// Error at which the CDF first reaches `q`.
double cdf_quantile(std::span<const CdfPoint> curve, double q);

struct KnnResult {
  Matrix predictions;  // [query x p], dataset-native units
  double mde = 0;
};

/// Averages the coordinates of the k nearest support fingerprints (Euclidean,
/// ties to the lower support index).
KnnResult knn_baseline(const LocalizationTask& task, int k);
Matrix knn_predict(const Matrix& support_rssi, const Matrix& support_coords, const Matrix& query_rssi, int k);

}  // namespace femloc
