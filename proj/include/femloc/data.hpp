#pragma once

// Fingerprint datasets: CSV ingestion, task partitioning, support/query
// splitting, the synthetic log-distance path-loss generator, and task bundles
// on disk ({task}/support.csv, query.csv, meta.json).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "femloc/model.hpp"

namespace femloc {

struct GroupLabel {
  int building = 0;
  int floor = 0;
  bool operator==(const GroupLabel&) const = default;
  auto operator<=>(const GroupLabel&) const = default;
};

/// One sample per row: rssi is [S x m], coords is [S x p].
struct FingerprintDataset {
  Matrix rssi;
  Matrix coords;
  std::vector<std::string> ap_names;
  std::vector<std::string> coord_names;
  std::optional<std::vector<GroupLabel>> groups;

  nn::Index samples() const { return rssi.rows(); }
  nn::Index num_aps() const { return rssi.cols(); }
  nn::Index coord_dim() const { return coords.cols(); }

  /// Throws DataError when row counts or name lists disagree, or when
  /// `require_finite` and any value is NaN/inf.
  void validate(bool require_finite = true) const;

  FingerprintDataset select_rows(const std::vector<nn::Index>& rows) const;
  FingerprintDataset select_columns(const std::vector<nn::Index>& cols) const;

  bool operator==(const FingerprintDataset&) const = default;
};

// ---------------------------------------------------------------------------
// CSV

struct SchemaConfig {
  std::string ap_prefix;                // e.g. "WAP"; used when ap_columns is empty
  std::vector<std::string> ap_columns;  // explicit list, takes precedence
  std::vector<std::string> coord_columns = {"LONGITUDE", "LATITUDE"};
  double sentinel = 100.0;
  std::optional<std::string> building_column;
  std::optional<std::string> floor_column;
};

void to_json(nlohmann::json& j, const SchemaConfig& s);
void from_json(const nlohmann::json& j, SchemaConfig& s);
SchemaConfig load_schema(const std::filesystem::path& path);

/// Header-first CSV. Errors carry the offending line number.
FingerprintDataset load_csv(const std::filesystem::path& path, const SchemaConfig& schema);
FingerprintDataset parse_csv(std::istream& in, const SchemaConfig& schema, const std::string& source = "<stream>");

/// Writes ap columns, coordinate columns, then BUILDINGID/FLOOR when groups are present.
void write_csv(const std::filesystem::path& path, const FingerprintDataset& ds);

/// Schema that reads back what write_csv produced for `ds`.
SchemaConfig schema_for(const FingerprintDataset& ds, double sentinel);

// ---------------------------------------------------------------------------
// Tasks

enum class PartitionRule { Building, Floor, BuildingFloor };
PartitionRule partition_rule_from_string(const std::string& s);
const char* to_string(PartitionRule r);

struct NamedDataset {
  std::string id;
  FingerprintDataset data;
};

/// One dataset per distinct group key, ordered by key. Names follow B{i}_F{j}
/// (or B{i} / F{j} for single-key rules).
std::vector<NamedDataset> partition_tasks(const FingerprintDataset& ds, PartitionRule rule);

/// Seeded shuffle; the first ceil(ratio * S) rows become the support set.
std::pair<FingerprintDataset, FingerprintDataset> split_support_query(const FingerprintDataset& ds, double ratio,
                                                                      std::uint64_t seed);

/// Per-coordinate affine map to zero mean and unit range.
struct LabelScaler {
  Vector mean;
  Vector range;

  static LabelScaler fit(const Matrix& coords);
  Matrix normalize(const Matrix& coords) const;    // rows are samples
  Matrix denormalize(const Matrix& coords) const;  // rows are samples
  bool operator==(const LabelScaler&) const = default;
};

enum class LossKind { MeanSquaredError };

struct LossConfig {
  LossKind kind = LossKind::MeanSquaredError;
  bool operator==(const LossConfig&) const = default;
};

struct LocalizationTask {
  std::string id;
  FingerprintDataset support;
  FingerprintDataset query;
  LossConfig loss;
  LabelScaler scaler;  // fitted on the support coordinates

  nn::Index num_aps() const { return support.num_aps(); }
  nn::Index coord_dim() const { return support.coord_dim(); }

  /// Model-ready batches: fingerprints as columns, normalized coordinates as columns.
  Matrix support_inputs() const { return support.rssi.transpose(); }
  Matrix support_targets() const { return scaler.normalize(support.coords).transpose(); }
  Matrix query_inputs() const { return query.rssi.transpose(); }
  Matrix query_targets() const { return scaler.normalize(query.coords).transpose(); }

  void validate() const;
};

LocalizationTask make_task(std::string id, FingerprintDataset support, FingerprintDataset query);

/// Writes {dir}/support.csv, query.csv, meta.json. `extra` is merged into meta.json.
void write_task_bundle(const std::filesystem::path& dir, const LocalizationTask& task,
                       const nlohmann::json& extra = nlohmann::json::object());
LocalizationTask read_task_bundle(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Synthetic environments

struct SyntheticEnvSpec {
  int num_aps = 20;
  double width = 40.0;   // meters
  double height = 40.0;  // meters
  int samples = 200;
  double tx_power = -30.0;         // dBm at 1 m
  double path_loss_exponent = 2.5;
  double noise_sigma = 2.0;  // dB
  std::uint64_t seed = 1;
  /// Readings below this level are replaced by `sentinel` (not heard).
  std::optional<double> detection_floor;
  double sentinel = 100.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticEnvSpec& s);
void from_json(const nlohmann::json& j, SyntheticEnvSpec& s);

/// Received power in dBm at distance `dist` meters (clamped at 0.1 m).
double path_loss_rssi(double tx_power, double exponent, double dist);

/// APs and sample locations uniform in the area; RSSI from the log-distance
/// model plus Gaussian noise. Deterministic in spec.seed.
FingerprintDataset synth_environment(const SyntheticEnvSpec& spec);

/// AP positions used by synth_environment for `spec` (same seed stream).
Matrix synth_ap_positions(const SyntheticEnvSpec& spec);

}  // namespace femloc
