#pragma once

// RSSI preprocessing: AP selection, missing-value imputation, and the
// powed transform ((v - min) / (max - min))^beta onto [0, 1].

#include <vector>

#include <nlohmann/json.hpp>

#include "femloc/data.hpp"

namespace femloc {

struct PreprocessConfig {
  double visibility_threshold = 0.0;  // tau in [0, 1]
  double sentinel = 100.0;
  double impute_offset = 1.0;  // dBm below the observed minimum
  double powed_exponent = 2.718281828459045;

  void validate() const;
};

void to_json(nlohmann::json& j, const PreprocessConfig& c);
void from_json(const nlohmann::json& j, PreprocessConfig& c);

struct ApSelection {
  FingerprintDataset data;
  std::vector<nn::Index> kept;  // original column index of each kept column, ascending
  std::vector<std::string> dropped;
};

/// Drops all-missing AP columns; with tau > 0 also columns whose missing
/// fraction exceeds 1 - tau.
ApSelection select_aps(const FingerprintDataset& ds, const PreprocessConfig& cfg);

struct Imputation {
  FingerprintDataset data;
  double fill_value = 0;  // min observed - offset
  nn::Index replaced = 0;
};

/// Replaces every sentinel with (global minimum observed RSSI - offset).
Imputation impute_missing(const FingerprintDataset& ds, const PreprocessConfig& cfg);

struct PowedResult {
  FingerprintDataset data;
  double min = 0;
  double max = 0;
};

/// Dataset-global min/max; throws DataError when max == min.
PowedResult powed_transform(const FingerprintDataset& ds, double exponent);

/// Median of the AP counts, even-length medians rounded half away from zero.
nn::Index meta_signal_dim(std::vector<nn::Index> ap_counts);

struct PreprocessReport {
  std::vector<std::string> dropped_columns;
  std::vector<nn::Index> kept_columns;
  nn::Index sentinel_count = 0;
  double fill_value = 0;
  double min = 0;
  double max = 0;
};

void to_json(nlohmann::json& j, const PreprocessReport& r);

struct Preprocessed {
  FingerprintDataset data;
  PreprocessReport report;
};

/// select_aps -> impute_missing -> powed_transform.
Preprocessed preprocess(const FingerprintDataset& ds, const PreprocessConfig& cfg);

}  // namespace femloc
