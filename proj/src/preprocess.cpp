#include "femloc/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace femloc {

void PreprocessConfig::validate() const {
  if (!(visibility_threshold >= 0 && visibility_threshold <= 1))
    throw ConfigError("preprocess: visibility threshold tau must lie in [0, 1]");
  if (!(powed_exponent > 0)) throw ConfigError("preprocess: powed exponent must be > 0");
  if (!std::isfinite(impute_offset)) throw ConfigError("preprocess: impute offset must be finite");
}

void to_json(nlohmann::json& j, const PreprocessConfig& c) {
  j = {{"tau", c.visibility_threshold},
       {"sentinel", c.sentinel},
       {"impute_offset", c.impute_offset},
       {"powed_exponent", c.powed_exponent}};
}

void from_json(const nlohmann::json& j, PreprocessConfig& c) {
  try {
    c.visibility_threshold = j.value("tau", c.visibility_threshold);
    c.sentinel = j.value("sentinel", c.sentinel);
    c.impute_offset = j.value("impute_offset", c.impute_offset);
    c.powed_exponent = j.value("powed_exponent", c.powed_exponent);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("preprocess: ") + e.what());
  }
  c.validate();
}

ApSelection select_aps(const FingerprintDataset& ds, const PreprocessConfig& cfg) {
  cfg.validate();
  if (ds.samples() == 0 || ds.num_aps() == 0) throw DataError("select_aps: empty dataset");
  const double rows = static_cast<double>(ds.samples());
  ApSelection out;
  for (nn::Index c = 0; c < ds.num_aps(); ++c) {
    const auto missing = (ds.rssi.col(c).array() == cfg.sentinel).count();
    const double frac = static_cast<double>(missing) / rows;
    bool drop = missing == ds.samples();
    if (cfg.visibility_threshold > 0 && frac > 1.0 - cfg.visibility_threshold) drop = true;
    if (drop)
      out.dropped.push_back(ds.ap_names[static_cast<std::size_t>(c)]);
    else
      out.kept.push_back(c);
  }
  if (out.kept.empty()) throw DataError("select_aps: every AP column was dropped (empty signal space)");
  out.data = ds.select_columns(out.kept);
  return out;
}

Imputation impute_missing(const FingerprintDataset& ds, const PreprocessConfig& cfg) {
  cfg.validate();
  double lowest = std::numeric_limits<double>::infinity();
  nn::Index missing = 0;
  for (nn::Index c = 0; c < ds.rssi.cols(); ++c)
    for (nn::Index r = 0; r < ds.rssi.rows(); ++r) {
      const double v = ds.rssi(r, c);
      if (v == cfg.sentinel)
        ++missing;
      else
        lowest = std::min(lowest, v);
    }
  if (!std::isfinite(lowest)) throw DataError("impute_missing: no observed RSSI values");
  Imputation out{ds, lowest - cfg.impute_offset, missing};
  if (missing > 0) out.data.rssi = (ds.rssi.array() == cfg.sentinel).select(out.fill_value, ds.rssi);
  return out;
}

PowedResult powed_transform(const FingerprintDataset& ds, double exponent) {
  if (!(exponent > 0)) throw ConfigError("powed_transform: exponent must be > 0");
  if (ds.rssi.size() == 0) throw DataError("powed_transform: empty dataset");
  if (!ds.rssi.allFinite()) throw DataError("powed_transform: non-finite RSSI; impute first");
  PowedResult out{ds, ds.rssi.minCoeff(), ds.rssi.maxCoeff()};
  const double span = out.max - out.min;
  if (!(span > 0)) throw DataError("powed_transform: degenerate range (max == min)");
  out.data.rssi = ((ds.rssi.array() - out.min) / span).pow(exponent).min(1.0).max(0.0);
  return out;
}

nn::Index meta_signal_dim(std::vector<nn::Index> ap_counts) {
  if (ap_counts.empty()) throw ConfigError("meta_signal_dim: no tasks");
  std::sort(ap_counts.begin(), ap_counts.end());
  const std::size_t k = ap_counts.size();
  if (k % 2 == 1) return ap_counts[k / 2];
  const double mid = (static_cast<double>(ap_counts[k / 2 - 1]) + static_cast<double>(ap_counts[k / 2])) / 2.0;
  return static_cast<nn::Index>(std::round(mid));
}

void to_json(nlohmann::json& j, const PreprocessReport& r) {
  j = {{"dropped_columns", r.dropped_columns},
       {"kept_columns", r.kept_columns},
       {"sentinel_count", r.sentinel_count},
       {"fill_value", r.fill_value},
       {"min", r.min},
       {"max", r.max}};
}

Preprocessed preprocess(const FingerprintDataset& ds, const PreprocessConfig& cfg) {
  auto sel = select_aps(ds, cfg);
  auto imp = impute_missing(sel.data, cfg);
  auto pw = powed_transform(imp.data, cfg.powed_exponent);
  Preprocessed out;
  out.data = std::move(pw.data);
  out.report = {std::move(sel.dropped), std::move(sel.kept), imp.replaced, imp.fill_value, pw.min, pw.max};
  return out;
}

}  // namespace femloc
