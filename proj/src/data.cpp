#include "femloc/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "femloc/seeding.hpp"

namespace femloc {

namespace fs = std::filesystem;

void FingerprintDataset::validate(bool require_finite) const {
  if (rssi.rows() != coords.rows())
    throw DataError("dataset: " + std::to_string(rssi.rows()) + " fingerprints but " + std::to_string(coords.rows()) +
                    " coordinate rows");
  if (static_cast<nn::Index>(ap_names.size()) != rssi.cols())
    throw DataError("dataset: ap_names has " + std::to_string(ap_names.size()) + " entries for " +
                    std::to_string(rssi.cols()) + " AP columns");
  if (!coord_names.empty() && static_cast<nn::Index>(coord_names.size()) != coords.cols())
    throw DataError("dataset: coord_names does not match coordinate columns");
  if (groups && static_cast<nn::Index>(groups->size()) != rssi.rows())
    throw DataError("dataset: group labels do not cover every sample");
  if (require_finite && (!rssi.allFinite() || !coords.allFinite()))
    throw DataError("dataset: contains NaN or infinite values");
}

FingerprintDataset FingerprintDataset::select_rows(const std::vector<nn::Index>& rows) const {
  FingerprintDataset out;
  out.rssi = rssi(rows, Eigen::all);
  out.coords = coords(rows, Eigen::all);
  out.ap_names = ap_names;
  out.coord_names = coord_names;
  if (groups) {
    std::vector<GroupLabel> g;
    g.reserve(rows.size());
    for (auto r : rows) g.push_back((*groups)[static_cast<std::size_t>(r)]);
    out.groups = std::move(g);
  }
  return out;
}

FingerprintDataset FingerprintDataset::select_columns(const std::vector<nn::Index>& cols) const {
  FingerprintDataset out = *this;
  out.rssi = rssi(Eigen::all, cols);
  out.ap_names.clear();
  for (auto c : cols) out.ap_names.push_back(ap_names[static_cast<std::size_t>(c)]);
  return out;
}

// ---------------------------------------------------------------------------
// CSV

void to_json(nlohmann::json& j, const SchemaConfig& s) {
  j = {{"sentinel", s.sentinel}, {"coord_columns", s.coord_columns}};
  if (!s.ap_columns.empty()) j["ap_columns"] = s.ap_columns;
  if (!s.ap_prefix.empty()) j["ap_prefix"] = s.ap_prefix;
  if (s.building_column) j["building_col"] = *s.building_column;
  if (s.floor_column) j["floor_col"] = *s.floor_column;
}

void from_json(const nlohmann::json& j, SchemaConfig& s) {
  try {
    s.ap_prefix = j.value("ap_prefix", std::string());
    s.ap_columns = j.value("ap_columns", std::vector<std::string>{});
    s.coord_columns = j.value("coord_columns", s.coord_columns);
    s.sentinel = j.value("sentinel", s.sentinel);
    if (j.contains("building_col")) s.building_column = j.at("building_col").get<std::string>();
    if (j.contains("floor_col")) s.floor_column = j.at("floor_col").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schema: ") + e.what());
  }
  if (s.ap_prefix.empty() && s.ap_columns.empty()) throw ConfigError("schema: need ap_prefix or ap_columns");
  if (s.coord_columns.empty()) throw ConfigError("schema: coord_columns must not be empty");
}

SchemaConfig load_schema(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schema config " + path.string());
  try {
    return nlohmann::json::parse(in).get<SchemaConfig>();
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("schema config " + path.string() + ": " + e.what());
  }
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(std::move(cell));
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  out.push_back(std::move(cell));
  for (auto& c : out) {
    auto b = c.find_first_not_of(" \t");
    auto e = c.find_last_not_of(" \t");
    c = b == std::string::npos ? std::string() : c.substr(b, e - b + 1);
  }
  return out;
}

double parse_number(const std::string& cell, const std::string& source, std::size_t line, const std::string& col) {
  double v = 0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  if (!cell.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || cell.empty())
    throw DataError(source + ":" + std::to_string(line) + ": column '" + col + "': cannot parse '" + cell +
                    "' as a number");
  return v;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

FingerprintDataset parse_csv(std::istream& in, const SchemaConfig& schema, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    header = split_line(line);
    break;
  }
  if (header.empty()) throw DataError(source + ": empty file (no header)");

  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < header.size(); ++i) index.emplace(header[i], i);
  auto require = [&](const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw DataError(source + ": missing column '" + name + "'");
    return it->second;
  };

  std::vector<std::size_t> ap_cols;
  std::vector<std::string> ap_names;
  if (!schema.ap_columns.empty()) {
    for (const auto& n : schema.ap_columns) {
      ap_cols.push_back(require(n));
      ap_names.push_back(n);
    }
  } else {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i].rfind(schema.ap_prefix, 0) == 0) {
        ap_cols.push_back(i);
        ap_names.push_back(header[i]);
      }
    if (ap_cols.empty()) throw DataError(source + ": no column starts with AP prefix '" + schema.ap_prefix + "'");
  }
  std::vector<std::size_t> coord_cols;
  for (const auto& n : schema.coord_columns) coord_cols.push_back(require(n));
  std::optional<std::size_t> building_col, floor_col;
  if (schema.building_column) building_col = require(*schema.building_column);
  if (schema.floor_column) floor_col = require(*schema.floor_column);

  std::vector<double> rssi, coords;
  std::vector<GroupLabel> groups;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_line(line);
    if (cells.size() != header.size())
      throw DataError(source + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(cells.size()));
    for (auto c : ap_cols) rssi.push_back(parse_number(cells[c], source, line_no, header[c]));
    for (auto c : coord_cols) coords.push_back(parse_number(cells[c], source, line_no, header[c]));
    if (building_col || floor_col) {
      GroupLabel g;
      if (building_col)
        g.building = static_cast<int>(parse_number(cells[*building_col], source, line_no, header[*building_col]));
      if (floor_col) g.floor = static_cast<int>(parse_number(cells[*floor_col], source, line_no, header[*floor_col]));
      groups.push_back(g);
    }
    ++rows;
  }
  if (rows == 0) throw DataError(source + ": no data rows");

  FingerprintDataset ds;
  const auto m = static_cast<nn::Index>(ap_cols.size());
  const auto p = static_cast<nn::Index>(coord_cols.size());
  ds.rssi = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      rssi.data(), static_cast<nn::Index>(rows), m);
  ds.coords = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      coords.data(), static_cast<nn::Index>(rows), p);
  ds.ap_names = std::move(ap_names);
  ds.coord_names = schema.coord_columns;
  if (building_col || floor_col) ds.groups = std::move(groups);
  ds.validate(false);
  return ds;
}

FingerprintDataset load_csv(const fs::path& path, const SchemaConfig& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_csv(in, schema, path.string());
}

void write_csv(const fs::path& path, const FingerprintDataset& ds) {
  ds.validate(false);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  std::vector<std::string> cols = ds.ap_names;
  const auto coord_names = ds.coord_names.empty() ? schema_for(ds, 0).coord_columns : ds.coord_names;
  cols.insert(cols.end(), coord_names.begin(), coord_names.end());
  if (ds.groups) {
    cols.emplace_back("BUILDINGID");
    cols.emplace_back("FLOOR");
  }
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (nn::Index r = 0; r < ds.samples(); ++r) {
    for (nn::Index c = 0; c < ds.num_aps(); ++c) out << (c ? "," : "") << format_number(ds.rssi(r, c));
    for (nn::Index c = 0; c < ds.coord_dim(); ++c) out << ',' << format_number(ds.coords(r, c));
    if (ds.groups) {
      const auto& g = (*ds.groups)[static_cast<std::size_t>(r)];
      out << ',' << g.building << ',' << g.floor;
    }
    out << '\n';
  }
}

SchemaConfig schema_for(const FingerprintDataset& ds, double sentinel) {
  SchemaConfig s;
  s.ap_columns = ds.ap_names;
  if (!ds.coord_names.empty()) {
    s.coord_columns = ds.coord_names;
  } else {
    s.coord_columns.clear();
    for (nn::Index c = 0; c < ds.coord_dim(); ++c) s.coord_columns.push_back(c == 0 ? "X" : c == 1 ? "Y" : "C" + std::to_string(c));
  }
  s.sentinel = sentinel;
  if (ds.groups) {
    s.building_column = "BUILDINGID";
    s.floor_column = "FLOOR";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Tasks

PartitionRule partition_rule_from_string(const std::string& s) {
  if (s == "building") return PartitionRule::Building;
  if (s == "floor") return PartitionRule::Floor;
  if (s == "building_floor" || s == "building×floor" || s == "building_x_floor") return PartitionRule::BuildingFloor;
  throw ConfigError("unknown partition rule '" + s + "' (building | floor | building_floor)");
}

const char* to_string(PartitionRule r) {
  switch (r) {
    case PartitionRule::Building: return "building";
    case PartitionRule::Floor: return "floor";
    case PartitionRule::BuildingFloor: return "building_floor";
  }
  return "?";
}

std::vector<NamedDataset> partition_tasks(const FingerprintDataset& ds, PartitionRule rule) {
  if (!ds.groups) throw DataError("partition_tasks: dataset has no building/floor labels");
  std::map<GroupLabel, std::vector<nn::Index>> buckets;
  for (nn::Index r = 0; r < ds.samples(); ++r) {
    GroupLabel key = (*ds.groups)[static_cast<std::size_t>(r)];
    if (rule == PartitionRule::Building) key.floor = 0;
    if (rule == PartitionRule::Floor) key.building = 0;
    buckets[key].push_back(r);
  }
  std::vector<NamedDataset> out;
  for (const auto& [key, rows] : buckets) {
    std::string id;
    switch (rule) {
      case PartitionRule::Building: id = "B" + std::to_string(key.building); break;
      case PartitionRule::Floor: id = "F" + std::to_string(key.floor); break;
      case PartitionRule::BuildingFloor:
        id = "B" + std::to_string(key.building) + "_F" + std::to_string(key.floor);
        break;
    }
    out.push_back({std::move(id), ds.select_rows(rows)});
  }
  return out;
}

std::pair<FingerprintDataset, FingerprintDataset> split_support_query(const FingerprintDataset& ds, double ratio,
                                                                      std::uint64_t seed) {
  if (!(ratio > 0 && ratio < 1)) throw ConfigError("split ratio must lie in (0, 1)");
  const nn::Index n = ds.samples();
  if (n < 2) throw DataError("split_support_query: need at least 2 samples, have " + std::to_string(n));
  std::vector<nn::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto n_support = static_cast<nn::Index>(std::ceil(ratio * static_cast<double>(n)));
  n_support = std::clamp<nn::Index>(n_support, 1, n - 1);
  std::vector<nn::Index> s(order.begin(), order.begin() + n_support);
  std::vector<nn::Index> q(order.begin() + n_support, order.end());
  return {ds.select_rows(s), ds.select_rows(q)};
}

LabelScaler LabelScaler::fit(const Matrix& coords) {
  if (coords.rows() == 0) throw DataError("LabelScaler: no samples");
  LabelScaler s;
  s.mean = coords.colwise().mean().transpose();
  s.range = (coords.colwise().maxCoeff() - coords.colwise().minCoeff()).transpose();
  for (nn::Index i = 0; i < s.range.size(); ++i)
    if (!(s.range(i) > 0)) s.range(i) = 1.0;
  return s;
}

Matrix LabelScaler::normalize(const Matrix& coords) const {
  return (coords.rowwise() - mean.transpose()).array().rowwise() / range.transpose().array();
}

Matrix LabelScaler::denormalize(const Matrix& coords) const {
  return (coords.array().rowwise() * range.transpose().array()).matrix().rowwise() + mean.transpose();
}

void LocalizationTask::validate() const {
  support.validate();
  query.validate();
  if (support.samples() == 0 || query.samples() == 0) throw DataError("task " + id + ": empty support or query set");
  if (support.ap_names != query.ap_names) throw DataError("task " + id + ": support and query AP sets differ");
  if (support.coord_dim() != query.coord_dim()) throw DataError("task " + id + ": coordinate dims differ");
}

LocalizationTask make_task(std::string id, FingerprintDataset support, FingerprintDataset query) {
  LocalizationTask t;
  t.id = std::move(id);
  t.support = std::move(support);
  t.query = std::move(query);
  t.validate();
  t.scaler = LabelScaler::fit(t.support.coords);
  return t;
}

void write_task_bundle(const fs::path& dir, const LocalizationTask& task, const nlohmann::json& extra) {
  fs::create_directories(dir);
  write_csv(dir / "support.csv", task.support);
  write_csv(dir / "query.csv", task.query);
  nlohmann::json meta = extra;
  meta["id"] = task.id;
  meta["m"] = task.num_aps();
  meta["p"] = task.coord_dim();
  meta["support_samples"] = task.support.samples();
  meta["query_samples"] = task.query.samples();
  meta["schema"] = schema_for(task.support, 100.0);
  std::ofstream out(dir / "meta.json");
  if (!out) throw DataError("cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

LocalizationTask read_task_bundle(const fs::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw DataError("task bundle " + dir.string() + ": missing meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("task bundle " + dir.string() + ": " + e.what());
  }
  SchemaConfig schema;
  try {
    schema = meta.at("schema").get<SchemaConfig>();
  } catch (const std::exception& e) {
    throw DataError("task bundle " + dir.string() + ": bad schema: " + e.what());
  }
  auto support = load_csv(dir / "support.csv", schema);
  auto query = load_csv(dir / "query.csv", schema);
  return make_task(meta.value("id", dir.filename().string()), std::move(support), std::move(query));
}

// ---------------------------------------------------------------------------
// Synthetic environments

void SyntheticEnvSpec::validate() const {
  if (num_aps < 1) throw ConfigError("synthetic: num_aps must be >= 1");
  if (samples < 1) throw ConfigError("synthetic: samples must be >= 1");
  if (!(width > 0) || !(height > 0)) throw ConfigError("synthetic: area must be positive");
  if (!(path_loss_exponent > 0)) throw ConfigError("synthetic: path_loss_exponent must be > 0");
  if (!(noise_sigma >= 0)) throw ConfigError("synthetic: noise_sigma must be >= 0");
}

void to_json(nlohmann::json& j, const SyntheticEnvSpec& s) {
  j = {{"num_aps", s.num_aps},
       {"width", s.width},
       {"height", s.height},
       {"samples", s.samples},
       {"tx_power", s.tx_power},
       {"path_loss_exponent", s.path_loss_exponent},
       {"noise_sigma", s.noise_sigma},
       {"seed", s.seed},
       {"sentinel", s.sentinel}};
  if (s.detection_floor) j["detection_floor"] = *s.detection_floor;
}

void from_json(const nlohmann::json& j, SyntheticEnvSpec& s) {
  try {
    s.num_aps = j.value("num_aps", s.num_aps);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.samples = j.value("samples", s.samples);
    s.tx_power = j.value("tx_power", s.tx_power);
    s.path_loss_exponent = j.value("path_loss_exponent", s.path_loss_exponent);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
    s.sentinel = j.value("sentinel", s.sentinel);
    if (j.contains("detection_floor") && !j.at("detection_floor").is_null())
      s.detection_floor = j.at("detection_floor").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
}

double path_loss_rssi(double tx_power, double exponent, double dist) {
  return tx_power - 10.0 * exponent * std::log10(std::max(dist, 0.1));
}

Matrix synth_ap_positions(const SyntheticEnvSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, 1));
  std::uniform_real_distribution<double> ux(0.0, spec.width), uy(0.0, spec.height);
  Matrix aps(spec.num_aps, 2);
  for (int a = 0; a < spec.num_aps; ++a) {
    aps(a, 0) = ux(rng);
    aps(a, 1) = uy(rng);
  }
  return aps;
}

FingerprintDataset synth_environment(const SyntheticEnvSpec& spec) {
  const Matrix aps = synth_ap_positions(spec);
  std::mt19937_64 rng(derive_seed(spec.seed, 2));
  std::uniform_real_distribution<double> ux(0.0, spec.width), uy(0.0, spec.height);
  std::normal_distribution<double> noise(0.0, 1.0);

  FingerprintDataset ds;
  ds.rssi.resize(spec.samples, spec.num_aps);
  ds.coords.resize(spec.samples, 2);
  for (int s = 0; s < spec.samples; ++s) {
    const double x = ux(rng), y = uy(rng);
    ds.coords(s, 0) = x;
    ds.coords(s, 1) = y;
    for (int a = 0; a < spec.num_aps; ++a) {
      const double dist = std::hypot(x - aps(a, 0), y - aps(a, 1));
      double v = path_loss_rssi(spec.tx_power, spec.path_loss_exponent, dist);
      const double z = noise(rng);
      if (spec.noise_sigma > 0) v += spec.noise_sigma * z;
      if (spec.detection_floor && v < *spec.detection_floor) v = spec.sentinel;
      ds.rssi(s, a) = v;
    }
  }
  for (int a = 0; a < spec.num_aps; ++a) {
    std::ostringstream os;
    os << "AP" << std::setw(3) << std::setfill('0') << a + 1;
    ds.ap_names.push_back(os.str());
  }
  ds.coord_names = {"X", "Y"};
  return ds;
}

}  // namespace femloc
