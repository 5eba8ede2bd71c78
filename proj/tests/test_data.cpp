#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "femloc/data.hpp"
#include "oracles.hpp"

using namespace femloc;
namespace fs = std::filesystem;

namespace {

SchemaConfig uji_schema() {
  SchemaConfig s;
  s.ap_prefix = "WAP";
  s.building_column = "BUILDINGID";
  s.floor_column = "FLOOR";
  return s;
}

// Labelled dataset with `floors[b]` floors in building b and `per` samples each.
FingerprintDataset grouped(const std::vector<int>& floors, int per) {
  int total = 0;
  for (int f : floors) total += f * per;
  FingerprintDataset ds;
  ds.rssi.resize(total, 2);
  ds.coords.resize(total, 2);
  ds.ap_names = {"a", "b"};
  ds.coord_names = {"x", "y"};
  std::vector<GroupLabel> g;
  int row = 0;
  for (int b = 0; b < static_cast<int>(floors.size()); ++b)
    for (int f = 0; f < floors[static_cast<std::size_t>(b)]; ++f)
      for (int s = 0; s < per; ++s, ++row) {
        ds.rssi.row(row) << -50.0 - row, -60.0;
        ds.coords.row(row) << row, b;
        g.push_back({b, f});
      }
  ds.groups = g;
  return ds;
}

}  // namespace

TEST_CASE("load_csv: 3-row fixture equals the literal file contents") {
  const auto ds = load_csv(fs::path(FEMLOC_SOURCE_DIR) / "tests/fixtures/three_rows.csv", uji_schema());
  Matrix rssi(3, 3), coords(3, 2);
  rssi << -70, 100, -45.5, 100, -88, -60, -91, -77, 100;
  coords << -7641.5, 4864982.25, -7630, 4864990, -7620.75, 4864950.5;
  CHECK(ds.rssi == rssi);
  CHECK(ds.coords == coords);
  CHECK(ds.ap_names == std::vector<std::string>{"WAP001", "WAP002", "WAP003"});
  REQUIRE(ds.groups);
  CHECK(*ds.groups == std::vector<GroupLabel>{{1, 0}, {1, 1}, {2, 1}});
}

TEST_CASE("load_csv: full UJI header gives m = 520, p = 2 with labels") {
  std::ostringstream csv;
  for (int i = 1; i <= 520; ++i) {
    char name[8];
    std::snprintf(name, sizeof name, "WAP%03d", i);
    csv << name << ',';
  }
  csv << "LONGITUDE,LATITUDE,FLOOR,BUILDINGID,SPACEID\n";
  for (int r = 0; r < 2; ++r) {
    for (int i = 0; i < 520; ++i) csv << (i == r ? -60 : 100) << ',';
    csv << "-7600," << 4864900 + r << ',' << r << ",0,101\n";
  }
  std::istringstream in(csv.str());
  const auto ds = parse_csv(in, uji_schema());
  CHECK(ds.num_aps() == 520);
  CHECK(ds.coord_dim() == 2);
  CHECK(ds.samples() == 2);
  REQUIRE(ds.groups);
  CHECK((*ds.groups)[1] == GroupLabel{0, 1});
  CHECK(ds.rssi(1, 1) == -60);
}

TEST_CASE("load_csv: errors") {
  std::istringstream empty("");
  CHECK_THROWS_AS(parse_csv(empty, uji_schema()), DataError);
  std::istringstream header_only("WAP001,LONGITUDE,LATITUDE,FLOOR,BUILDINGID\n");
  CHECK_THROWS_AS(parse_csv(header_only, uji_schema()), DataError);
  std::istringstream missing("WAP001,LONGITUDE,FLOOR,BUILDINGID\n-50,1,0,0\n");
  CHECK_THROWS_AS(parse_csv(missing, uji_schema()), DataError);
  std::istringstream bad("WAP001,LONGITUDE,LATITUDE,FLOOR,BUILDINGID\n-50,1,2,0,0\n-5x,1,2,0,0\n");
  try {
    parse_csv(bad, uji_schema(), "bad.csv");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bad.csv:3") != std::string::npos);
  }
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv", uji_schema()), DataError);
}

TEST_CASE("write_csv / load_csv round trip with schema_for") {
  auto ds = grouped({2, 1}, 3);
  ds.rssi(0, 0) = 1.0 / 3.0;
  const auto path = fs::temp_directory_path() / "femloc_test_roundtrip.csv";
  write_csv(path, ds);
  const auto back = load_csv(path, schema_for(ds, 100.0));
  fs::remove(path);
  CHECK(back == ds);
}

TEST_CASE("schema JSON requires an AP column rule") {
  CHECK_THROWS_AS(nlohmann::json({{"coord_columns", {"x"}}}).get<SchemaConfig>(), ConfigError);
  const nlohmann::json j = uji_schema();
  const auto s = j.get<SchemaConfig>();
  CHECK(s.ap_prefix == "WAP");
  CHECK(s.floor_column == std::optional<std::string>("FLOOR"));
}

TEST_CASE("partition_tasks: 3 buildings with {4,4,5} floors gives 13 tasks") {
  const auto ds = grouped({4, 4, 5}, 6);
  const auto tasks = partition_tasks(ds, PartitionRule::BuildingFloor);
  CHECK(tasks.size() == 13);
  CHECK(tasks.front().id == "B0_F0");
  CHECK(tasks[3].id == "B0_F3");
  CHECK(tasks.back().id == "B2_F4");
  nn::Index total = 0;
  std::set<double> seen;
  for (const auto& t : tasks) {
    total += t.data.samples();
    for (Eigen::Index r = 0; r < t.data.samples(); ++r) CHECK(seen.insert(t.data.coords(r, 0)).second);
  }
  CHECK(total == ds.samples());
  CHECK(partition_tasks(ds, PartitionRule::Building).size() == 3);
  CHECK(partition_tasks(ds, PartitionRule::Floor).size() == 5);
}

TEST_CASE("partition_tasks: single group and missing labels") {
  CHECK(partition_tasks(grouped({1}, 4), PartitionRule::BuildingFloor).size() == 1);
  auto ds = grouped({1}, 4);
  ds.groups.reset();
  CHECK_THROWS_AS(partition_tasks(ds, PartitionRule::BuildingFloor), DataError);
  CHECK_THROWS_AS(partition_rule_from_string("room"), ConfigError);
  CHECK(partition_rule_from_string("building_floor") == PartitionRule::BuildingFloor);
}

TEST_CASE("split_support_query: 10 at 0.7 gives 7/3, deterministic, disjoint and exhaustive") {
  const auto ds = grouped({1}, 10);
  auto [s, q] = split_support_query(ds, 0.7, 42);
  CHECK(s.samples() == 7);
  CHECK(q.samples() == 3);
  auto [s2, q2] = split_support_query(ds, 0.7, 42);
  CHECK(s == s2);
  CHECK(q == q2);
  std::set<double> ids;
  for (Eigen::Index r = 0; r < 7; ++r) ids.insert(s.coords(r, 0));
  for (Eigen::Index r = 0; r < 3; ++r) CHECK(ids.insert(q.coords(r, 0)).second);
  CHECK(ids.size() == 10);

  CHECK_THROWS_AS(split_support_query(grouped({1}, 1), 0.7, 1), DataError);
  CHECK_THROWS_AS(split_support_query(ds, 1.0, 1), ConfigError);
}

TEST_CASE("LabelScaler: normalize then denormalize is the identity") {
  std::mt19937_64 rng(1);
  const Matrix c = oracle::random_matrix(12, 2, rng, -500, 500);
  const auto s = LabelScaler::fit(c);
  const Matrix n = s.normalize(c);
  CHECK(n.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
  CHECK((n.colwise().maxCoeff() - n.colwise().minCoeff()).array().isApproxToConstant(1.0, 1e-12));
  CHECK((s.denormalize(n) - c).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("task bundle round trip") {
  auto task = oracle::synthetic_task("room7", 6, 20, 3);
  const auto dir = fs::temp_directory_path() / "femloc_test_bundle";
  fs::remove_all(dir);
  write_task_bundle(dir, task, {{"role", "train"}});
  CHECK(fs::exists(dir / "support.csv"));
  CHECK(fs::exists(dir / "query.csv"));
  std::ifstream meta(dir / "meta.json");
  CHECK(nlohmann::json::parse(meta).at("role") == "train");
  const auto back = read_task_bundle(dir);
  fs::remove_all(dir);
  CHECK(back.id == "room7");
  CHECK(back.support == task.support);
  CHECK(back.query == task.query);
  CHECK(back.scaler == task.scaler);
}

TEST_CASE("path_loss_rssi: clamp at 0.1 m and 6.02 dB per doubling") {
  CHECK(path_loss_rssi(-30, 2.5, 0.0) == doctest::Approx(-30 - 25 * std::log10(0.1)));
  CHECK(path_loss_rssi(-30, 2.5, 0.05) == path_loss_rssi(-30, 2.5, 0.1));
  CHECK(path_loss_rssi(-30, 2.0, 5.0) - path_loss_rssi(-30, 2.0, 10.0) ==
        doctest::Approx(20 * std::log10(2.0)).epsilon(1e-12));
  CHECK(20 * std::log10(2.0) == doctest::Approx(6.02).epsilon(1e-3));
}

TEST_CASE("synth_environment: noiseless values match the closed form; seeded") {
  SyntheticEnvSpec s;
  s.num_aps = 5;
  s.samples = 30;
  s.noise_sigma = 0;
  s.seed = 9;
  const auto ds = synth_environment(s);
  const Matrix aps = synth_ap_positions(s);
  for (Eigen::Index r = 0; r < ds.samples(); ++r)
    for (Eigen::Index a = 0; a < 5; ++a) {
      const double dx = ds.coords(r, 0) - aps(a, 0), dy = ds.coords(r, 1) - aps(a, 1);
      const double dist = std::max(std::sqrt(dx * dx + dy * dy), 0.1);
      CHECK(ds.rssi(r, a) == doctest::Approx(s.tx_power - 10 * s.path_loss_exponent * std::log10(dist)));
    }
  CHECK(synth_environment(s) == ds);
  s.seed = 10;
  CHECK(!(synth_environment(s) == ds));
  CHECK((ds.coords.col(0).array() >= 0).all());
  CHECK((ds.coords.col(0).array() <= s.width).all());
}

TEST_CASE("synth_environment: detection floor marks weak readings with the sentinel") {
  SyntheticEnvSpec s;
  s.num_aps = 8;
  s.samples = 50;
  s.detection_floor = -60;
  const auto ds = synth_environment(s);
  CHECK(((ds.rssi.array() == s.sentinel) || (ds.rssi.array() >= -60)).all());
  CHECK((ds.rssi.array() == s.sentinel).any());
}

TEST_CASE("synthetic spec validation") {
  SyntheticEnvSpec s;
  s.num_aps = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.noise_sigma = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.path_loss_exponent = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  const nlohmann::json j = SyntheticEnvSpec{};
  CHECK(j.get<SyntheticEnvSpec>().num_aps == 20);
}
