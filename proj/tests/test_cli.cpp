#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

const std::string kCli = FEMLOC_CLI_PATH;
const fs::path kSmoke = fs::path(FEMLOC_SOURCE_DIR) / "configs/synthetic_smoke.json";

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const auto out = fs::temp_directory_path() / "femloc_cli_stdout.txt";
  const std::string cmd = env + " \"" + kCli + "\" " + args + " > \"" + out.string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::ostringstream s;
  s << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, s.str()};
}

std::string quoted(const fs::path& p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run("--help").code == 0);
  CHECK(run("").code == 2);
  CHECK(run("no-such-command").code == 2);
  CHECK(run("preprocess").code == 2);  // --config is required
  CHECK(run("preprocess -c /nonexistent/config.json").code == 2);
}

TEST_CASE("config errors exit 2") {
  const auto dir = fs::temp_directory_path() / "femloc_cli_cfg";
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << "{\"name\": \"x\", \"colour\": 1}";
  CHECK(run("show-config -c " + quoted(dir / "bad.json")).code == 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(run("show-config -c " + quoted(dir / "broken.json")).code == 2);
  CHECK(run("show-config -c " + quoted(kSmoke) + " --set federation.rounds=-4").code == 2);
  fs::remove_all(dir);
}

TEST_CASE("data errors exit 3") {
  const auto dir = fs::temp_directory_path() / "femloc_cli_data";
  fs::create_directories(dir);
  std::ofstream(dir / "empty.csv") << "WAP001,LONGITUDE,LATITUDE,FLOOR,BUILDINGID\n";
  std::ofstream(dir / "cfg.json") << R"({"name": "d", "datasets": [{"name": "u", "path": "empty.csv",
    "schema": {"ap_prefix": "WAP", "building_col": "BUILDINGID", "floor_col": "FLOOR"}}]})";
  CHECK(run("preprocess -q -c " + quoted(dir / "cfg.json") + " -o " + quoted(dir / "out")).code == 3);
  fs::remove_all(dir);
}

TEST_CASE("show-config applies overrides") {
  const auto r = run("show-config -c " + quoted(kSmoke) + " --set federation.rounds=9 -s name=renamed");
  CHECK(r.code == 0);
  CHECK(r.out.find("\"rounds\": 9") != std::string::npos);
  CHECK(r.out.find("\"renamed\"") != std::string::npos);
}

TEST_CASE("smoke run: every phase exits 0 with the documented layout") {
  const auto root = fs::temp_directory_path() / "femloc_cli_smoke";
  fs::remove_all(root);
  const std::string env = "FEMLOC_OUT=" + quoted(root);
  const std::string cfg = " -q -c " + quoted(kSmoke);
  for (const char* phase : {"preprocess", "meta-train", "meta-test", "theory-probe", "report"}) {
    const auto r = run(std::string(phase) + cfg, env);
    INFO(phase);
    CHECK(r.code == 0);
    CHECK(r.out.find((root / "smoke").string()) == 0);
  }
  const auto base = root / "smoke";
  CHECK(fs::exists(base / "preprocess" / "room00" / "support.csv"));
  CHECK(fs::exists(base / "meta-train" / "rounds.csv"));
  CHECK(fs::exists(base / "meta-train" / "checkpoint.json"));
  CHECK(fs::exists(base / "meta-test" / "room03" / "MI" / "0" / "trace.csv"));
  CHECK(fs::exists(base / "meta-test" / "room03" / "RI" / "1" / "metrics.json"));
  CHECK(fs::exists(base / "report" / "table.csv"));

  // explicit checkpoint and an -o override
  const auto other = root / "elsewhere";
  CHECK(run("meta-test" + cfg + " -o " + quoted(other)).code == 2);  // nothing preprocessed there yet
  CHECK(run("preprocess" + cfg + " -o " + quoted(other)).code == 0);
  const auto r = run("meta-test" + cfg + " -o " + quoted(other) + " --checkpoint " +
                     quoted(base / "meta-train" / "checkpoint.json") + " --set meta_test.seeds=1");
  CHECK(r.code == 0);
  CHECK(fs::exists(other / "smoke" / "meta-test" / "room03" / "MI" / "0" / "trace.csv"));
  CHECK(run("meta-test" + cfg + " --checkpoint /nonexistent.json").code == 2);
  fs::remove_all(root);
}
