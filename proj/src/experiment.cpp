#include "femloc/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <Eigen/QR>

#include "femloc/seeding.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace femloc {

namespace {

constexpr std::uint64_t kSplitStream = 0x73706c6974;  // "split"
constexpr std::uint64_t kProbeStream = 0x70726f6265;  // "probe"

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fmt(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw InternalError("cannot format number");
  return std::string(buf, ptr);
}

double parse_double(const std::string& s, const fs::path& path, int line) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError(path.string() + ":" + std::to_string(line) + ": bad number '" + s + "'");
  return v;
}

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; }))
      throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(threads, n); ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(m);
            if (!failure) failure = std::current_exception();
          }
        }
      });
  }
  if (failure) std::rethrow_exception(failure);
}

void say(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

fs::path bundle_dir(const ExperimentConfig& cfg, const std::string& id) { return cfg.phase_dir("preprocess") / id; }

std::vector<LocalizationTask> load_bundles(const ExperimentConfig& cfg, const std::vector<std::string>& ids) {
  std::vector<LocalizationTask> out;
  for (const auto& id : ids) {
    const auto dir = bundle_dir(cfg, id);
    if (!fs::exists(dir / "meta.json"))
      throw ConfigError("no task bundle for '" + id + "' under " + cfg.phase_dir("preprocess").string() +
                        "; run preprocess first");
    out.push_back(read_task_bundle(dir));
  }
  return out;
}

TaskSplit split_from_bundles(const ExperimentConfig& cfg) {
  const auto report_path = cfg.phase_dir("preprocess") / "report.json";
  if (!fs::exists(report_path))
    throw ConfigError("missing " + report_path.string() + "; run preprocess first");
  const auto report = read_json(report_path);
  TaskSplit split;
  try {
    split.train = report.at("train").get<std::vector<std::string>>();
    split.test = report.at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(report_path.string() + ": " + e.what());
  }
  return split;
}

ModelConfig model_from_bundles(const ExperimentConfig& cfg, const std::vector<std::string>& train_ids) {
  ModelConfig model = cfg.federation.model;
  if (cfg.latent_from_median) {
    std::vector<nn::Index> counts;
    for (const auto& id : train_ids) counts.push_back(read_json(bundle_dir(cfg, id) / "meta.json").at("m").get<nn::Index>());
    model.latent_dim = meta_signal_dim(counts);
  }
  return model;
}

fs::path default_checkpoint(const ExperimentConfig& cfg) { return cfg.phase_dir("meta-train") / "checkpoint.json"; }

json speed_json(const AccuracySpeed& s, double target) {
  json steps = json::array();
  for (const auto& n : s.steps) steps.push_back(n ? json(*n) : json(nullptr));
  return {{"target", target}, {"value", s.value}, {"reached", s.reached}, {"total", s.total}, {"steps", steps}};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto k = v.size();
  return k % 2 ? v[k / 2] : 0.5 * (v[k / 2 - 1] + v[k / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  if (name.empty() || name.find_first_of("/\\") != std::string::npos)
    throw ConfigError("experiment name must be non-empty and contain no path separators");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (checkpoint_every < 0) throw ConfigError("federation.checkpoint_every must be >= 0");
  if (datasets.empty() && synthetic.empty()) throw ConfigError("no datasets or synthetic environments configured");
  for (const auto& d : datasets)
    if (!fs::exists(d.path)) throw ConfigError("dataset '" + d.name + "': file not found: " + d.path.string());
  if (partition != "none") partition_rule_from_string(partition);
  for (const auto& s : synthetic) {
    if (s.id.empty()) throw ConfigError("synthetic environment without id");
    s.spec.validate();
  }
  if (!(support_ratio > 0 && support_ratio < 1)) throw ConfigError("support_ratio must lie in (0, 1)");
  if (!(train_ratio > 0 && train_ratio < 1)) throw ConfigError("train_ratio must lie in (0, 1)");
  std::set<std::string> train(train_tasks.begin(), train_tasks.end());
  if (train.size() != train_tasks.size()) throw ConfigError("train_tasks lists a task twice");
  std::set<std::string> test(test_tasks.begin(), test_tasks.end());
  if (test.size() != test_tasks.size()) throw ConfigError("test_tasks lists a task twice");
  for (const auto& t : test_tasks)
    if (train.count(t)) throw ConfigError("task '" + t + "' is in both train_tasks and test_tasks");
  preprocess.validate();
  federation.validate();
  if (meta_test.steps < 0) throw ConfigError("meta_test.steps must be >= 0");
  if (meta_test.batch_size < 1) throw ConfigError("meta_test.batch_size must be >= 1");
  if (meta_test.seeds.empty()) throw ConfigError("meta_test.seeds must not be empty");
  for (double a : meta_test.targets)
    if (!(a > 0)) throw ConfigError("meta_test.targets must be > 0");
  for (int n : meta_test.checkpoints)
    if (n < 1) throw ConfigError("meta_test.checkpoints must be >= 1");
  if (meta_test.knn_k < 1) throw ConfigError("meta_test.knn_k must be >= 1");
  if (!(theory.epsilon > 0)) throw ConfigError("theory.epsilon must be > 0");
  if (!(theory.rate > 0)) throw ConfigError("theory.rate must be > 0");
  if (theory.max_steps < 1) throw ConfigError("theory.max_steps must be >= 1");
  if (theory.lemma1_steps < 1) throw ConfigError("theory.lemma1_steps must be >= 1");
  for (double r : theory.lemma1_rates)
    if (!(r > 0)) throw ConfigError("theory.lemma1_rates must be > 0");
}

fs::path ExperimentConfig::root() const {
  if (!output_root.empty()) return output_root;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "out";
}

fs::path ExperimentConfig::phase_dir(const std::string& phase) const { return root() / name / phase; }

ExperimentConfig experiment_from_json(const json& j, const fs::path& base_dir) {
  check_keys(j,
             {"name", "output_dir", "seed", "workers", "datasets", "synthetic", "partition", "support_ratio",
              "train_tasks", "test_tasks", "train_ratio", "preprocess", "model", "latent_from_median", "federation",
              "meta_test", "theory"},
             "config");
  ExperimentConfig c;
  c.name = get_or<std::string>(j, "name", c.name, "config");
  if (j.contains("output_dir")) {
    fs::path p = get_or<std::string>(j, "output_dir", "", "config");
    c.output_root = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  }
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed, "config");
  c.workers = get_or<int>(j, "workers", c.workers, "config");
  c.partition = get_or<std::string>(j, "partition", c.partition, "config");
  c.support_ratio = get_or<double>(j, "support_ratio", c.support_ratio, "config");
  c.train_tasks = get_or<std::vector<std::string>>(j, "train_tasks", {}, "config");
  c.test_tasks = get_or<std::vector<std::string>>(j, "test_tasks", {}, "config");
  c.train_ratio = get_or<double>(j, "train_ratio", c.train_ratio, "config");
  c.latent_from_median = get_or<bool>(j, "latent_from_median", c.latent_from_median, "config");

  if (j.contains("datasets")) {
    if (!j["datasets"].is_array()) throw ConfigError("config.datasets: expected an array");
    for (const auto& d : j["datasets"]) {
      check_keys(d, {"name", "path", "schema", "schema_file"}, "config.datasets[]");
      DatasetSource src;
      src.name = get_or<std::string>(d, "name", "", "config.datasets[]");
      fs::path p = get_or<std::string>(d, "path", "", "config.datasets[]");
      if (p.empty()) throw ConfigError("config.datasets[]: path is required");
      src.path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      if (src.name.empty()) src.name = src.path.stem().string();
      if (d.contains("schema_file")) {
        fs::path sp = d["schema_file"].get<std::string>();
        src.schema = load_schema(sp.is_relative() && !base_dir.empty() ? base_dir / sp : sp);
      } else if (d.contains("schema")) {
        src.schema = d["schema"].get<SchemaConfig>();
      } else {
        throw ConfigError("dataset '" + src.name + "': schema or schema_file is required");
      }
      c.datasets.push_back(std::move(src));
    }
  }
  if (j.contains("synthetic")) {
    if (!j["synthetic"].is_array()) throw ConfigError("config.synthetic: expected an array");
    for (const auto& s : j["synthetic"]) {
      if (!s.is_object()) throw ConfigError("config.synthetic[]: expected an object");
      SyntheticSource src;
      src.id = get_or<std::string>(s, "id", "", "config.synthetic[]");
      json spec = s;
      spec.erase("id");
      src.spec = spec.get<SyntheticEnvSpec>();
      c.synthetic.push_back(std::move(src));
    }
  }
  if (j.contains("preprocess")) {
    check_keys(j["preprocess"], {"tau", "sentinel", "impute_offset", "powed_exponent"}, "config.preprocess");
    c.preprocess = j["preprocess"].get<PreprocessConfig>();
  }
  if (j.contains("model")) c.federation.model = j["model"].get<ModelConfig>();
  if (j.contains("federation")) {
    check_keys(j["federation"],
               {"rounds", "local_steps", "batch_size", "outer_rate", "early_stop", "convergence_tol", "patience",
                "checkpoint_every"},
               "config.federation");
    from_json(j["federation"], c.federation);
    c.checkpoint_every = get_or<int>(j["federation"], "checkpoint_every", c.checkpoint_every, "federation");
  }
  if (j.contains("meta_test")) {
    const auto& m = j["meta_test"];
    check_keys(m, {"steps", "batch_size", "seeds", "targets", "checkpoints", "knn_k"}, "config.meta_test");
    auto& p = c.meta_test;
    p.steps = get_or<int>(m, "steps", p.steps, "meta_test");
    p.batch_size = get_or<int>(m, "batch_size", p.batch_size, "meta_test");
    if (m.contains("seeds") && m["seeds"].is_number_integer()) {
      // a count: seeds 0..n-1
      const int n = m["seeds"].get<int>();
      if (n < 1) throw ConfigError("meta_test.seeds must be >= 1");
      p.seeds.clear();
      for (int s = 0; s < n; ++s) p.seeds.push_back(static_cast<std::uint64_t>(s));
    } else {
      p.seeds = get_or<std::vector<std::uint64_t>>(m, "seeds", p.seeds, "meta_test");
    }
    p.targets = get_or<std::vector<double>>(m, "targets", p.targets, "meta_test");
    p.checkpoints = get_or<std::vector<int>>(m, "checkpoints", p.checkpoints, "meta_test");
    p.knn_k = get_or<int>(m, "knn_k", p.knn_k, "meta_test");
  }
  if (j.contains("theory")) {
    const auto& t = j["theory"];
    check_keys(t, {"linear_toy", "epsilon", "rate", "max_steps", "lemma1_rates", "lemma1_steps", "constant_steps", "seed"},
               "config.theory");
    auto& p = c.theory;
    p.linear_toy = get_or<bool>(t, "linear_toy", p.linear_toy, "theory");
    p.epsilon = get_or<double>(t, "epsilon", p.epsilon, "theory");
    p.rate = get_or<double>(t, "rate", p.rate, "theory");
    p.max_steps = get_or<int>(t, "max_steps", p.max_steps, "theory");
    p.lemma1_rates = get_or<std::vector<double>>(t, "lemma1_rates", p.lemma1_rates, "theory");
    p.lemma1_steps = get_or<int>(t, "lemma1_steps", p.lemma1_steps, "theory");
    p.constant_steps = get_or<int>(t, "constant_steps", p.constant_steps, "theory");
    p.seed = get_or<std::uint64_t>(t, "seed", c.seed, "theory");
  } else {
    c.theory.seed = c.seed;
  }
  c.federation.seed = c.seed;
  c.federation.workers = c.workers;
  c.validate();
  return c;
}

json experiment_to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  if (!c.output_root.empty()) j["output_dir"] = c.output_root.string();
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["datasets"] = json::array();
  for (const auto& d : c.datasets) j["datasets"].push_back({{"name", d.name}, {"path", d.path.string()}, {"schema", d.schema}});
  j["synthetic"] = json::array();
  for (const auto& s : c.synthetic) {
    json spec = s.spec;
    spec["id"] = s.id;
    j["synthetic"].push_back(spec);
  }
  j["partition"] = c.partition;
  j["support_ratio"] = c.support_ratio;
  j["train_tasks"] = c.train_tasks;
  j["test_tasks"] = c.test_tasks;
  j["train_ratio"] = c.train_ratio;
  j["preprocess"] = c.preprocess;
  j["model"] = c.federation.model;
  j["latent_from_median"] = c.latent_from_median;
  json fed = c.federation;
  fed.erase("seed");
  fed.erase("workers");
  fed["checkpoint_every"] = c.checkpoint_every;
  j["federation"] = fed;
  const auto& m = c.meta_test;
  j["meta_test"] = {{"steps", m.steps},           {"batch_size", m.batch_size},   {"seeds", m.seeds},
                    {"targets", m.targets},       {"checkpoints", m.checkpoints}, {"knn_k", m.knn_k}};
  const auto& t = c.theory;
  j["theory"] = {{"linear_toy", t.linear_toy},     {"epsilon", t.epsilon},           {"rate", t.rate},
                 {"max_steps", t.max_steps},       {"lemma1_rates", t.lemma1_rates}, {"lemma1_steps", t.lemma1_steps},
                 {"constant_steps", t.constant_steps}, {"seed", t.seed}};
  return j;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
    if (!node->is_object()) throw ConfigError("override '" + assignment + "': '" + part + "' is not inside an object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

ExperimentConfig load_experiment(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(j, o);
  return experiment_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Tasks

std::vector<LocalizationTask> build_tasks(const ExperimentConfig& cfg, std::vector<PreprocessReport>* reports) {
  struct Raw {
    std::string id;
    FingerprintDataset data;
    double sentinel;
  };
  std::vector<Raw> raw;
  for (const auto& src : cfg.datasets) {
    auto ds = load_csv(src.path, src.schema);
    const std::string prefix = cfg.datasets.size() > 1 ? src.name + "_" : "";
    if (cfg.partition == "none") {
      raw.push_back({src.name, std::move(ds), src.schema.sentinel});
    } else {
      for (auto& part : partition_tasks(ds, partition_rule_from_string(cfg.partition)))
        raw.push_back({prefix + part.id, std::move(part.data), src.schema.sentinel});
    }
  }
  for (const auto& s : cfg.synthetic) raw.push_back({s.id, synth_environment(s.spec), s.spec.sentinel});
  std::sort(raw.begin(), raw.end(), [](const Raw& a, const Raw& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < raw.size(); ++i)
    if (raw[i].id == raw[i - 1].id) throw ConfigError("duplicate task id '" + raw[i].id + "'");

  std::vector<LocalizationTask> tasks;
  if (reports) reports->clear();
  for (auto& r : raw) {
    PreprocessConfig pc = cfg.preprocess;
    pc.sentinel = r.sentinel;
    Preprocessed pp;
    try {
      pp = preprocess(r.data, pc);
    } catch (const DataError& e) {
      throw DataError("task " + r.id + ": " + e.what());
    }
    if (pp.data.samples() < 2) throw DataError("task " + r.id + ": need at least 2 samples to split");
    auto [support, query] = split_support_query(pp.data, cfg.support_ratio, derive_seed(cfg.seed, kSplitStream, fnv1a(r.id)));
    tasks.push_back(make_task(r.id, std::move(support), std::move(query)));
    if (reports) reports->push_back(std::move(pp.report));
  }
  return tasks;
}

TaskSplit resolve_split(const ExperimentConfig& cfg, const std::vector<std::string>& ids) {
  const std::set<std::string> known(ids.begin(), ids.end());
  for (const auto* list : {&cfg.train_tasks, &cfg.test_tasks})
    for (const auto& t : *list)
      if (!known.count(t)) throw ConfigError("task '" + t + "' is not produced by any configured source");
  TaskSplit s;
  if (!cfg.train_tasks.empty() || !cfg.test_tasks.empty()) {
    const std::set<std::string> train(cfg.train_tasks.begin(), cfg.train_tasks.end());
    const std::set<std::string> test(cfg.test_tasks.begin(), cfg.test_tasks.end());
    for (const auto& id : ids) {
      const bool in_train = cfg.train_tasks.empty() ? !test.count(id) : train.count(id) > 0;
      const bool in_test = cfg.test_tasks.empty() ? !train.count(id) : test.count(id) > 0;
      if (in_train) s.train.push_back(id);
      if (in_test) s.test.push_back(id);
    }
  } else {
    if (ids.size() < 2) throw ConfigError("need at least two tasks to split into train and test");
    const auto k = static_cast<double>(ids.size());
    auto n = static_cast<std::size_t>(std::llround(cfg.train_ratio * k));
    n = std::clamp<std::size_t>(n, 1, ids.size() - 1);
    s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
    s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end());
  }
  if (s.train.empty()) throw ConfigError("no training tasks");
  return s;
}

ModelConfig effective_model(const ExperimentConfig& cfg, const std::vector<LocalizationTask>& train) {
  ModelConfig model = cfg.federation.model;
  if (cfg.latent_from_median) {
    std::vector<nn::Index> counts;
    for (const auto& t : train) counts.push_back(t.num_aps());
    model.latent_dim = meta_signal_dim(counts);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Files

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_round_log(const fs::path& path, const std::vector<RoundReport>& rounds) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "round,mean_query_loss";
  if (!rounds.empty())
    for (std::size_t k = 0; k < rounds.front().client_losses.size(); ++k) out << ",client_" << k;
  out << '\n';
  for (const auto& r : rounds) {
    out << r.round << ',' << fmt(r.mean_query_loss);
    for (double l : r.client_losses) out << ',' << fmt(l);
    out << '\n';
  }
}

void write_trace_csv(const fs::path& path, const AdaptationTrace& trace) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "step,support_loss,query_mde\n";
  for (const auto& s : trace.steps) out << s.step << ',' << fmt(s.support_loss) << ',' << fmt(s.query_mde) << '\n';
}

AdaptationTrace read_trace_csv(const fs::path& path, std::string task_id, InitMode mode, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  AdaptationTrace t;
  t.task_id = std::move(task_id);
  t.mode = mode;
  t.seed = seed;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 3) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    t.steps.push_back({static_cast<int>(parse_double(cells[0], path, lineno)), parse_double(cells[1], path, lineno),
                       parse_double(cells[2], path, lineno)});
  }
  try {
    t.validate();
  } catch (const InternalError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return t;
}

void write_cdf_csv(const fs::path& path, const std::vector<CdfPoint>& curve) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "error,fraction\n";
  for (const auto& p : curve) out << fmt(p.error) << ',' << fmt(p.fraction) << '\n';
}

Network load_meta_checkpoint(const fs::path& path, const ModelConfig& model) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string() + " (run meta-train first)");
  const Checkpoint ck = load_checkpoint(path);
  const auto it = ck.parts.find(Part::Meta);
  if (it == ck.parts.end()) throw ConfigError("checkpoint " + path.string() + " has no meta part");
  const Network& theta = it->second;
  const auto d = nn::input_size(theta);
  const auto n = nn::output_size(theta);
  if (d != model.latent_dim || n != model.feature_dim || ck.config.coord_dim != model.coord_dim) {
    throw ConfigError("checkpoint " + path.string() + " is incompatible: it maps d=" + std::to_string(d) +
                      " -> n=" + std::to_string(n) + " with p=" + std::to_string(ck.config.coord_dim) +
                      ", config expects d=" + std::to_string(model.latent_dim) +
                      " -> n=" + std::to_string(model.feature_dim) + " with p=" + std::to_string(model.coord_dim));
  }
  const auto reference = make_meta_network(model, 0);
  for (std::size_t i = 0; i < reference.size() || i < theta.size(); ++i) {
    if (i >= reference.size() || i >= theta.size() || reference[i].weights.rows() != theta[i].weights.rows() ||
        reference[i].weights.cols() != theta[i].weights.cols() || reference[i].activation != theta[i].activation)
      throw ConfigError("checkpoint " + path.string() + ": meta hidden layers differ from model.meta_hidden");
  }
  return theta;
}

// ---------------------------------------------------------------------------
// Metrics records

json run_metrics(const AdaptationTrace& trace, const MetaTestPlan& plan) {
  json j;
  j["task"] = trace.task_id;
  j["mode"] = to_string(trace.mode);
  j["seed"] = trace.seed;
  j["steps"] = trace.steps.size();
  j["mde_final"] = trace.steps.empty() ? json(nullptr) : json(trace.steps.back().query_mde);
  j["im_A"] = json::array();
  for (double a : plan.targets) {
    if (trace.steps.empty()) {
      j["im_A"].push_back({{"target", a}, {"value", 0.0}, {"reached", false}, {"step", nullptr}});
      continue;
    }
    const auto s = adaptation_speed_accuracy(trace, a, plan.batch_size);
    j["im_A"].push_back({{"target", a},
                         {"value", s.value},
                         {"reached", s.reached > 0},
                         {"step", s.steps.front() ? json(*s.steps.front()) : json(nullptr)}});
  }
  j["im_nstar"] = json::array();
  for (int n : plan.checkpoints) {
    if (static_cast<int>(trace.steps.size()) < n) {
      j["im_nstar"].push_back({{"n_star", n}, {"value", nullptr}, {"mde", nullptr}});
      continue;
    }
    j["im_nstar"].push_back(
        {{"n_star", n}, {"value", adaptation_speed_steps(trace, n, plan.batch_size)}, {"mde", trace.mde_at(n)}});
  }
  return j;
}

json summarize(const std::vector<AdaptationTrace>& traces, const MetaTestPlan& plan) {
  std::map<std::string, std::map<InitMode, std::vector<AdaptationTrace>>> by_task;
  for (const auto& t : traces) by_task[t.task_id][t.mode].push_back(t);
  json out = json::array();
  for (auto& [task, modes] : by_task) {
    for (auto& [mode, list] : modes)
      std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
    const auto& ri = modes[InitMode::Random];
    const auto& mi = modes[InitMode::Meta];
    json row;
    row["task"] = task;
    row["seeds"] = std::max(ri.size(), mi.size());
    row["accuracy_based"] = json::array();
    const int horizon = ri.empty() ? 0 : static_cast<int>(ri.front().steps.size());
    for (double a : plan.targets) {
      json entry{{"target", a}};
      std::optional<AccuracySpeed> sr, sm;
      if (!ri.empty() && horizon > 0) sr = adaptation_speed_accuracy(ri, a, plan.batch_size);
      if (!mi.empty() && !mi.front().steps.empty()) sm = adaptation_speed_accuracy(mi, a, plan.batch_size);
      entry["RI"] = sr ? speed_json(*sr, a) : json(nullptr);
      entry["MI"] = sm ? speed_json(*sm, a) : json(nullptr);
      // mean n_A over seeds when every run reached the target
      json improvement = nullptr;
      if (sr && sm && sr->all_reached() && sm->all_reached() && sr->total > 0 && sm->total > 0) {
        double nr = 0, nm = 0;
        for (const auto& s : sr->steps) nr += *s;
        for (const auto& s : sm->steps) nm += *s;
        improvement = improvement_percent(nm / sm->total, nr / sr->total, ImprovementKind::Steps);
      }
      entry["improvement_percent"] = improvement;
      // paired seeds: RI and MI runs sharing a seed
      if (sr && sm && ri.size() == mi.size()) {
        int wins = 0;
        std::vector<double> reductions;
        for (std::size_t i = 0; i < ri.size(); ++i) {
          const auto a_ri = ri[i].steps_to_reach(a), a_mi = mi[i].steps_to_reach(a);
          if (a_mi && (!a_ri || *a_mi < *a_ri)) ++wins;
          const double nr = a_ri ? *a_ri : horizon + 1, nm = a_mi ? *a_mi : horizon + 1;
          reductions.push_back(100.0 * (nr - nm) / nr);
        }
        entry["paired_wins"] = wins;
        entry["median_step_reduction_percent"] = median(reductions);
      }
      row["accuracy_based"].push_back(entry);
    }
    row["step_based"] = json::array();
    for (int n : plan.checkpoints) {
      auto mean_mde = [&](const std::vector<AdaptationTrace>& list) -> std::optional<double> {
        if (list.empty()) return std::nullopt;
        double sum = 0;
        for (const auto& t : list) {
          if (static_cast<int>(t.steps.size()) < n) return std::nullopt;
          sum += t.mde_at(n);
        }
        return sum / static_cast<double>(list.size());
      };
      const auto r = mean_mde(ri), m = mean_mde(mi);
      json entry{{"n_star", n}};
      entry["RI"] = r ? json{{"mde", *r}, {"value", speed_from_mde(*r, plan.batch_size)}} : json(nullptr);
      entry["MI"] = m ? json{{"mde", *m}, {"value", speed_from_mde(*m, plan.batch_size)}} : json(nullptr);
      entry["improvement_percent"] =
          r && m && *r > 0 ? json(improvement_percent(*m, *r, ImprovementKind::Accuracy)) : json(nullptr);
      row["step_based"].push_back(entry);
    }
    out.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Theory probes

namespace {

template <ProbeObjective Obj>
ModeProbe run_mode(Obj obj, const TheoryPlan& plan, double delta1) {
  ModeProbe m;
  const double g_init = obj.support_gradient().norm();
  auto trace = epsilon_accuracy_steps(obj, plan.epsilon, plan.max_steps, plan.rate);
  m.steps = trace.steps;
  m.initial_squared_grad_norm = trace.initial_squared_grad_norm;
  m.final_squared_grad_norm =
      trace.squared_grad_norms.empty() ? trace.initial_squared_grad_norm : trace.squared_grad_norms.back();
  m.squared_grad_norms = std::move(trace.squared_grad_norms);
  m.bound_squared = step_bound_squared(plan.epsilon, delta1, plan.rate, g_init, obj.support_gradient().norm());
  return m;
}

template <ProbeObjective Obj>
TheoryProbeReport probe(const std::string& id, Obj ri, Obj mi, const TheoryPlan& plan) {
  TheoryProbeReport r;
  r.task_id = id;
  r.epsilon = plan.epsilon;
  r.rate = plan.rate;
  const auto c_ri = estimate_constants(ri, plan.rate, plan.constant_steps);
  const auto c_mi = estimate_constants(mi, plan.rate, plan.constant_steps);
  r.constants.delta1 = std::max(c_ri.delta1, c_mi.delta1);
  r.lemma1_rates = plan.lemma1_rates;
  r.lemma1_steps = plan.lemma1_steps;
  r.lemma1_residuals = lemma1_probe(ri, plan.lemma1_rates, plan.lemma1_steps);
  r.random_init = run_mode(ri, plan, r.constants.delta1);
  r.meta_init = run_mode(mi, plan, r.constants.delta1);
  double zeta = std::max(c_ri.zeta, c_mi.zeta);
  for (const auto* m : {&r.random_init, &r.meta_init}) {
    zeta = std::max(zeta, std::sqrt(m->initial_squared_grad_norm));
    for (double g2 : m->squared_grad_norms) zeta = std::max(zeta, std::sqrt(g2));
  }
  r.constants.zeta = zeta;
  return r;
}

}  // namespace

TheoryProbeReport probe_linear_toy(const TheoryPlan& plan) {
  auto ri = LinearLeastSquares::random(8, 2, 40, 20, derive_seed(plan.seed, kProbeStream));
  // warm start halfway to the support least-squares fit
  const Matrix& a = ri.support_design();
  const Matrix w_star = a.transpose().colPivHouseholderQr().solve(ri.support_targets().transpose()).transpose();
  LinearLeastSquares mi = ri;
  mi.set_parameters(Vector((0.5 * (ri.weights() + w_star)).reshaped()));
  return probe("linear_toy", ri, mi, plan);
}

TheoryProbeReport probe_task(const LocalizationTask& task, const ModelConfig& model, const Network* theta,
                             const TheoryPlan& plan) {
  ModelConfig cfg = model;
  cfg.input_dim = task.num_aps();
  cfg.coord_dim = task.coord_dim();
  cfg.optimizer = OptimizerKind::Sgd;
  const auto seed = derive_seed(plan.seed, kProbeStream, fnv1a(task.id));
  ClientModel random_model(cfg, seed);
  ClientModel meta_model = random_model;
  if (theta) meta_model.set_meta(*theta);
  return probe(task.id, CompositeObjective(random_model, task), CompositeObjective(meta_model, task), plan);
}

// ---------------------------------------------------------------------------
// Commands

fs::path cmd_preprocess(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  std::vector<PreprocessReport> reports;
  const auto tasks = build_tasks(cfg, &reports);
  std::vector<std::string> ids;
  for (const auto& t : tasks) ids.push_back(t.id);
  const auto split = resolve_split(cfg, ids);
  const std::set<std::string> train(split.train.begin(), split.train.end());
  const std::set<std::string> test(split.test.begin(), split.test.end());

  const auto dir = cfg.phase_dir("preprocess");
  json summary;
  summary["tasks"] = json::array();
  std::vector<nn::Index> train_counts;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    const std::string role = train.count(t.id) ? "train" : test.count(t.id) ? "test" : "unused";
    write_task_bundle(dir / t.id, t, {{"role", role}, {"preprocess", reports[i]}});
    if (role == "train") train_counts.push_back(t.num_aps());
    summary["tasks"].push_back({{"id", t.id},
                                {"role", role},
                                {"m", t.num_aps()},
                                {"support_samples", t.support.samples()},
                                {"query_samples", t.query.samples()},
                                {"dropped_columns", reports[i].dropped_columns.size()}});
    say(progress, "task " + t.id + " (" + role + "): m=" + std::to_string(t.num_aps()) +
                      " support=" + std::to_string(t.support.samples()) + " query=" + std::to_string(t.query.samples()));
  }
  summary["train"] = split.train;
  summary["test"] = split.test;
  summary["meta_signal_dim"] = meta_signal_dim(train_counts);
  summary["config"] = experiment_to_json(cfg);
  write_json(dir / "report.json", summary);
  return dir;
}

fs::path cmd_meta_train(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const auto split = split_from_bundles(cfg);
  auto tasks = load_bundles(cfg, split.train);
  FederationConfig fc = cfg.federation;
  fc.model = effective_model(cfg, tasks);

  const auto dir = cfg.phase_dir("meta-train");
  fs::create_directories(dir);
  std::ofstream log(dir / "rounds.csv");
  if (!log) throw DataError("cannot write " + (dir / "rounds.csv").string());
  log << "round,mean_query_loss";
  for (const auto& t : tasks) log << ',' << t.id;
  log << '\n';

  TrainHooks hooks;
  const int every = std::max(1, fc.rounds / 20);
  auto snapshot = [&](const MetaModel& meta, const fs::path& path) {
    Checkpoint ck;
    ck.config = fc.model;
    ck.round = meta.round;
    ck.parts[Part::Meta] = meta.theta;
    save_checkpoint(path, ck);
  };
  hooks.on_round = [&](const RoundReport& r, const MetaModel& meta) {
    if (cfg.checkpoint_every > 0 && r.round % cfg.checkpoint_every == 0)
      snapshot(meta, dir / ("checkpoint_r" + std::to_string(r.round) + ".json"));
    log << r.round << ',' << fmt(r.mean_query_loss);
    for (double l : r.client_losses) log << ',' << fmt(l);
    log << '\n';
    log.flush();
    if (r.round % every == 0 || r.round == 1)
      say(progress, "round " + std::to_string(r.round) + "/" + std::to_string(fc.rounds) +
                        " mean query loss " + fmt(r.mean_query_loss));
  };
  const auto result = meta_train(fc, std::move(tasks), hooks);

  snapshot(result.meta, dir / "checkpoint.json");
  write_json(dir / "summary.json", {{"rounds_run", result.rounds.size()},
                                    {"converged", result.converged},
                                    {"initial_loss", result.rounds.empty() ? json(nullptr)
                                                                           : json(result.rounds.front().mean_query_loss)},
                                    {"final_loss", result.rounds.empty() ? json(nullptr)
                                                                         : json(result.rounds.back().mean_query_loss)},
                                    {"train_tasks", split.train},
                                    {"model", fc.model},
                                    {"federation", fc}});
  return dir;
}

fs::path cmd_meta_test(const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint,
                       const ProgressFn& progress) {
  cfg.validate();
  const auto split = split_from_bundles(cfg);
  if (split.test.empty()) throw ConfigError("no test tasks");
  const auto tasks = load_bundles(cfg, split.test);
  const ModelConfig model = model_from_bundles(cfg, split.train);
  const Network theta = load_meta_checkpoint(checkpoint.value_or(default_checkpoint(cfg)), model);
  for (const auto& t : tasks)
    if (t.coord_dim() != model.coord_dim)
      throw ConfigError("task " + t.id + " has p=" + std::to_string(t.coord_dim()) +
                        " coordinates but the model maps n=" + std::to_string(model.feature_dim) +
                        " -> p=" + std::to_string(model.coord_dim));

  const auto dir = cfg.phase_dir("meta-test");
  MetaTestConfig mc;
  mc.model = model;
  mc.steps = cfg.meta_test.steps;
  mc.batch_size = cfg.meta_test.batch_size;

  struct Job {
    std::size_t task;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (auto s : cfg.meta_test.seeds) jobs.push_back({t, s});
  std::vector<AdaptationTrace> traces(jobs.size() * 2);
  std::mutex say_mutex;

  parallel_for(jobs.size(), cfg.workers, [&](std::size_t i) {
    const auto& task = tasks[jobs[i].task];
    const auto seed = jobs[i].seed;
    for (int k = 0; k < 2; ++k) {
      const bool meta = k == 1;
      auto res = meta_test(task, meta ? &theta : nullptr, mc, seed);
      const auto run_dir = dir / task.id / to_string(res.trace.mode) / std::to_string(seed);
      write_trace_csv(run_dir / "trace.csv", res.trace);
      write_json(run_dir / "metrics.json", run_metrics(res.trace, cfg.meta_test));
      const Matrix pred = predict_coords(res.model, task, task.query);
      const Vector err = distance_errors(pred, task.query.coords);
      write_cdf_csv(run_dir / "cdf.csv", cdf_curve(std::vector<double>(err.begin(), err.end())));
      traces[2 * i + static_cast<std::size_t>(k)] = std::move(res.trace);
    }
    std::lock_guard lock(say_mutex);
    say(progress, "meta-test " + task.id + " seed " + std::to_string(seed) + " done");
  });

  json knn = json::object();
  for (const auto& task : tasks) {
    if (task.support.samples() < cfg.meta_test.knn_k) {
      knn[task.id] = {{"k", cfg.meta_test.knn_k}, {"mde", nullptr}, {"note", "support smaller than k"}};
      continue;
    }
    const auto res = knn_baseline(task, cfg.meta_test.knn_k);
    const Vector err = distance_errors(res.predictions, task.query.coords);
    write_cdf_csv(dir / task.id / "KNN" / "cdf.csv", cdf_curve(std::vector<double>(err.begin(), err.end())));
    knn[task.id] = {{"k", cfg.meta_test.knn_k}, {"mde", res.mde}};
  }
  write_json(dir / "summary.json", {{"tasks", summarize(traces, cfg.meta_test)}, {"knn", knn}});
  return dir;
}

fs::path cmd_theory_probe(const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint,
                          const ProgressFn& progress) {
  cfg.validate();
  const auto dir = cfg.phase_dir("theory-probe");
  if (cfg.theory.linear_toy) {
    write_json(dir / "linear_toy" / "report.json", probe_linear_toy(cfg.theory));
    say(progress, "linear toy probe written");
    return dir;
  }
  const auto split = split_from_bundles(cfg);
  if (split.test.empty()) throw ConfigError("no test tasks");
  const auto tasks = load_bundles(cfg, split.test);
  const ModelConfig model = model_from_bundles(cfg, split.train);
  const Network theta = load_meta_checkpoint(checkpoint.value_or(default_checkpoint(cfg)), model);
  std::vector<TheoryProbeReport> reports(tasks.size());
  parallel_for(tasks.size(), cfg.workers,
               [&](std::size_t i) { reports[i] = probe_task(tasks[i], model, &theta, cfg.theory); });
  for (const auto& r : reports) {
    write_json(dir / r.task_id / "report.json", r);
    say(progress, "task " + r.task_id + ": N0=" + (r.random_init.steps ? std::to_string(*r.random_init.steps) : "-") +
                      " Nm=" + (r.meta_init.steps ? std::to_string(*r.meta_init.steps) : "-"));
  }
  return dir;
}

fs::path cmd_report(const ExperimentConfig& cfg, const ProgressFn& progress) {
  cfg.validate();
  const auto test_dir = cfg.phase_dir("meta-test");
  if (!fs::is_directory(test_dir)) throw ConfigError("no meta-test output under " + test_dir.string());
  std::vector<AdaptationTrace> traces;
  std::vector<fs::path> task_dirs;
  for (const auto& e : fs::directory_iterator(test_dir))
    if (e.is_directory()) task_dirs.push_back(e.path());
  std::sort(task_dirs.begin(), task_dirs.end());
  for (const auto& td : task_dirs) {
    for (const char* mode : {"RI", "MI"}) {
      const auto md = td / mode;
      if (!fs::is_directory(md)) continue;
      std::vector<fs::path> seeds;
      for (const auto& e : fs::directory_iterator(md))
        if (e.is_directory()) seeds.push_back(e.path());
      std::sort(seeds.begin(), seeds.end());
      for (const auto& sd : seeds) {
        std::uint64_t seed = 0;
        const auto name = sd.filename().string();
        auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), seed);
        if (ec != std::errc() || ptr != name.data() + name.size()) continue;
        traces.push_back(read_trace_csv(sd / "trace.csv", td.filename().string(), init_mode_from_string(mode), seed));
      }
    }
  }
  if (traces.empty()) throw DataError("no traces under " + test_dir.string());
  const auto table = summarize(traces, cfg.meta_test);

  const auto dir = cfg.phase_dir("report");
  write_json(dir / "report.json", table);
  std::ofstream csv(dir / "table.csv");
  if (!csv) throw DataError("cannot write " + (dir / "table.csv").string());
  auto cell = [](const json& v) { return v.is_null() ? std::string() : fmt(v.get<double>()); };
  csv << "task,metric,parameter,RI,MI,improvement_percent\n";
  for (const auto& row : table) {
    const auto task = row["task"].get<std::string>();
    for (const auto& e : row["accuracy_based"])
      csv << task << ",Im_A," << fmt(e["target"].get<double>()) << ','
          << (e["RI"].is_null() ? "" : cell(e["RI"]["value"])) << ','
          << (e["MI"].is_null() ? "" : cell(e["MI"]["value"])) << ',' << cell(e["improvement_percent"]) << '\n';
    for (const auto& e : row["step_based"])
      csv << task << ",Im_nstar," << e["n_star"].get<int>() << ','
          << (e["RI"].is_null() ? "" : cell(e["RI"]["value"])) << ','
          << (e["MI"].is_null() ? "" : cell(e["MI"]["value"])) << ',' << cell(e["improvement_percent"]) << '\n';
  }
  say(progress, "report over " + std::to_string(traces.size()) + " traces");
  return dir;
}

}  // namespace femloc
