#pragma once

// Experiment orchestration behind the command-line tool. One JSON config per
// experiment; every phase writes under {output_root}/{name}/{phase}/.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "femloc/data.hpp"
#include "femloc/federation.hpp"
#include "femloc/metrics.hpp"
#include "femloc/preprocess.hpp"
#include "femloc/theory.hpp"

namespace femloc {

/// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "FEMLOC_OUT";

struct DatasetSource {
  std::string name;
  std::filesystem::path path;
  SchemaConfig schema;
};

struct SyntheticSource {
  std::string id;
  SyntheticEnvSpec spec;
};

struct MetaTestPlan {
  int steps = 300;
  int batch_size = 32;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> targets = {5.0};  // A, meters
  std::vector<int> checkpoints = {50, 100};  // n*
  int knn_k = 11;
};

struct TheoryPlan {
  bool linear_toy = false;  // probe a random least-squares problem instead of the model
  double epsilon = 1e-3;
  double rate = 1e-3;  // mu, plain SGD
  int max_steps = 300;
  std::vector<double> lemma1_rates = {1e-2, 1e-3, 1e-4};
  int lemma1_steps = 5;
  int constant_steps = 20;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::filesystem::path output_root;  // empty: $FEMLOC_OUT, then ./out
  std::uint64_t seed = 0;
  int workers = 1;

  std::vector<DatasetSource> datasets;
  std::vector<SyntheticSource> synthetic;
  std::string partition = "building_floor";  // building | floor | building_floor | none
  double support_ratio = 0.7;

  std::vector<std::string> train_tasks;
  std::vector<std::string> test_tasks;
  double train_ratio = 10.0 / 13.0;  // used when neither list is given

  PreprocessConfig preprocess;
  bool latent_from_median = false;  // d from the median AP count of the training tasks
  FederationConfig federation;       // federation.model holds the model block
  int checkpoint_every = 0;          // also write meta-train/checkpoint_r{round}.json every C rounds
  MetaTestPlan meta_test;
  TheoryPlan theory;

  /// Throws ConfigError on inconsistent settings (overlapping task lists,
  /// missing files, bad ranges).
  void validate() const;
  std::filesystem::path root() const;
  std::filesystem::path phase_dir(const std::string& phase) const;
};

/// Relative dataset paths are resolved against `base_dir`. Unknown top-level
/// keys are rejected.
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json experiment_to_json(const ExperimentConfig& c);

/// Applies "a.b.c=value" to `j`; value is parsed as JSON, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// All tasks named by the config, in id order.
std::vector<LocalizationTask> build_tasks(const ExperimentConfig& cfg, std::vector<PreprocessReport>* reports = nullptr);

struct TaskSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};
TaskSplit resolve_split(const ExperimentConfig& cfg, const std::vector<std::string>& ids);

// ---------------------------------------------------------------------------
// Commands. Each returns the directory it wrote.

using ProgressFn = std::function<void(const std::string&)>;

std::filesystem::path cmd_preprocess(const ExperimentConfig& cfg, const ProgressFn& progress = {});
std::filesystem::path cmd_meta_train(const ExperimentConfig& cfg, const ProgressFn& progress = {});
/// `checkpoint` defaults to the meta-train output of the same experiment.
std::filesystem::path cmd_meta_test(const ExperimentConfig& cfg,
                                    const std::optional<std::filesystem::path>& checkpoint = {},
                                    const ProgressFn& progress = {});
/// The linear toy needs no checkpoint; otherwise MI uses `checkpoint` (default
/// as for meta-test).
std::filesystem::path cmd_theory_probe(const ExperimentConfig& cfg,
                                       const std::optional<std::filesystem::path>& checkpoint = {},
                                       const ProgressFn& progress = {});
/// Re-reads the meta-test traces and writes the aggregate table.
std::filesystem::path cmd_report(const ExperimentConfig& cfg, const ProgressFn& progress = {});

/// Model config used for every phase: federation.model, with d set from the
/// median training AP count when latent_from_median.
ModelConfig effective_model(const ExperimentConfig& cfg, const std::vector<LocalizationTask>& train);

// ---------------------------------------------------------------------------
// Pieces shared by the commands and the tests.

/// The meta part of a checkpoint, checked against the model config.
Network load_meta_checkpoint(const std::filesystem::path& path, const ModelConfig& model);

void write_round_log(const std::filesystem::path& path, const std::vector<RoundReport>& rounds);
void write_trace_csv(const std::filesystem::path& path, const AdaptationTrace& trace);
AdaptationTrace read_trace_csv(const std::filesystem::path& path, std::string task_id, InitMode mode,
                               std::uint64_t seed);
void write_cdf_csv(const std::filesystem::path& path, const std::vector<CdfPoint>& curve);

/// Per-run metrics record {task, mode, seed, mde_final, im_A, im_nstar}.
nlohmann::json run_metrics(const AdaptationTrace& trace, const MetaTestPlan& plan);

/// Table rows per task: Im(A) and Im(n*) for RI and MI with %↑.
nlohmann::json summarize(const std::vector<AdaptationTrace>& traces, const MetaTestPlan& plan);

TheoryProbeReport probe_linear_toy(const TheoryPlan& plan);
TheoryProbeReport probe_task(const LocalizationTask& task, const ModelConfig& model, const Network* theta,
                             const TheoryPlan& plan);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace femloc
