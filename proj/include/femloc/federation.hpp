#pragma once

// Federated meta-training (broadcast -> local training -> query-gradient
// aggregation) and few-shot meta-testing of new tasks.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "femloc/data.hpp"
#include "femloc/metrics.hpp"
#include "femloc/model.hpp"

namespace femloc {

struct FederationConfig {
  ModelConfig model;  // input_dim is ignored; each client uses its task's AP count
  int rounds = 1000;
  int local_steps = 5;
  int batch_size = 32;
  double outer_rate = 0.001;
  bool early_stop = true;
  double convergence_tol = 1e-5;  // relative change of mean query loss
  int patience = 20;              // consecutive rounds below tolerance
  int workers = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const FederationConfig& c);
/// Reads federation keys; the model block is read separately.
void from_json(const nlohmann::json& j, FederationConfig& c);

struct MetaModel {
  Network theta;
  std::int64_t round = 0;
  double outer_rate = 0.001;
};

struct ClientState {
  int id = 0;
  LocalizationTask task;
  ClientModel model;
  int local_steps = 5;
  int batch_size = 32;
  double contribution = 0;  // rho_k
  std::mt19937_64 rng;
};

struct ClientUpdate {
  int client_id = 0;
  GradientBundle grad_theta;
  double query_loss = 0;
};

struct Cohort {
  MetaModel meta;
  std::vector<ClientState> clients;
};

struct RoundReport {
  std::int64_t round = 0;  // 1-based index of the completed round
  double mean_query_loss = 0;
  std::vector<double> client_losses;
};

/// Column-sampled minibatch of at most `batch` support rows, without
/// replacement. The full set (in order) when it is no larger than `batch`.
std::vector<nn::Index> sample_batch(nn::Index available, int batch, std::mt19937_64& rng);

/// Seeds theta and every client's model; Omega_k = (alpha_k, theta^0, beta_k).
Cohort server_init(const FederationConfig& cfg, std::vector<LocalizationTask> tasks);

/// rho_k = |D_k^q| / sum |D^q|.
void update_contributions(std::span<ClientState> clients);

/// Copies the broadcast theta into the client, runs `steps` optimizer steps on
/// support minibatches over all parts, then returns the meta-part gradient of
/// the localization loss on the full query set.
ClientUpdate client_local_train(ClientState& client, const Network& theta_broadcast, int steps);

/// theta - outer_rate * sum_k weights[k] * grad_k, summed in ascending client id.
MetaModel server_aggregate(const MetaModel& meta, std::span<const ClientUpdate> updates,
                           std::span<const double> weights);

struct TrainHooks {
  std::function<void(const RoundReport&, const MetaModel&)> on_round;
  /// Order in which clients are executed within a round (defaults to id order).
  std::vector<std::size_t> execution_order;
};

struct MetaTrainResult {
  MetaModel meta;
  std::vector<RoundReport> rounds;
  bool converged = false;
};

MetaTrainResult meta_train(Cohort& cohort, const FederationConfig& cfg, const TrainHooks& hooks = {});
MetaTrainResult meta_train(const FederationConfig& cfg, std::vector<LocalizationTask> tasks,
                           const TrainHooks& hooks = {});

struct MetaTestConfig {
  ModelConfig model;
  int steps = 300;
  int batch_size = 32;
};

struct MetaTestResult {
  AdaptationTrace trace;
  ClientModel model;
};

/// Fresh encoder/decoder/mapper from `seed`; meta part from `theta_init` (MI)
/// or from the same seed (RI). Every part is fine-tuned; query MDE is recorded
/// after each step in dataset units.
MetaTestResult meta_test(const LocalizationTask& task, const Network* theta_init, const MetaTestConfig& cfg,
                         std::uint64_t seed);

/// Model predictions for `ds` rows in dataset units.
Matrix predict_coords(const ClientModel& model, const LocalizationTask& task, const FingerprintDataset& ds);

}  // namespace femloc
