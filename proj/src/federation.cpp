#include "femloc/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "femloc/seeding.hpp"

namespace femloc {

namespace {

constexpr std::uint64_t kServerStream = 0x736572766572;  // "server"
constexpr std::uint64_t kClientStream = 0x636c69656e74;  // "client"
constexpr std::uint64_t kBatchStream = 0x6261746368;     // "batch"

ModelConfig config_for(const ModelConfig& base, const LocalizationTask& task) {
  ModelConfig c = base;
  c.input_dim = task.num_aps();
  c.coord_dim = task.coord_dim();
  return c;
}

}  // namespace

void FederationConfig::validate() const {
  model.validate(false);
  if (rounds < 0) throw ConfigError("federation: rounds must be >= 0");
  if (local_steps < 0) throw ConfigError("federation: local_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("federation: batch_size must be >= 1");
  if (!(outer_rate > 0)) throw ConfigError("federation: outer_rate must be > 0");
  if (!(convergence_tol >= 0)) throw ConfigError("federation: convergence_tol must be >= 0");
  if (patience < 1) throw ConfigError("federation: patience must be >= 1");
  if (workers < 1) throw ConfigError("federation: workers must be >= 1");
}

void to_json(nlohmann::json& j, const FederationConfig& c) {
  j = {{"rounds", c.rounds},
       {"local_steps", c.local_steps},
       {"batch_size", c.batch_size},
       {"outer_rate", c.outer_rate},
       {"early_stop", c.early_stop},
       {"convergence_tol", c.convergence_tol},
       {"patience", c.patience},
       {"workers", c.workers},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, FederationConfig& c) {
  try {
    c.rounds = j.value("rounds", c.rounds);
    c.local_steps = j.value("local_steps", c.local_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.outer_rate = j.value("outer_rate", c.outer_rate);
    c.early_stop = j.value("early_stop", c.early_stop);
    c.convergence_tol = j.value("convergence_tol", c.convergence_tol);
    c.patience = j.value("patience", c.patience);
    c.workers = j.value("workers", c.workers);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("federation: ") + e.what());
  }
}

std::vector<nn::Index> sample_batch(nn::Index available, int batch, std::mt19937_64& rng) {
  if (available < 1) throw DataError("sample_batch: empty set");
  std::vector<nn::Index> idx(static_cast<std::size_t>(available));
  std::iota(idx.begin(), idx.end(), 0);
  if (available <= batch) return idx;
  for (int i = 0; i < batch; ++i) {
    std::uniform_int_distribution<nn::Index> pick(i, available - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(batch));
  return idx;
}

Cohort server_init(const FederationConfig& cfg, std::vector<LocalizationTask> tasks) {
  cfg.validate();
  if (tasks.empty()) throw ConfigError("server_init: need at least one training task");
  Cohort cohort;
  cohort.meta.theta = make_meta_network(cfg.model, derive_seed(cfg.seed, kServerStream));
  cohort.meta.round = 0;
  cohort.meta.outer_rate = cfg.outer_rate;
  cohort.clients.reserve(tasks.size());
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    tasks[k].validate();
    ClientState c;
    c.id = static_cast<int>(k);
    c.model = ClientModel(config_for(cfg.model, tasks[k]), derive_seed(cfg.seed, kClientStream, k));
    c.model.set_meta(cohort.meta.theta);
    c.task = std::move(tasks[k]);
    c.local_steps = cfg.local_steps;
    c.batch_size = cfg.batch_size;
    c.rng.seed(derive_seed(cfg.seed, kBatchStream, k));
    cohort.clients.push_back(std::move(c));
  }
  update_contributions(cohort.clients);
  return cohort;
}

void update_contributions(std::span<ClientState> clients) {
  double total = 0;
  for (const auto& c : clients) total += static_cast<double>(c.task.query.samples());
  if (!(total > 0)) throw DataError("update_contributions: cohort has no query samples");
  for (auto& c : clients) c.contribution = static_cast<double>(c.task.query.samples()) / total;
}

ClientUpdate client_local_train(ClientState& client, const Network& theta_broadcast, int steps) {
  if (steps < 0) throw ConfigError("client_local_train: negative step count");
  const auto& task = client.task;
  if (task.support.samples() == 0 || task.query.samples() == 0)
    throw DataError("client " + task.id + ": empty support or query set");

  client.model.set_meta(theta_broadcast);
  const Matrix xs = task.support_inputs();
  const Matrix ys = task.support_targets();
  for (int n = 0; n < steps; ++n) {
    const auto rows = sample_batch(xs.cols(), client.batch_size, client.rng);
    const Matrix xb = xs(Eigen::all, rows);
    const Matrix yb = ys(Eigen::all, rows);
    client.model.apply(client.model.composite_loss(xb, yb).grads);
  }
  auto q = client.model.composite_loss(task.query_inputs(), task.query_targets());
  ClientUpdate up;
  up.client_id = client.id;
  up.grad_theta = std::move(q.grads.meta);
  up.query_loss = q.prediction;
  return up;
}

MetaModel server_aggregate(const MetaModel& meta, std::span<const ClientUpdate> updates,
                           std::span<const double> weights) {
  if (updates.empty()) throw ConfigError("server_aggregate: empty cohort");
  if (weights.size() != updates.size()) throw ConfigError("server_aggregate: one weight per update required");
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return updates[a].client_id < updates[b].client_id; });

  auto sum = nn::zeros_like(meta.theta);
  for (auto i : order) {
    if (!nn::same_shape(sum, updates[i].grad_theta.layers))
      throw ConfigError("server_aggregate: client " + std::to_string(updates[i].client_id) +
                        " uploaded a gradient whose shape differs from theta");
    nn::accumulate(sum, weights[i], updates[i].grad_theta.layers);
  }
  MetaModel next = meta;
  nn::sgd_step(next.theta, sum, meta.outer_rate);
  next.round = meta.round + 1;
  return next;
}

MetaTrainResult meta_train(Cohort& cohort, const FederationConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  auto& clients = cohort.clients;
  if (clients.empty()) throw ConfigError("meta_train: empty cohort");
  update_contributions(clients);

  std::vector<std::size_t> order = hooks.execution_order;
  if (order.empty()) {
    order.resize(clients.size());
    std::iota(order.begin(), order.end(), 0);
  }
  {
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted.size() != clients.size() || sorted[i] != i)
        throw ConfigError("meta_train: execution order must be a permutation of the cohort");
  }

  std::vector<double> weights;
  for (const auto& c : clients) weights.push_back(c.contribution);

  MetaTrainResult result;
  result.meta = cohort.meta;
  int calm_rounds = 0;
  double previous = std::numeric_limits<double>::quiet_NaN();
  std::vector<ClientUpdate> updates(clients.size());

  for (int r = 0; r < cfg.rounds; ++r) {
    const Network broadcast = result.meta.theta;
    const int workers = std::min<int>(cfg.workers, static_cast<int>(clients.size()));
    if (workers <= 1) {
      for (auto k : order) updates[k] = client_local_train(clients[k], broadcast, clients[k].local_steps);
    } else {
      std::atomic<std::size_t> next{0};
      std::exception_ptr failure;
      std::mutex failure_mutex;
      std::vector<std::jthread> pool;
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
          for (std::size_t i = next++; i < order.size(); i = next++) {
            const auto k = order[i];
            try {
              updates[k] = client_local_train(clients[k], broadcast, clients[k].local_steps);
            } catch (...) {
              std::lock_guard lock(failure_mutex);
              if (!failure) failure = std::current_exception();
            }
          }
        });
      pool.clear();
      if (failure) std::rethrow_exception(failure);
    }

    result.meta = server_aggregate(result.meta, updates, weights);

    RoundReport report;
    report.round = result.meta.round;
    double sum = 0;
    for (const auto& u : updates) {
      report.client_losses.push_back(u.query_loss);
      sum += u.query_loss;
    }
    report.mean_query_loss = sum / static_cast<double>(updates.size());
    result.rounds.push_back(report);
    if (hooks.on_round) hooks.on_round(report, result.meta);

    if (cfg.early_stop && std::isfinite(previous)) {
      const double rel = std::abs(report.mean_query_loss - previous) / std::max(std::abs(previous), 1e-300);
      calm_rounds = rel < cfg.convergence_tol ? calm_rounds + 1 : 0;
      if (calm_rounds >= cfg.patience) {
        result.converged = true;
        break;
      }
    }
    previous = report.mean_query_loss;
  }
  cohort.meta = result.meta;
  return result;
}

MetaTrainResult meta_train(const FederationConfig& cfg, std::vector<LocalizationTask> tasks, const TrainHooks& hooks) {
  auto cohort = server_init(cfg, std::move(tasks));
  return meta_train(cohort, cfg, hooks);
}

Matrix predict_coords(const ClientModel& model, const LocalizationTask& task, const FingerprintDataset& ds) {
  return task.scaler.denormalize(model.full_forward(Matrix(ds.rssi.transpose())).transpose());
}

MetaTestResult meta_test(const LocalizationTask& task, const Network* theta_init, const MetaTestConfig& cfg,
                         std::uint64_t seed) {
  task.validate();
  if (cfg.steps < 0) throw ConfigError("meta_test: steps must be >= 0");
  if (cfg.batch_size < 1) throw ConfigError("meta_test: batch_size must be >= 1");

  MetaTestResult out;
  out.model = ClientModel(config_for(cfg.model, task), seed);
  if (theta_init) out.model.set_meta(*theta_init);
  out.trace.task_id = task.id;
  out.trace.mode = theta_init ? InitMode::Meta : InitMode::Random;
  out.trace.seed = seed;

  std::mt19937_64 rng(derive_seed(seed, kBatchStream));
  const Matrix xs = task.support_inputs();
  const Matrix ys = task.support_targets();
  const Matrix xq = task.query_inputs();
  for (int n = 1; n <= cfg.steps; ++n) {
    const auto rows = sample_batch(xs.cols(), cfg.batch_size, rng);
    const Matrix xb = xs(Eigen::all, rows);
    const Matrix yb = ys(Eigen::all, rows);
    auto loss = out.model.composite_loss(xb, yb);
    out.model.apply(loss.grads);
    const Matrix pred = task.scaler.denormalize(out.model.full_forward(xq).transpose());
    out.trace.steps.push_back({n, loss.prediction, mde(pred, task.query.coords)});
  }
  return out;
}

}  // namespace femloc
