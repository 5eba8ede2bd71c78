#pragma once

// Client model: encoder (m -> d), decoder (d -> m), meta-model (d -> n) and
// location mapper (n -> p). Predictions are mapper(meta(encoder(x))).

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "femloc/nn.hpp"

namespace femloc {

using Matrix = nn::Matrix<double>;
using Vector = nn::Vector<double>;
using Network = nn::Network<double>;
using GradientBundle = nn::GradientBundle<double>;
using LayerGradients = std::vector<nn::LayerGradient<double>>;
using AdamState = nn::AdamState<double>;

enum class Part { Encoder = 0, Decoder = 1, Meta = 2, Mapper = 3 };
inline constexpr std::array<Part, 4> kAllParts = {Part::Encoder, Part::Decoder, Part::Meta, Part::Mapper};
const char* to_string(Part p);
Part part_from_string(const std::string& s);

enum class OptimizerKind { Adam, Sgd };
const char* to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct ModelConfig {
  nn::Index input_dim = 0;  // m, set per task
  nn::Index latent_dim = 50;
  nn::Index feature_dim = 32;
  nn::Index coord_dim = 2;
  std::vector<nn::Index> encoder_hidden = {1024};
  std::vector<nn::Index> decoder_hidden = {1024};
  std::vector<nn::Index> meta_hidden = {256, 128, 64};
  std::vector<nn::Index> mapper_hidden = {64, 32};
  double encoder_rate = 0.0095;  // also used by the decoder
  double meta_rate = 0.0005;
  double mapper_rate = 0.0005;
  double recon_weight = 0.1;
  OptimizerKind optimizer = OptimizerKind::Adam;

  /// Throws ConfigError unless every dimension is >= 1 and every rate > 0.
  /// `require_input` also demands input_dim >= 1.
  void validate(bool require_input = true) const;
  double rate(Part p) const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Builds the meta part alone (d -> hidden -> n); its shape is independent of m.
Network make_meta_network(const ModelConfig& cfg, std::uint64_t seed);

struct ModelGradients {
  GradientBundle encoder, decoder, meta, mapper;

  GradientBundle& operator[](Part p);
  const GradientBundle& operator[](Part p) const;
};

struct CompositeLoss {
  double total = 0;           // prediction + recon_weight * reconstruction
  double prediction = 0;      // MSE(y_hat, y)
  double reconstruction = 0;  // MSE(x_hat, x)
  ModelGradients grads;
};

class ClientModel {
 public:
  ClientModel() = default;
  /// Seeds every part from `seed`; parts draw from distinct streams.
  ClientModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  Network& part(Part p);
  const Network& part(Part p) const;
  AdamState& optimizer_state(Part p) { return adam_[static_cast<int>(p)]; }
  const AdamState& optimizer_state(Part p) const { return adam_[static_cast<int>(p)]; }

  /// Replaces the meta part; its optimizer state is reset.
  void set_meta(const Network& theta);
  void reset_optimizer(Part p);

  Matrix encode(const Matrix& x) const;
  Matrix decode(const Matrix& latent) const;
  Matrix meta_forward(const Matrix& latent) const;
  Matrix map(const Matrix& features) const;
  Matrix full_forward(const Matrix& x) const;
  Vector full_forward(const Vector& x) const;

  /// Columns of `x` are fingerprints (m rows), columns of `y` coordinates (p rows).
  CompositeLoss composite_loss(const Matrix& x, const Matrix& y) const;

  /// One optimizer step on every part using the configured optimizer and per-part rates.
  void apply(const ModelGradients& grads);
  /// Steps only the listed parts.
  void apply(const ModelGradients& grads, std::span<const Part> parts);

  bool operator==(const ClientModel& o) const { return config_ == o.config_ && parts_ == o.parts_; }

 private:
  void check_input(const Matrix& x) const;

  ModelConfig config_;
  std::array<Network, 4> parts_;
  std::array<AdamState, 4> adam_;
};

// ---------------------------------------------------------------------------
// Checkpoints: JSON {format, version, config, round?, parts: {name: [layer...]}}
// with row-major weight arrays. Doubles are written in shortest round-trip form.

struct Checkpoint {
  ModelConfig config;
  std::optional<std::int64_t> round;
  std::map<Part, Network> parts;
};

nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& j);

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace femloc
