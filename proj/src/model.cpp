#include "femloc/model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "femloc/seeding.hpp"

namespace femloc {

namespace {

constexpr std::uint64_t kPartStream = 0x70617274;  // "part"

std::vector<nn::Index> chain(nn::Index in, const std::vector<nn::Index>& hidden, nn::Index out) {
  std::vector<nn::Index> sizes;
  sizes.reserve(hidden.size() + 2);
  sizes.push_back(in);
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(out);
  return sizes;
}

Network build(const std::vector<nn::Index>& sizes, std::uint64_t seed) {
  return nn::make_network<double>(std::span<const nn::Index>(sizes), nn::Activation::ReLU, nn::Activation::Identity,
                                  seed);
}

void check_chain(const Network& net, nn::Index in, nn::Index out, const char* what) {
  if (net.empty() || nn::input_size(net) != in || nn::output_size(net) != out) {
    std::ostringstream os;
    os << what << " must map " << in << " -> " << out << ", got " << nn::input_size(net) << " -> "
       << nn::output_size(net);
    throw ConfigError(os.str());
  }
}

}  // namespace

const char* to_string(Part p) {
  switch (p) {
    case Part::Encoder: return "encoder";
    case Part::Decoder: return "decoder";
    case Part::Meta: return "meta";
    case Part::Mapper: return "mapper";
  }
  return "?";
}

Part part_from_string(const std::string& s) {
  for (Part p : kAllParts)
    if (s == to_string(p)) return p;
  throw ConfigError("unknown model part '" + s + "'");
}

const char* to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

void ModelConfig::validate(bool require_input) const {
  if (require_input && input_dim < 1) throw ConfigError("model: input_dim (m) must be >= 1");
  if (latent_dim < 1 || feature_dim < 1 || coord_dim < 1) throw ConfigError("model: d, n and p must be >= 1");
  for (const auto* h : {&encoder_hidden, &decoder_hidden, &meta_hidden, &mapper_hidden})
    for (auto w : *h)
      if (w < 1) throw ConfigError("model: hidden widths must be >= 1");
  if (!(encoder_rate > 0) || !(meta_rate > 0) || !(mapper_rate > 0))
    throw ConfigError("model: learning rates must be > 0");
  if (!(recon_weight >= 0)) throw ConfigError("model: recon_weight must be >= 0");
}

double ModelConfig::rate(Part p) const {
  switch (p) {
    case Part::Encoder:
    case Part::Decoder: return encoder_rate;
    case Part::Meta: return meta_rate;
    case Part::Mapper: return mapper_rate;
  }
  return 0;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_dim", c.input_dim},           {"latent_dim", c.latent_dim},
       {"feature_dim", c.feature_dim},       {"coord_dim", c.coord_dim},
       {"encoder_hidden", c.encoder_hidden}, {"decoder_hidden", c.decoder_hidden},
       {"meta_hidden", c.meta_hidden},       {"mapper_hidden", c.mapper_hidden},
       {"encoder_rate", c.encoder_rate},     {"meta_rate", c.meta_rate},
       {"mapper_rate", c.mapper_rate},       {"recon_weight", c.recon_weight},
       {"optimizer", to_string(c.optimizer)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::vector<std::string> known = {
      "input_dim",   "latent_dim",   "feature_dim", "coord_dim",   "encoder_hidden", "decoder_hidden", "meta_hidden",
      "mapper_hidden", "encoder_rate", "meta_rate", "mapper_rate", "recon_weight",   "optimizer"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("model: unknown key '" + k + "'");
  try {
    c.input_dim = j.value("input_dim", c.input_dim);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.coord_dim = j.value("coord_dim", c.coord_dim);
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
    c.meta_hidden = j.value("meta_hidden", c.meta_hidden);
    c.mapper_hidden = j.value("mapper_hidden", c.mapper_hidden);
    c.encoder_rate = j.value("encoder_rate", c.encoder_rate);
    c.meta_rate = j.value("meta_rate", c.meta_rate);
    c.mapper_rate = j.value("mapper_rate", c.mapper_rate);
    c.recon_weight = j.value("recon_weight", c.recon_weight);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

Network make_meta_network(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate(false);
  return build(chain(cfg.latent_dim, cfg.meta_hidden, cfg.feature_dim),
               derive_seed(seed, kPartStream, static_cast<std::uint64_t>(Part::Meta)));
}

GradientBundle& ModelGradients::operator[](Part p) {
  switch (p) {
    case Part::Encoder: return encoder;
    case Part::Decoder: return decoder;
    case Part::Meta: return meta;
    case Part::Mapper: return mapper;
  }
  throw InternalError("bad part");
}

const GradientBundle& ModelGradients::operator[](Part p) const {
  return const_cast<ModelGradients&>(*this)[p];
}

ClientModel::ClientModel(ModelConfig cfg, std::uint64_t seed) : config_(std::move(cfg)) {
  config_.validate();
  const auto& c = config_;
  auto part_seed = [&](Part p) { return derive_seed(seed, kPartStream, static_cast<std::uint64_t>(p)); };
  parts_[0] = build(chain(c.input_dim, c.encoder_hidden, c.latent_dim), part_seed(Part::Encoder));
  parts_[1] = build(chain(c.latent_dim, c.decoder_hidden, c.input_dim), part_seed(Part::Decoder));
  parts_[2] = make_meta_network(c, seed);
  parts_[3] = build(chain(c.feature_dim, c.mapper_hidden, c.coord_dim), part_seed(Part::Mapper));
  for (Part p : kAllParts) reset_optimizer(p);
}

Network& ClientModel::part(Part p) { return parts_[static_cast<int>(p)]; }
const Network& ClientModel::part(Part p) const { return parts_[static_cast<int>(p)]; }

void ClientModel::set_meta(const Network& theta) {
  check_chain(theta, config_.latent_dim, config_.feature_dim, "meta-model");
  const auto& cur = part(Part::Meta);
  if (theta.size() != cur.size()) throw ConfigError("meta-model: layer count differs from the configured shape");
  for (std::size_t l = 0; l < theta.size(); ++l)
    if (theta[l].weights.rows() != cur[l].weights.rows() || theta[l].weights.cols() != cur[l].weights.cols())
      throw ConfigError("meta-model: layer " + std::to_string(l) + " shape differs from the configured shape");
  part(Part::Meta) = theta;
  reset_optimizer(Part::Meta);
}

void ClientModel::reset_optimizer(Part p) { adam_[static_cast<int>(p)] = nn::make_adam_state(part(p)); }

void ClientModel::check_input(const Matrix& x) const {
  if (x.rows() != config_.input_dim)
    throw ConfigError("model expects fingerprints with m=" + std::to_string(config_.input_dim) + " APs, got " +
                      std::to_string(x.rows()));
}

Matrix ClientModel::encode(const Matrix& x) const {
  check_input(x);
  return nn::predict(part(Part::Encoder), x);
}

Matrix ClientModel::decode(const Matrix& latent) const { return nn::predict(part(Part::Decoder), latent); }

Matrix ClientModel::meta_forward(const Matrix& latent) const { return nn::predict(part(Part::Meta), latent); }

Matrix ClientModel::map(const Matrix& features) const { return nn::predict(part(Part::Mapper), features); }

Matrix ClientModel::full_forward(const Matrix& x) const { return map(meta_forward(encode(x))); }

Vector ClientModel::full_forward(const Vector& x) const { return full_forward(Matrix(x)).col(0); }

CompositeLoss ClientModel::composite_loss(const Matrix& x, const Matrix& y) const {
  if (x.cols() == 0) throw ConfigError("composite_loss: empty batch");
  check_input(x);
  if (y.rows() != config_.coord_dim || y.cols() != x.cols())
    throw ConfigError("composite_loss: labels must be " + std::to_string(config_.coord_dim) + " x batch");

  auto [latent, enc_cache] = nn::forward(part(Part::Encoder), x);
  auto [features, meta_cache] = nn::forward(part(Part::Meta), latent);
  auto [pred, map_cache] = nn::forward(part(Part::Mapper), features);

  CompositeLoss out;
  auto pred_loss = nn::mse_loss(pred, y);
  out.prediction = pred_loss.loss;
  out.grads.mapper = nn::backward(part(Part::Mapper), map_cache, pred_loss.gradient);
  out.grads.meta = nn::backward(part(Part::Meta), meta_cache, out.grads.mapper.input_gradient);
  Matrix latent_grad = out.grads.meta.input_gradient;

  const double lambda = config_.recon_weight;
  if (lambda > 0) {
    auto [recon, dec_cache] = nn::forward(part(Part::Decoder), latent);
    auto recon_loss = nn::mse_loss(recon, x);
    out.reconstruction = recon_loss.loss;
    out.grads.decoder = nn::backward(part(Part::Decoder), dec_cache, Matrix(lambda * recon_loss.gradient));
    latent_grad += out.grads.decoder.input_gradient;
  } else {
    out.grads.decoder = nn::zero_gradient(part(Part::Decoder));
    out.grads.decoder.sample_count = x.cols();
  }
  out.grads.encoder = nn::backward(part(Part::Encoder), enc_cache, latent_grad);
  out.total = out.prediction + lambda * out.reconstruction;
  return out;
}

void ClientModel::apply(const ModelGradients& grads) { apply(grads, kAllParts); }

void ClientModel::apply(const ModelGradients& grads, std::span<const Part> parts) {
  for (Part p : parts) {
    if (p == Part::Decoder && config_.recon_weight == 0) continue;
    const double rate = config_.rate(p);
    if (config_.optimizer == OptimizerKind::Adam)
      nn::adam_step(part(p), grads[p], optimizer_state(p), rate);
    else
      nn::sgd_step(part(p), grads[p], rate);
  }
}

// ---------------------------------------------------------------------------

nlohmann::json network_to_json(const Network& net) {
  auto layers = nlohmann::json::array();
  for (const auto& layer : net) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(layer.weights.size()));
    for (nn::Index r = 0; r < layer.weights.rows(); ++r)
      for (nn::Index c = 0; c < layer.weights.cols(); ++c) w.push_back(layer.weights(r, c));
    std::vector<double> b(layer.biases.data(), layer.biases.data() + layer.biases.size());
    layers.push_back({{"rows", layer.weights.rows()},
                      {"cols", layer.weights.cols()},
                      {"activation", nn::to_string(layer.activation)},
                      {"weights", std::move(w)},
                      {"biases", std::move(b)}});
  }
  return layers;
}

Network network_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw DataError("checkpoint: network must be an array of layers");
  Network net;
  for (const auto& lj : j) {
    const auto rows = lj.at("rows").get<nn::Index>();
    const auto cols = lj.at("cols").get<nn::Index>();
    const auto w = lj.at("weights").get<std::vector<double>>();
    const auto b = lj.at("biases").get<std::vector<double>>();
    if (rows < 1 || cols < 1 || static_cast<nn::Index>(w.size()) != rows * cols ||
        static_cast<nn::Index>(b.size()) != rows)
      throw DataError("checkpoint: layer tensor sizes do not match declared dims");
    nn::DenseLayer<double> layer(cols, rows, nn::activation_from_string(lj.at("activation").get<std::string>()));
    for (nn::Index r = 0; r < rows; ++r)
      for (nn::Index c = 0; c < cols; ++c) layer.weights(r, c) = w[static_cast<std::size_t>(r * cols + c)];
    for (nn::Index r = 0; r < rows; ++r) layer.biases(r) = b[static_cast<std::size_t>(r)];
    if (!net.empty() && net.back().out_size() != cols) throw DataError("checkpoint: consecutive layers do not chain");
    net.push_back(std::move(layer));
  }
  return net;
}

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt) {
  nlohmann::json j;
  j["format"] = "femloc-checkpoint";
  j["version"] = 1;
  j["config"] = ckpt.config;
  if (ckpt.round) j["round"] = *ckpt.round;
  auto& parts = j["parts"] = nlohmann::json::object();
  for (const auto& [p, net] : ckpt.parts) parts[to_string(p)] = network_to_json(net);
  return j;
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "femloc-checkpoint") throw DataError("checkpoint: missing or wrong format tag");
    if (j.value("version", 0) != 1) throw DataError("checkpoint: unsupported version");
    Checkpoint ckpt;
    ckpt.config = j.at("config").get<ModelConfig>();
    if (j.contains("round")) ckpt.round = j.at("round").get<std::int64_t>();
    for (const auto& [name, nj] : j.at("parts").items()) ckpt.parts[part_from_string(name)] = network_from_json(nj);
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(ckpt).dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace femloc
