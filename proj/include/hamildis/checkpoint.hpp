#pragma once

// Checkpoint file: one JSON document holding architecture descriptors,
// per-layer weight arrays (decimal, shortest round-trip, so reloads are
// bit-exact and diffs stay readable), normalization stats and run metadata.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "hamildis/nets.hpp"

namespace hamildis {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelCheckpoint {
  int version = 1;
  ModelKind kind = ModelKind::consci;
  SystemKind task = SystemKind::spring;
  int traj_len = 100;
  double beta = 0.005;
  std::uint64_t seed = 0;
  Mlp encoder;
  Mlp decoder;
  NormStats norm;
  nlohmann::json training_meta = nlohmann::json::object();
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j, const char* field,
                                     const std::string& where) {
  auto it = j.find(field);
  if (it == j.end()) {
    throw CheckpointError("checkpoint: missing field '" + where + field + "'");
  }
  return *it;
}

inline nlohmann::json net_to_json(const Mlp& net) {
  nlohmann::json j;
  j["widths"] = net.spec().widths;
  j["activation"] = activation_name(net.spec().hidden);
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < net.layer_count(); ++l) {
    nlohmann::json layer;
    layer["w"] = std::vector<double>(net.weight(l).begin(), net.weight(l).end());
    layer["b"] = std::vector<double>(net.bias(l).begin(), net.bias(l).end());
    layers.push_back(std::move(layer));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline Mlp net_from_json(const nlohmann::json& j, const std::string& where) {
  MlpSpec spec;
  try {
    spec.widths = require(j, "widths", where).get<std::vector<int>>();
    spec.hidden = parse_activation(require(j, "activation", where).get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint: bad " + where + ": " + e.what());
  }
  spec.validate();
  Mlp net(spec);
  const auto& layers = require(j, "layers", where);
  if (static_cast<int>(layers.size()) != net.layer_count()) {
    throw CheckpointError("checkpoint: " + where + "layers has " +
                          std::to_string(layers.size()) + " entries, expected " +
                          std::to_string(net.layer_count()));
  }
  for (int l = 0; l < net.layer_count(); ++l) {
    const auto& layer = layers[static_cast<std::size_t>(l)];
    const std::string at = where + "layers[" + std::to_string(l) + "].";
    std::vector<double> w, b;
    try {
      w = require(layer, "w", at).get<std::vector<double>>();
      b = require(layer, "b", at).get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("checkpoint: bad " + at + ": " + e.what());
    }
    if (w.size() != net.weight(l).size()) {
      throw CheckpointError("checkpoint: " + at + "w has " + std::to_string(w.size()) +
                            " values, expected " + std::to_string(net.weight(l).size()));
    }
    if (b.size() != net.bias(l).size()) {
      throw CheckpointError("checkpoint: " + at + "b has " + std::to_string(b.size()) +
                            " values, expected " + std::to_string(net.bias(l).size()));
    }
    std::copy(w.begin(), w.end(), net.weight(l).begin());
    std::copy(b.begin(), b.end(), net.bias(l).begin());
  }
  return net;
}

}  // namespace detail

inline nlohmann::json checkpoint_to_json(const ModelCheckpoint& ckpt) {
  nlohmann::json j;
  j["version"] = ckpt.version;
  j["kind"] = model_name(ckpt.kind);
  j["task"] = system_name(ckpt.task);
  j["traj_len"] = ckpt.traj_len;
  j["beta"] = ckpt.beta;
  j["seed"] = ckpt.seed;
  j["normalization"] = {{"mean", ckpt.norm.mean}, {"std", ckpt.norm.stdev}};
  j["encoder"] = detail::net_to_json(ckpt.encoder);
  j["decoder"] = detail::net_to_json(ckpt.decoder);
  j["training"] = ckpt.training_meta;
  return j;
}

inline void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot write " + file.string());
  out << checkpoint_to_json(ckpt).dump(1) << '\n';
  if (!out) throw CheckpointError("checkpoint: short write to " + file.string());
}

inline ModelCheckpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint: parse failure in " + file.string() + ": " + e.what());
  }

  ModelCheckpoint ckpt;
  try {
    ckpt.version = detail::require(j, "version", "").get<int>();
    if (ckpt.version != 1) {
      throw CheckpointError("checkpoint: unsupported version " +
                            std::to_string(ckpt.version));
    }
    ckpt.kind = parse_model(detail::require(j, "kind", "").get<std::string>());
    ckpt.task = parse_system(detail::require(j, "task", "").get<std::string>());
    ckpt.traj_len = detail::require(j, "traj_len", "").get<int>();
    ckpt.beta = detail::require(j, "beta", "").get<double>();
    ckpt.seed = detail::require(j, "seed", "").get<std::uint64_t>();
    const auto& norm = detail::require(j, "normalization", "");
    ckpt.norm.mean = detail::require(norm, "mean", "normalization.").get<std::vector<double>>();
    ckpt.norm.stdev = detail::require(norm, "std", "normalization.").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad field: ") + e.what());
  }
  ckpt.encoder = detail::net_from_json(detail::require(j, "encoder", ""), "encoder.");
  ckpt.decoder = detail::net_from_json(detail::require(j, "decoder", ""), "decoder.");
  if (ckpt.norm.mean.size() != static_cast<std::size_t>(ckpt.encoder.input_width()) ||
      ckpt.norm.stdev.size() != ckpt.norm.mean.size()) {
    throw CheckpointError("checkpoint: normalization size does not match encoder input");
  }
  if (auto it = j.find("training"); it != j.end()) ckpt.training_meta = *it;
  return ckpt;
}

}  // namespace hamildis
