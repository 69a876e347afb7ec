#include "casdgr/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace casdgr {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for '" + where + key + "': " + e.what());
  }
}

json model_json(const ModelConfig& m) {
  return {{"stages", m.stages},
          {"resolution", m.resolution},
          {"channels", m.channels},
          {"rsu_depths", m.rsu_depths},
          {"group_size", m.group_size},
          {"dgr_stages", m.dgr_stages},
          {"dgr", {{"neighbors", m.dgr.neighbors}, {"layers", m.dgr.layers}, {"projection", m.dgr.projection}}}};
}

void read_model(const json& j, ModelConfig& m) {
  reject_unknown(j, "model", {"stages", "resolution", "channels", "rsu_depths", "group_size", "dgr_stages", "dgr"});
  read(j, "stages", m.stages, "model.");
  read(j, "resolution", m.resolution, "model.");
  read(j, "channels", m.channels, "model.");
  read(j, "rsu_depths", m.rsu_depths, "model.");
  read(j, "group_size", m.group_size, "model.");
  read(j, "dgr_stages", m.dgr_stages, "model.");
  if (j.contains("dgr")) {
    const json& d = j.at("dgr");
    reject_unknown(d, "model.dgr", {"neighbors", "layers", "projection"});
    read(d, "neighbors", m.dgr.neighbors, "model.dgr.");
    read(d, "layers", m.dgr.layers, "model.dgr.");
    read(d, "projection", m.dgr.projection, "model.dgr.");
  }
  m.dgr.channels = m.channels;
}

}  // namespace

RunConfig RunConfig::from_preset(std::string_view name) {
  RunConfig c;
  c.preset = std::string(name);
  if (name == "desk") {
    c.model = ModelConfig::desk();
  } else if (name == "full") {
    c.model = ModelConfig::full();
    c.train.batch_size = 4;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected desk or full)");
  }
  return c;
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(optimizer.lr > 0)) throw ConfigError("optimizer.lr must be > 0");
  if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train.epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (train.holdout_fraction < 0 || train.holdout_fraction >= 1) throw ConfigError("train.holdout_fraction must be in [0, 1)");
  if (!loss.alpha.empty() && static_cast<int>(loss.alpha.size()) != model.stages - 1) {
    throw ConfigError("loss.alpha needs one weight per stage before the last");
  }
  for (double w : loss.alpha) {
    if (w < 0) throw ConfigError("loss weights must be >= 0");
  }
  if (loss.comp < 0 || loss.grad < 0) throw ConfigError("loss weights must be >= 0");
}

RunConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, "", {"preset", "model", "loss", "optimizer", "train", "dataset", "checkpoint"});
  std::string preset = "desk";
  read(j, "preset", preset, "");
  RunConfig c = RunConfig::from_preset(preset);
  if (j.contains("model")) read_model(j.at("model"), c.model);
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    reject_unknown(l, "loss", {"alpha", "comp", "grad"});
    read(l, "alpha", c.loss.alpha, "loss.");
    read(l, "comp", c.loss.comp, "loss.");
    read(l, "grad", c.loss.grad, "loss.");
  }
  if (j.contains("optimizer")) {
    const json& o = j.at("optimizer");
    reject_unknown(o, "optimizer", {"lr", "beta1", "beta2", "eps"});
    read(o, "lr", c.optimizer.lr, "optimizer.");
    read(o, "beta1", c.optimizer.beta1, "optimizer.");
    read(o, "beta2", c.optimizer.beta2, "optimizer.");
    read(o, "eps", c.optimizer.eps, "optimizer.");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    reject_unknown(t, "train", {"batch_size", "epochs", "seed", "holdout_fraction", "augment", "plateau_stop"});
    read(t, "batch_size", c.train.batch_size, "train.");
    read(t, "epochs", c.train.epochs, "train.");
    read(t, "seed", c.train.seed, "train.");
    read(t, "holdout_fraction", c.train.holdout_fraction, "train.");
    read(t, "augment", c.train.augment, "train.");
    read(t, "plateau_stop", c.train.plateau_stop, "train.");
  }
  read(j, "dataset", c.dataset, "");
  read(j, "checkpoint", c.checkpoint, "");
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const RunConfig& c) {
  json j = {{"preset", c.preset},
            {"model", model_json(c.model)},
            {"loss", {{"alpha", c.loss.alpha}, {"comp", c.loss.comp}, {"grad", c.loss.grad}}},
            {"optimizer",
             {{"lr", c.optimizer.lr}, {"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}}},
            {"train",
             {{"batch_size", c.train.batch_size},
              {"epochs", c.train.epochs},
              {"seed", c.train.seed},
              {"holdout_fraction", c.train.holdout_fraction},
              {"augment", c.train.augment},
              {"plateau_stop", c.train.plateau_stop}}},
            {"dataset", c.dataset},
            {"checkpoint", c.checkpoint}};
  return j.dump(2) + "\n";
}

}  // namespace casdgr
