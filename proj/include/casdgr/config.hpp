#pragma once

#include "casdgr/cascade.hpp"
#include "casdgr/losses.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

namespace casdgr {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  Index batch_size = 2;
  int epochs = 30;
  std::uint64_t seed = 0;
  double holdout_fraction = 0.2;
  bool augment = true;
  /// Stop once the epoch-mean loss improves by less than 1e-3 (relative) over 5 epochs.
  bool plateau_stop = false;
};

struct RunConfig {
  std::string preset = "desk";
  ModelConfig model = ModelConfig::desk();
  loss::LossWeights loss;
  OptimizerConfig optimizer;
  TrainConfig train;
  std::string dataset;
  std::string checkpoint;

  static RunConfig from_preset(std::string_view name);
  void validate() const;
};

/// JSON text. Keys not in the schema are rejected; omitted keys keep the
/// values of the preset named by "preset" (default "desk").
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical serialization (sorted keys, every field present).
std::string to_text(const RunConfig& config);

}  // namespace casdgr
