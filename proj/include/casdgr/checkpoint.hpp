#pragma once

#include "casdgr/cascade.hpp"
#include "casdgr/config.hpp"
#include "casdgr/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace casdgr {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  Eigen::VectorXd values;
};

/// Everything needed to resume training bit-exactly.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::uint64_t epoch = 0;          // completed epochs
  std::uint64_t optimizer_steps = 0;
  std::string rng_state;
  std::vector<StoredTensor> params;
  std::vector<StoredTensor> adam_m;
  std::vector<StoredTensor> adam_v;
  std::vector<double> epoch_losses;
};

/// Layout (little-endian): magic "CASDGRCK", u32 version, then length-prefixed
/// fields in declaration order. Tensors are name, rank, dims, f64 values.
std::vector<std::uint8_t> encode(const Checkpoint& ckpt);
Checkpoint decode(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint capture(const RunConfig& config, const CascadeModel& model, const Adam& adam, std::uint64_t epoch,
                   const Rng& rng, std::vector<double> epoch_losses);

/// Copies stored parameters into `model`. Names and shapes must match exactly.
void restore_params(const Checkpoint& ckpt, CascadeModel& model);
void restore_optimizer(const Checkpoint& ckpt, Adam& adam);

/// Rebuilds the model described by the checkpoint's own config and loads its weights.
CascadeModel load_model(const std::filesystem::path& path, RunConfig* config_out = nullptr);

}  // namespace casdgr
