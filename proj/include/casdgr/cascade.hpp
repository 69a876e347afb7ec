#pragma once

#include "casdgr/dgr.hpp"

#include <optional>
#include <vector>

namespace casdgr {

struct ModelConfig {
  int stages = 5;
  Index resolution = 512;
  Index channels = 64;
  std::vector<int> rsu_depths{4, 4, 3, 3, 2};
  Index group_size = nn::kGroupSize;
  dgr::DgrConfig dgr{};
  std::vector<int> dgr_stages{1, 2, 3, 4};  // 1-based

  /// Full-scale defaults.
  static ModelConfig full();
  /// CPU-sized preset used by the tests and the acceptance suite.
  static ModelConfig desk();

  /// Resolution of stage m (1-based): R / 2^(M - m).
  Index stage_resolution(int m) const;
  bool has_dgr(int m) const;
  /// DGR settings as instantiated in a stage; node width always follows `channels`.
  dgr::DgrConfig stage_dgr() const;
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

struct Stage {
  nn::ConvBlock input;      // 3 -> C
  nn::RsuBlock rsu;         // C (stage 1) or 2C -> C
  std::optional<dgr::DgrParams> dgr;
  nn::Conv2d head;          // 3x3, C -> 1
};

struct CascadeModel {
  ModelConfig config;
  std::vector<Stage> stages;

  nn::ParamList parameters() const;
};

/// Deterministic in `seed`. Convolutions and projections Xavier-uniform,
/// DGR offset convs zero, GN affine (1, 0), biases zero.
CascadeModel build(const ModelConfig& config, std::uint64_t seed);

struct AlphaPrediction {
  std::vector<Tensor> per_stage;  // N x 1 x h_m x w_m, coarse to fine
  const Tensor& final() const { return per_stage.back(); }
};

struct StageOutput {
  Tensor alpha;
  Tensor refined;
};

/// m is 1-based. `prev_refined` must already be at stage-m resolution and is
/// absent exactly when m == 1.
StageOutput stage_forward(const CascadeModel& model, int m, const Tensor& image_m,
                          const std::optional<Tensor>& prev_refined);

struct ForwardOptions {
  /// Replace the features passed between stages with zeros.
  bool zero_interstage = false;
};

/// Successive bilinear halvings of an N x C x R x R tensor, coarse to fine,
/// with one entry per stage.
std::vector<Tensor> build_pyramid(const Tensor& x, int stages);

AlphaPrediction forward(const CascadeModel& model, const Tensor& image, ForwardOptions opts = {});

struct ParamBreakdown {
  Index total = 0;
  std::vector<Index> per_stage;
  Index dgr_total = 0;
};

ParamBreakdown count_params(const CascadeModel& model);
/// Same numbers without building tensors.
ParamBreakdown count_params(const ModelConfig& config);

}  // namespace casdgr
