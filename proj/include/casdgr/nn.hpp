#pragma once

#include "casdgr/ops.hpp"
#include "casdgr/random.hpp"

#include <string>
#include <vector>

namespace casdgr::nn {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedTensor>;

Index count(const ParamList& params);

inline constexpr double kGroupNormEps = 1e-5;
inline constexpr Index kGroupSize = 32;

/// Xavier/Glorot uniform fill of a leaf tensor.
void xavier_uniform(Tensor& weight, Index fan_in, Index fan_out, Rng& rng);

/// Plain convolution with bias. Weights start at zero; callers initialize.
struct Conv2d {
  Tensor weight;  // O x C x k x k
  Tensor bias;    // O
  Conv2dOptions opts;

  static Conv2d zeros(Index in_channels, Index out_channels, int kernel, int dilation = 1);
  void xavier(Rng& rng);
  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, opts); }
  void collect(const std::string& prefix, ParamList& out) const;
};

/// conv 3x3 -> group norm -> relu, resolution preserving (padding = dilation).
struct ConvBlock {
  Conv2d conv;
  Tensor gamma;  // O
  Tensor beta;   // O
  Index group_size = kGroupSize;

  static ConvBlock create(Index in_channels, Index out_channels, int dilation, Rng& rng);
  int dilation() const { return conv.opts.dilation; }
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

/// Group normalization with per-channel affine (gamma, beta).
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Index group_size = kGroupSize,
                  double eps = kGroupNormEps);

Tensor downsample2(const Tensor& x);
Tensor upsample2(const Tensor& x);

struct RsuConfig {
  Index in_channels = 64;
  Index out_channels = 64;
  Index mid_channels = 32;
  int depth = 4;
  int bottom_blocks = 2;
  int bottom_dilation = 2;

  /// Internal width rule: half the output width, never below 4.
  static Index default_mid(Index out_channels) { return std::max<Index>(out_channels / 2, 4); }
};

/// Residual U-block. The encoder halves resolution `depth` times, dilated
/// blocks run at the bottom, and the decoder climbs back up consuming one skip
/// per level. Output = decoder path + 1x1 projection of the input.
struct RsuBlock {
  RsuConfig config;
  ConvBlock input;
  std::vector<ConvBlock> encoder;
  std::vector<ConvBlock> bottom;
  std::vector<ConvBlock> decoder;  // decoder[l] consumes skip from encoder[l]
  Conv2d residual;

  static RsuBlock create(const RsuConfig& config, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
};

}  // namespace casdgr::nn
