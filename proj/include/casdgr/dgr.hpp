#pragma once

#include "casdgr/nn.hpp"

#include <optional>
#include <vector>

namespace casdgr::dgr {

struct DgrConfig {
  Index neighbors = 5;   // K
  int layers = 2;        // refinement iterations
  Index channels = 64;   // C
  Index projection = 64; // C'

  void validate() const;
};

/// Initial neighbor displacement pattern (dy, dx) for K slots.
///
/// K = 1 is the node itself, K = 5 the centre plus its 4-connected cross,
/// K = 9 the full 3x3 window. Any other K takes the first K offsets of the
/// ring-ordered sequence: the 3x3 window in row-major order, then each
/// larger square ring in row-major order.
std::vector<Offset2> base_layout(Index k);

struct RefineWeights {
  Tensor query;       // W1: C' x C
  Tensor key;         // W2: C' x C
  nn::Conv2d restore; // 1x1 C' -> C, only when C' != C
};

struct DgrParams {
  DgrConfig config;
  nn::Conv2d offset;  // 3x3, C -> 2K, zero-initialized
  std::vector<RefineWeights> iterations;
  std::vector<Offset2> layout;

  /// Offset conv zeroed; projections Xavier-initialized.
  static DgrParams create(const DgrConfig& config, Rng& rng);
  void collect(const std::string& prefix, nn::ParamList& out) const;
};

struct NeighborField {
  Tensor coords;    // N x K x 2 x H x W, absolute (y, x), clamped
  Tensor features;  // N x K x C x H x W
};

NeighborField predict_neighbors(const DgrParams& p, const Tensor& x);

/// One attention aggregation: relu(sum_j softmax_j(<W1 x_i, W2 x_j>) W2 x_j).
/// Returns N x C' x H x W.
Tensor refine_step(const Tensor& w1, const Tensor& w2, const Tensor& x, const NeighborField& field);

/// Attention weights (N x K x H x W) that `refine_step` would use.
Tensor refine_weights(const Tensor& w1, const Tensor& w2, const Tensor& x, const NeighborField& field);

/// Runs config.layers rounds of neighbor prediction + refinement. Output has C channels.
Tensor forward(const DgrParams& p, const Tensor& x);

/// Exact parameter count of one module under `config`.
Index count_params(const DgrConfig& config);

}  // namespace casdgr::dgr
