#pragma once

#include "casdgr/cascade.hpp"

#include <vector>

namespace casdgr {

struct CompositeSample;

namespace loss {

struct LossWeights {
  std::vector<double> alpha;  // one per stage 1..M-1; empty means all 1
  double comp = 1.0;
  double grad = 1.0;

  double alpha_weight(int m) const;  // 1-based, m < M
};

struct LossReport {
  std::vector<Tensor> alpha;  // scalar per stage
  Tensor comp;
  Tensor grad;
  Tensor total;
};

/// Floor on the gradient-field normalizer.
inline constexpr double kGradNormEps = 1e-6;

/// Mean |clip(pred) - gt|. pred, gt: N x 1 x h x w.
Tensor alpha_loss(const Tensor& pred, const Tensor& gt);

/// Mean over pixels and colour channels of |I - a F - (1 - a) B| with a = clip(alpha).
/// alpha: N x 1 x H x W; image, fg, bg: N x 3 x H x W.
Tensor comp_loss(const Tensor& alpha, const Tensor& image, const Tensor& fg, const Tensor& bg);

/// Mean over pixels of the L1 distance between the max-magnitude-normalized
/// forward-difference gradient fields of clip(pred) and gt.
Tensor grad_loss(const Tensor& pred, const Tensor& gt);

/// Batched training targets; gt alpha is resized to every stage.
struct Batch {
  Tensor image, fg, bg;  // N x 3 x R x R
  Tensor alpha;          // N x 1 x R x R
};

Batch make_batch(const std::vector<CompositeSample>& samples);

/// sum_{m<M} w_m L_a^m + L_a^M + w_c L_c^M + w_g L_g^M
LossReport total_loss(const AlphaPrediction& preds, const Batch& batch, const LossWeights& w);

}  // namespace loss
}  // namespace casdgr
