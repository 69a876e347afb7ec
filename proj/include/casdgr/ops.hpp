#pragma once

#include "casdgr/tensor.hpp"

#include <array>
#include <vector>

// Differentiable operations. Image-like tensors are N x C x H x W, row-major.
// Every function here records a backward rule when an input requires grad.

namespace casdgr {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
/// Clamp into [lo, hi]; gradient is zero where the input lies outside.
Tensor clamp(const Tensor& x, double lo, double hi);

/// Scalar (rank-0) reductions over every element.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

/// a: M x K, b: K x N.
Tensor matmul(const Tensor& a, const Tensor& b);

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// Cross-correlation. x: N x C x H x W, weight: O x C x k x k (k odd), bias: O or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions opts = {});
Index conv_output_extent(Index in, int kernel, Conv2dOptions opts);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

/// Bilinear resampling with half-pixel centers (align_corners = false).
Tensor bilinear_resize(const Tensor& x, Index out_h, Index out_w);

/// 2x2 mean pooling; H and W must be even.
Tensor avg_pool2(const Tensor& x);

/// Concatenate along axis 1. All other extents must agree.
Tensor concat_channels(const std::vector<Tensor>& xs);

/// x: N x 1 x ... -> N x c x ... by repetition.
Tensor expand_channels(const Tensor& x, Index c);

/// Group normalization over N x C x spatial. Channels are split into groups of
/// `group_size`; when C <= group_size a single group spans all channels.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Index group_size, double eps);

/// Per-position linear map over axis 1: w is O x C, x is B x C x ... -> B x O x ...
Tensor channel_project(const Tensor& w, const Tensor& x);

using Offset2 = std::array<int, 2>;  // (dy, dx)

/// offsets: N x 2K x H x W holding (dy, dx) per neighbor slot.
/// Returns N x K x 2 x H x W absolute (y, x) coordinates
/// (i, j) + layout[k] + offset, clamped to [0, H-1] x [0, W-1].
Tensor neighbor_coords(const Tensor& offsets, const std::vector<Offset2>& layout);

/// Bilinear gather of x (N x C x H x W) at coords (N x K x 2 x H x W) -> N x K x C x H x W.
/// Differentiable in both arguments; coordinates are clamped to the image rectangle.
Tensor bilinear_gather(const Tensor& x, const Tensor& coords);

/// Dot-product attention over K candidate keys per position.
/// query: N x C x H x W, keys: N x K x C x H x W.
/// out[:, :, i, j] = sum_k softmax_k(<query, keys_k>) keys_k.
Tensor attend(const Tensor& query, const Tensor& keys);
/// The softmax weights used by `attend`, N x K x H x W. Not differentiable.
Tensor attention_weights(const Tensor& query, const Tensor& keys);

/// Forward first differences with replicate boundary. x: N x C x H x W ->
/// N x 2C x H x W with channel 2c = d/dy and 2c + 1 = d/dx of channel c.
Tensor forward_diff(const Tensor& x);

/// g: N x 2 x H x W vector field. Divides each sample's field by
/// max(max_pixel |g|, eps).
Tensor normalize_gradient_field(const Tensor& g, double eps);

}  // namespace casdgr
