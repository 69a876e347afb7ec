#pragma once

#include "casdgr/tensor.hpp"

#include <Eigen/Core>

namespace casdgr::metrics {

using Matte = Eigen::MatrixXd;  // H x W alpha map

/// SAD, Grad and Conn are reported in thousands.
inline constexpr double kReportScale = 1000.0;
inline constexpr double kGradSigma = 1.4;

struct MetricReport {
  double sad = 0;
  double mse = 0;
  double grad = 0;
  double conn = 0;
};

namespace detail {
template <typename A, typename B>
void require_same_size(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("metric inputs differ in size: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}
}  // namespace detail

template <typename A, typename B>
double sad(const Eigen::MatrixBase<A>& pred, const Eigen::MatrixBase<B>& gt) {
  detail::require_same_size(pred, gt);
  return (pred - gt).cwiseAbs().sum() / kReportScale;
}

template <typename A, typename B>
double mse(const Eigen::MatrixBase<A>& pred, const Eigen::MatrixBase<B>& gt) {
  detail::require_same_size(pred, gt);
  if (pred.size() == 0) return 0.0;
  return (pred - gt).squaredNorm() / static_cast<double>(pred.size());
}

/// 1-D factors of the first-derivative-of-Gaussian filter: the 2-D x-derivative
/// kernel is smooth * deriv^T (rows smooth, columns differentiate), normalized
/// to unit Frobenius norm. Half width ceil(sigma * sqrt(-2 ln(sqrt(2 pi) sigma 0.01))).
struct GaussianDerivative {
  Eigen::VectorXd smooth;
  Eigen::VectorXd deriv;
  int half_width() const { return static_cast<int>(smooth.size() / 2); }
};
GaussianDerivative gaussian_derivative(double sigma = kGradSigma);

/// Gradient magnitude after derivative-of-Gaussian filtering (convolution,
/// replicate border), computed with separable passes.
Matte gradient_magnitude(const Eigen::Ref<const Matte>& img, double sigma = kGradSigma);

/// sum (|grad pred| - |grad gt|)^2 / 1000.
double grad_error(const Eigen::Ref<const Matte>& pred, const Eigen::Ref<const Matte>& gt, double sigma = kGradSigma);

/// Connectivity error with thresholds 0.1 .. 0.9 and 4-connectivity, / 1000.
double conn_error(const Eigen::Ref<const Matte>& pred, const Eigen::Ref<const Matte>& gt);

/// Largest 4-connected component of `mask` (1 inside, 0 outside). Ties go to
/// the component met first in column-major scan order.
Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> largest_component(
    const Eigen::Ref<const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>>& mask);

MetricReport evaluate(const Eigen::Ref<const Matte>& pred, const Eigen::Ref<const Matte>& gt);

/// 1 x H x W or N=1 x 1 x H x W tensor to an H x W matte.
Matte to_matte(const Tensor& alpha);
Tensor from_matte(const Matte& m);

}  // namespace casdgr::metrics
