#include "casdgr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace casdgr::metrics {

namespace {

using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

double gauss(double x, double sigma) {
  return std::exp(-x * x / (2 * sigma * sigma)) / (sigma * std::sqrt(2 * std::numbers::pi));
}

double dgauss(double x, double sigma) { return -x * gauss(x, sigma) / (sigma * sigma); }

// out(y, x) = sum_b k(b) in(y, clamp(x - b)), b centred.
Matte convolve_rows(const Matte& in, const Eigen::VectorXd& k) {
  const Index h = in.rows(), w = in.cols(), r = k.size() / 2;
  Matte out = Matte::Zero(h, w);
  for (Index x = 0; x < w; ++x) {
    for (Index b = -r; b <= r; ++b) {
      const Index sx = std::clamp<Index>(x - b, 0, w - 1);
      out.col(x) += k[b + r] * in.col(sx);
    }
  }
  return out;
}

Matte convolve_cols(const Matte& in, const Eigen::VectorXd& k) {
  const Index h = in.rows(), r = k.size() / 2;
  Matte out = Matte::Zero(h, in.cols());
  for (Index y = 0; y < h; ++y) {
    for (Index a = -r; a <= r; ++a) {
      const Index sy = std::clamp<Index>(y - a, 0, h - 1);
      out.row(y) += k[a + r] * in.row(sy);
    }
  }
  return out;
}

}  // namespace

GaussianDerivative gaussian_derivative(double sigma) {
  const int half = static_cast<int>(std::ceil(sigma * std::sqrt(-2 * std::log(std::sqrt(2 * std::numbers::pi) * sigma * 1e-2))));
  GaussianDerivative g;
  g.smooth.resize(2 * half + 1);
  g.deriv.resize(2 * half + 1);
  for (int i = -half; i <= half; ++i) {
    g.smooth[i + half] = gauss(i, sigma);
    g.deriv[i + half] = dgauss(i, sigma);
  }
  // ||smooth deriv^T||_F = ||smooth|| ||deriv||
  g.smooth /= g.smooth.norm();
  g.deriv /= g.deriv.norm();
  return g;
}

Matte gradient_magnitude(const Eigen::Ref<const Matte>& img, double sigma) {
  const GaussianDerivative g = gaussian_derivative(sigma);
  const Matte src = img;
  const Matte gx = convolve_cols(convolve_rows(src, g.deriv), g.smooth);
  const Matte gy = convolve_cols(convolve_rows(src, g.smooth), g.deriv);
  return (gx.array().square() + gy.array().square()).sqrt().matrix();
}

double grad_error(const Eigen::Ref<const Matte>& pred, const Eigen::Ref<const Matte>& gt, double sigma) {
  detail::require_same_size(pred, gt);
  return (gradient_magnitude(pred, sigma) - gradient_magnitude(gt, sigma)).squaredNorm() / kReportScale;
}

Mask largest_component(const Eigen::Ref<const Mask>& mask) {
  const Index h = mask.rows(), w = mask.cols();
  Eigen::MatrixXi label = Eigen::MatrixXi::Zero(h, w);
  int best_label = 0;
  Index best_size = 0;
  int next = 0;
  std::vector<std::pair<Index, Index>> queue;
  for (Index x = 0; x < w; ++x) {
    for (Index y = 0; y < h; ++y) {
      if (!mask(y, x) || label(y, x) != 0) continue;
      ++next;
      queue.assign(1, {y, x});
      label(y, x) = next;
      for (size_t head = 0; head < queue.size(); ++head) {
        const auto [cy, cx] = queue[head];
        constexpr Index dy[4] = {-1, 1, 0, 0};
        constexpr Index dx[4] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          const Index ny = cy + dy[d], nx = cx + dx[d];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w || !mask(ny, nx) || label(ny, nx) != 0) continue;
          label(ny, nx) = next;
          queue.emplace_back(ny, nx);
        }
      }
      if (static_cast<Index>(queue.size()) > best_size) {
        best_size = static_cast<Index>(queue.size());
        best_label = next;
      }
    }
  }
  if (best_label == 0) return Mask::Constant(h, w, false);
  return (label.array() == best_label).matrix();
}

double conn_error(const Eigen::Ref<const Matte>& pred, const Eigen::Ref<const Matte>& gt) {
  detail::require_same_size(pred, gt);
  const Index h = pred.rows(), w = pred.cols();
  // Level at which each pixel first drops out of the dominant connected region.
  Matte level = Matte::Constant(h, w, -1.0);
  double previous = 0.0;
  for (int step = 1; step <= 9; ++step) {
    const double theta = step / 10.0;
    const Mask both = (pred.array() >= theta && gt.array() >= theta).matrix();
    const Mask omega = largest_component(both);
    for (Index x = 0; x < w; ++x) {
      for (Index y = 0; y < h; ++y) {
        if (level(y, x) == -1.0 && !omega(y, x)) level(y, x) = previous;
      }
    }
    previous = theta;
  }
  level = (level.array() == -1.0).select(1.0, level);
  auto phi = [&](const Eigen::Ref<const Matte>& a) {
    const Eigen::ArrayXXd d = a.array() - level.array();
    return (1.0 - d * (d >= 0.15).cast<double>()).eval();
  };
  return (phi(pred) - phi(gt)).abs().sum() / kReportScale;
}

MetricReport evaluate(const Eigen::Ref<const Matte>& pred, const Eigen::Ref<const Matte>& gt) {
  return {sad(pred, gt), mse(pred, gt), grad_error(pred, gt), conn_error(pred, gt)};
}

Matte to_matte(const Tensor& alpha) {
  Shape s = alpha.shape();
  while (s.size() > 2 && s.front() == 1) s.erase(s.begin());
  if (s.size() != 2) throw ShapeError("to_matte expects a single-channel map, got " + to_string(alpha.shape()));
  // Tensor storage is row-major.
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      alpha.values().data(), s[0], s[1]);
}

Tensor from_matte(const Matte& m) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  return Tensor::from({1, m.rows(), m.cols()}, Eigen::Map<const Eigen::VectorXd>(rm.data(), rm.size()));
}

}  // namespace casdgr::metrics
