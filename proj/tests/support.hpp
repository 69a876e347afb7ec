#pragma once

#include "casdgr/ops.hpp"
#include "casdgr/random.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace casdgr::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  Eigen::VectorXd v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(lo, hi);
  return Tensor::from(shape, v, grad);
}

/// ||a - n|| / max(||a||, ||n||), 0 when both vanish.
inline double relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& n) {
  const double scale = std::max(a.norm(), n.norm());
  return scale == 0.0 ? 0.0 : (a - n).norm() / scale;
}

/// Compares backward() of a scalar function against central differences for
/// every input. Returns the worst relative error.
inline double gradient_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    const Eigen::VectorXd analytic = t.grad();
    Eigen::VectorXd numeric(t.numel());
    for (Index i = 0; i < t.numel(); ++i) {
      const double saved = t.mutable_data()[i];
      t.mutable_data()[i] = saved + h;
      double up;
      double down;
      {
        NoGradGuard g;
        up = f().item();
      }
      t.mutable_data()[i] = saved - h;
      {
        NoGradGuard g;
        down = f().item();
      }
      t.mutable_data()[i] = saved;
      numeric[i] = (up - down) / (2 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

struct KinkCheck {
  double error = 0;  // worst per-input relative error over the coordinates kept
  Index skipped = 0;
  Index total = 0;
};

/// Central differences for functions with kinks (clip, abs, relu, lattice
/// crossings in bilinear sampling). For smooth f the gap between the forward
/// and backward one-sided slopes is f''h, so it scales linearly with h; a
/// stencil that straddles a kink breaks that scaling. Probing h/2 and h/3
/// leaves no kink position undetected (each probe alone has one blind spot,
/// at h/3 and h/4 respectively). Such coordinates are dropped from the
/// comparison and counted.
inline KinkCheck gradient_check_kinks(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  NoGradGuard guard;
  const double base = f().item();
  KinkCheck out;
  for (auto& t : inputs) {
    const Eigen::VectorXd grad = t.grad();
    std::vector<double> analytic, numeric;
    for (Index i = 0; i < t.numel(); ++i) {
      const double saved = t.mutable_data()[i];
      auto at = [&](double d) {
        t.mutable_data()[i] = saved + d;
        return f().item();
      };
      const double up = at(h), down = at(-h);
      auto gap = [&](double d, double u, double w) { return (u - base) / d - (base - w) / d; };
      const double g1 = gap(h, up, down);
      const double g2 = gap(h / 2, at(h / 2), at(-h / 2));
      const double g3 = gap(h / 3, at(h / 3), at(-h / 3));
      t.mutable_data()[i] = saved;
      ++out.total;
      const double tol = 0.1 * std::abs(g1) + 1e-8;
      if (std::abs(g2 - g1 / 2) > tol || std::abs(g3 - g1 / 3) > tol) {
        ++out.skipped;
        continue;
      }
      analytic.push_back(grad[i]);
      numeric.push_back((up - down) / (2 * h));
    }
    const Index n = static_cast<Index>(analytic.size());
    out.error = std::max(out.error, relative_error(Eigen::Map<Eigen::VectorXd>(analytic.data(), n),
                                                   Eigen::Map<Eigen::VectorXd>(numeric.data(), n)));
  }
  return out;
}

/// Fixed pseudo-random projection to a scalar, so every output element
/// carries a distinct weight. Same shape, same weights.
inline Tensor project(const Tensor& y) {
  Rng rng(0x5eed + static_cast<std::uint64_t>(y.numel()));
  return sum(y * random_tensor(y.shape(), rng, -1.0, 1.0, false));
}

}  // namespace casdgr::testing
