#pragma once

#include "casdgr/config.hpp"
#include "casdgr/nn.hpp"

#include <vector>

namespace casdgr {

/// Adam over a fixed parameter list. Moments are kept in parameter order.
class Adam {
 public:
  Adam(nn::ParamList params, OptimizerConfig config);

  /// Applies one update from the accumulated grads, then clears them.
  void step();
  void zero_grad();

  std::uint64_t steps() const { return steps_; }
  const nn::ParamList& params() const { return params_; }
  const std::vector<Eigen::VectorXd>& first_moments() const { return m_; }
  const std::vector<Eigen::VectorXd>& second_moments() const { return v_; }
  void restore(std::uint64_t steps, std::vector<Eigen::VectorXd> m, std::vector<Eigen::VectorXd> v);

 private:
  nn::ParamList params_;
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<Eigen::VectorXd> m_, v_;
};

}  // namespace casdgr
