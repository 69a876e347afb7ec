#include "casdgr/optim.hpp"

#include <cmath>

namespace casdgr {

Adam::Adam(nn::ParamList params, OptimizerConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    m_.push_back(Eigen::VectorXd::Zero(p.tensor.numel()));
    v_.push_back(Eigen::VectorXd::Zero(p.tensor.numel()));
  }
}

void Adam::step() {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].tensor;
    if (!p.has_grad()) continue;
    const Eigen::VectorXd g = p.grad();
    m_[i] = config_.beta1 * m_[i] + (1 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1 - config_.beta2) * g.cwiseProduct(g);
    p.mutable_data().array() -=
        config_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.eps);
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::restore(std::uint64_t steps, std::vector<Eigen::VectorXd> m, std::vector<Eigen::VectorXd> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) throw std::invalid_argument("Adam::restore: moment count mismatch");
  for (size_t i = 0; i < params_.size(); ++i) {
    if (m[i].size() != params_[i].tensor.numel() || v[i].size() != params_[i].tensor.numel()) {
      throw std::invalid_argument("Adam::restore: moment size mismatch for " + params_[i].name);
    }
  }
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace casdgr
