#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace casdgr {

using Index = std::int64_t;
using Shape = std::vector<Index>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op produces NaN/Inf while finite checks are enabled.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Eigen::VectorXd value;
  Eigen::VectorXd grad;  // empty until backward reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad, accumulates into inputs' grads.
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  Eigen::VectorXd& grad_buffer() {
    if (grad.size() != value.size()) grad = Eigen::VectorXd::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 array taking part in reverse-mode differentiation.
///
/// A Tensor is a cheap handle: copies share the underlying node. Values are
/// immutable once produced by an op; only leaves may be written through
/// `mutable_data()` (parameters updated by an optimizer). The graph is built
/// on the fly and walked in reverse topological order by `backward()`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor from(Shape shape, const Eigen::VectorXd& values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false) { return full({}, v, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index dim(int axis) const;
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  Index numel() const { return node_->value.size(); }

  const Eigen::VectorXd& values() const { return node_->value; }
  std::span<const double> data() const { return {node_->value.data(), static_cast<size_t>(node_->value.size())}; }
  double operator[](Index i) const { return node_->value[i]; }
  double item() const;

  /// Leaves only. Throws if the tensor was produced by an op.
  Eigen::VectorXd& mutable_data();

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  /// Gradient buffer; zeros of the right size if backward never reached this tensor.
  Eigen::VectorXd grad() const;
  void zero_grad() { node_->grad.resize(0); }

  /// New leaf sharing no graph history with this tensor.
  Tensor detach() const;

  /// Populates grads of all reachable requires_grad leaves. Leaf grads
  /// accumulate across calls; intermediate grads are recomputed each call.
  void backward() const;

  // internal
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Thread-local switch: when on, every forward op checks its output for NaN/Inf.
/// On by default in debug builds.
void set_finite_checks(bool enabled);
bool finite_checks();

namespace detail {

/// Wraps a freshly computed value into a tensor, recording the backward
/// rule when any input needs gradients.
Tensor make_result(const char* op, Shape shape, Eigen::VectorXd value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace casdgr
