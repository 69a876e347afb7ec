#include "casdgr/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace casdgr {

namespace {

thread_local bool t_grad_enabled = true;
#ifdef NDEBUG
thread_local bool t_finite_checks = false;
#else
thread_local bool t_finite_checks = true;
#endif

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= e;
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->value = Eigen::VectorXd::Constant(casdgr::numel(shape), fill);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (casdgr::numel(shape) != static_cast<Index>(values.size())) {
    throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(values.size()) + " values");
  }
  return from(std::move(shape), Eigen::Map<const Eigen::VectorXd>(values.data(), values.size()), requires_grad);
}

Tensor Tensor::from(Shape shape, const Eigen::VectorXd& values, bool requires_grad) {
  if (casdgr::numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = values;
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Index Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError("axis out of range for shape " + to_string(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

Eigen::VectorXd& Tensor::mutable_data() {
  if (!is_leaf()) throw std::logic_error("mutable_data() on a non-leaf tensor");
  return node_->value;
}

Eigen::VectorXd Tensor::grad() const {
  if (has_grad()) return node_->grad;
  return Eigen::VectorXd::Zero(numel());
}

Tensor Tensor::detach() const { return from(shape(), values(), false); }

void Tensor::backward() const {
  if (!defined()) throw std::logic_error("backward() on undefined tensor");
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got shape " + to_string(shape()));
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order of the reachable graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (n->backward) n->grad = Eigen::VectorXd::Zero(n->value.size());
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }
void set_finite_checks(bool enabled) { t_finite_checks = enabled; }
bool finite_checks() { return t_finite_checks; }

namespace detail {

Tensor make_result(const char* op, Shape shape, Eigen::VectorXd value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  if (t_finite_checks && !value.allFinite()) {
    throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace casdgr
