#include "tfsdiff/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace tfsdiff {

namespace {
thread_local bool g_grad_enabled = true;

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  require(static_cast<bool>(node), ErrorCode::kInvalidArgument,
          "use of an undefined tensor");
  return *node;
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    require(d > 0, ErrorCode::kShape, "tensor dimensions must be positive, got " + shape_str(shape));
  }
  require(shape_numel(shape) == data.size(), ErrorCode::kShape,
          "tensor data length " + std::to_string(data.size()) + " does not match shape " +
              shape_str(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  Tensor t = wrap(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  require(axis < s.size(), ErrorCode::kShape,
          "axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  return node_->value;
}

double Tensor::item() const {
  require(numel() == 1, ErrorCode::kShape, "item() on non-scalar tensor " + shape_str(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(node_);
  require(node_->is_leaf() || flag, ErrorCode::kInvalidArgument,
          "cannot clear requires_grad on an interior node; use detach()");
  node_->requires_grad = flag;
  if (flag) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
  }
}

std::span<const double> Tensor::grad() const {
  const auto& n = checked(node_);
  if (!n.requires_grad) return {};
  return n.grad;
}

std::span<double> Tensor::mutable_grad() {
  checked(node_);
  if (!node_->requires_grad) return {};
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(node_);
  if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
}

void Tensor::backward() const {
  const auto& root = checked(node_);
  require(root.value.size() == 1, ErrorCode::kShape,
          "backward() requires a scalar loss, got shape " + shape_str(root.shape));
  require(root.requires_grad, ErrorCode::kInvalidArgument,
          "backward() on a tensor that is not connected to any requires_grad leaf");

  // Iterative post-order DFS: parents land before children in `order`.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (n->is_leaf()) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf()) n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (n->is_leaf()) {
      for (double g : n->grad) {
        if (!std::isfinite(g)) fail(ErrorCode::kNonFinite, "non-finite gradient after backward()");
      }
    } else {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  // Fresh leaf node; values are copied because Node owns its storage.
  auto out = std::make_shared<detail::Node>();
  out->shape = n.shape;
  out->value = n.value;
  return wrap(std::move(out));
}

Tensor Tensor::clone(bool requires_grad) const {
  Tensor t = detach();
  t.set_requires_grad(requires_grad);
  return t;
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  for (double v : value) {
    if (!std::isfinite(v)) fail(ErrorCode::kNonFinite, "operation produced a non-finite value");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (Tensor& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace detail

}  // namespace tfsdiff
