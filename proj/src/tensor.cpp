// SPDX-License-Identifier: Apache-2.0
#include "udapter/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <unordered_set>

#include "udapter/error.hpp"

namespace udapter {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

namespace {

bool g_checked = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_to_string(shape) + " given " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

void set_checked_mode(bool enabled) { g_checked = enabled; }
bool checked_mode() { return g_checked; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

Tensor Tensor::make_op(const char* op_name, Shape shape, std::vector<double> values,
                       std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return make_op(op_name, std::move(shape), std::move(values), std::vector<Tensor>(inputs),
                 std::move(backward));
}

Tensor Tensor::make_op(const char* op_name, Shape shape, std::vector<double> values,
                       const std::vector<Tensor>& inputs, BackwardFn backward) {
  if (g_checked) {
    for (double v : values) {
      if (!std::isfinite(v)) {
        throw DataError(std::string("non-finite value produced by ") + op_name);
      }
    }
  }
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  auto node = new_node(std::move(shape), std::move(values), needs_grad);
  if (needs_grad) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) node->parents.push_back(in.node_);
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

detail::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node().value.size(); }

std::span<const double> Tensor::values() const { return node().value; }
std::span<double> Tensor::mutable_values() { return node().value; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return node().value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node().requires_grad = flag; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node().grad; }

std::span<double> Tensor::grad_buffer() const {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = node();
  n.grad.assign(n.value.size(), 0.0);
}

void Tensor::backward() const {
  auto& root = node();
  if (root.value.size() != 1) {
    throw DimensionError("backward() needs a scalar, got " + shape_to_string(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root, 0}};
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  if (root.grad.empty()) root.grad.assign(1, 0.0);
  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(n->grad, n->value);
  }
}

Tensor Tensor::detach() const { return from_values(shape(), node().value, false); }

Tensor Tensor::clone() const { return from_values(shape(), node().value, requires_grad()); }

std::uint64_t checksum(std::span<const Tensor> tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors) {
    for (double v : t.values()) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, &v, sizeof bits);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xFFu;
        h *= 1099511628211ULL;
      }
    }
  }
  return h;
}

}  // namespace udapter
