// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace udapter {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Receives the gradient and value of the op output and accumulates into the
// op inputs.
using BackwardFn =
    std::function<void(std::span<const double> out_grad, std::span<const double> out_value)>;

namespace detail {
struct Node;
}

// Dense row-major tensor with a reverse-mode autodiff slot.
//
// Values are stored in double. Trainable parameters are kept exactly
// representable in f32 (the optimizer and initializers round to f32), so the
// f32 weights container stores them losslessly. Copies are shallow handles
// onto the same storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  // Builds an op result. When no input requires grad the backward function is
  // dropped and the result is a constant.
  static Tensor make_op(const char* op_name, Shape shape, std::vector<double> values,
                        std::initializer_list<Tensor> inputs, BackwardFn backward);
  static Tensor make_op(const char* op_name, Shape shape, std::vector<double> values,
                        const std::vector<Tensor>& inputs, BackwardFn backward);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Leaf mutation for optimizers, loaders and finite-difference probes.
  std::span<double> mutable_values();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zeroed buffer on first use.
  std::span<double> grad_buffer() const;
  void zero_grad();

  // Reverse pass from a scalar; gradients accumulate into every reachable
  // tensor that requires grad.
  void backward() const;

  // Constant copy of the current value, disconnected from the tape.
  Tensor detach() const;
  // Independent leaf copy (value and requires_grad flag).
  Tensor clone() const;

  bool same_storage(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& node() const;

  std::shared_ptr<detail::Node> node_;
};

// Non-finite values produced by an op raise a DataError while checked mode is on
// (the default).
void set_checked_mode(bool enabled);
bool checked_mode();

// Rounds to the nearest f32 value.
inline double round_to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

// FNV-1a over the value bit patterns of the given tensors, in order.
std::uint64_t checksum(std::span<const Tensor> tensors);

}  // namespace udapter
