#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stlt {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  // Empty until the first gradient contribution arrives.
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

// Dense row-major double tensor with an optional reverse-mode history.
//
// A Tensor is a shared handle: copies refer to the same node. Operations in
// ops.hpp never mutate their inputs; they produce new nodes that remember
// their parents when any parent requires a gradient and recording is enabled.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;
  // Leading extent and the product of the remaining extents. A rank-1
  // tensor is a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Only leaves (tensors without recorded parents) may be written in place.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same values, no history.
  Tensor detach() const;
  // Independent deep copy of value (and requires_grad flag) as a leaf.
  Tensor clone_leaf() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Builds an op result. The history is kept only when recording is enabled
  // and at least one parent requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);

 private:
  std::shared_ptr<detail::Node> node_;
};

bool grad_recording();

// Disables history recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Populates dLoss/dT for every tensor with requires_grad reachable from the
// scalar `loss`. Each node's backward runs exactly once, in reverse
// topological order. The recorded graph is released afterwards.
void backward(const Tensor& loss);

}  // namespace stlt
