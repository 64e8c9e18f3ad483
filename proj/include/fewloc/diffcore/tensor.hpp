#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fewloc::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Operand extents disagree. The message names the operation and the axis at fault.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
  ShapeError(const std::string& op, const std::string& axis, std::size_t expected,
             std::size_t actual);
};

class Node;
using BackwardFn = std::function<void(Node&)>;

/// One vertex of the computation graph. Values are dense and row-major.
class Node {
 public:
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  /// Gradient storage, zero-filled on first use.
  std::vector<double>& grad_buffer();
};

/// Shared handle to a graph node. Copies alias the same storage, so a
/// parameter tensor can be updated in place after a backward pass.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
  /// calls; interior gradients are recomputed each time.
  void backward() const;

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an operation result. Parents and the backward closure are kept only
/// when at least one parent requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                   BackwardFn backward);

void expect_rank(const std::string& op, const Tensor& t, std::size_t rank);

}  // namespace fewloc::diff
