#pragma once

// Dense 2-D tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a node of a dynamically built computation
// graph. Operations in ops.hpp create new nodes that remember their parents
// and a closure that propagates the output gradient back to them. Calling
// backward() on a 1x1 tensor walks the graph in reverse topological order.
//
// Gradients are overwritten, not accumulated, on each backward pass: every
// node reachable from the loss has its gradient reset before propagation.

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace moie::diff {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using ColVector = Eigen::Matrix<double, Eigen::Dynamic, 1>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and adds into the parents' grads.
  std::function<void(Node&)> backward_fn;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v);

  // Internal: build an op node. `fn` receives the finished node.
  static Tensor from_op(Matrix value, std::vector<Tensor> parents,
                        std::function<void(Node&)> fn);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  // Mutable access is for optimizers and checkpoint loading only.
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->grad.size() > 0; }
  bool requires_grad() const { return node_->requires_grad; }
  void clear_grad() { node_->grad.resize(0, 0); }

  std::size_t rows() const { return static_cast<std::size_t>(node_->value.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(node_->value.cols()); }
  std::array<std::size_t, 2> shape() const { return {rows(), cols()}; }
  std::size_t size() const { return static_cast<std::size_t>(node_->value.size()); }

  // Value of a 1x1 tensor.
  double item() const;

  // Detached copy: same values, no graph history, no gradient tracking.
  Tensor detach() const;
  // Deep copy of a parameter into a fresh leaf (new identity, same values).
  Tensor clone_parameter() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// Runs reverse-mode differentiation from a scalar loss. Throws ShapeError if
// `loss` is not 1x1. Non-finite gradients are reported by optim::step.
void backward(const Tensor& loss);

// "[r, c]" for error messages.
std::string shape_str(const Matrix& m);

bool all_finite(const Matrix& m);

}  // namespace moie::diff
