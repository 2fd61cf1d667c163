#include "moie/diff/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "moie/errors.hpp"

namespace moie::diff {

Tensor Tensor::constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Tensor(std::move(n));
}

Tensor Tensor::parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Tensor Tensor::from_op(Matrix value, std::vector<Tensor> parents,
                       std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.node_->requires_grad) n->requires_grad = true;
  }
  if (n->requires_grad) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node_);
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

double Tensor::item() const {
  if (node_->value.rows() != 1 || node_->value.cols() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_str(node_->value));
  }
  return node_->value(0, 0);
}

Tensor Tensor::detach() const { return constant(node_->value); }

Tensor Tensor::clone_parameter() const {
  Tensor t = parameter(node_->value);
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

namespace {

void topo_sort(Node* root, std::vector<Node*>& order) {
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; graphs from long training loops are never
  // deep, but an explicit stack keeps recursion depth out of the picture.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward() requires a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.value()) : std::string("undefined")));
  }
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  topo_sort(root, order);
  for (Node* n : order) n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
  root->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << "[" << m.rows() << ", " << m.cols() << "]";
  return os.str();
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace moie::diff
