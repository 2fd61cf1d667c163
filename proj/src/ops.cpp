#include "moie/diff/ops.hpp"

#include <cmath>
#include <string>

#include "moie/errors.hpp"

namespace moie::diff {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
}

// Adds `g` into the gradient of parent `i` if that parent is tracked.
template <typename Expr>
void accumulate(Node& self, std::size_t i, const Expr& g) {
  Node& p = *self.parents[i];
  if (p.requires_grad) p.grad += g;
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.cols() != weight.cols()) {
    throw ShapeError("linear: input " + shape_str(x.value()) + " does not match weight " +
                     shape_str(weight.value()));
  }
  if (bias.rows() != 1 || bias.cols() != weight.rows()) {
    throw ShapeError("linear: bias " + shape_str(bias.value()) + " does not match weight " +
                     shape_str(weight.value()));
  }
  Matrix out = x.value() * weight.value().transpose();
  out.rowwise() += bias.value().row(0);
  return Tensor::from_op(std::move(out), {x, weight, bias}, [](Node& self) {
    const Matrix& g = self.grad;
    const Node& xn = *self.parents[0];
    const Node& wn = *self.parents[1];
    if (xn.requires_grad) self.parents[0]->grad.noalias() += g * wn.value;
    if (wn.requires_grad) self.parents[1]->grad.noalias() += g.transpose() * xn.value;
    accumulate(self, 2, g.colwise().sum());
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.value()) + " x " + shape_str(b.value()));
  }
  return Tensor::from_op(a.value() * b.value(), {a, b}, [](Node& self) {
    const Matrix& g = self.grad;
    if (self.parents[0]->requires_grad)
      self.parents[0]->grad.noalias() += g * self.parents[1]->value.transpose();
    if (self.parents[1]->requires_grad)
      self.parents[1]->grad.noalias() += self.parents[0]->value.transpose() * g;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return Tensor::from_op(a.value() + b.value(), {a, b}, [](Node& self) {
    accumulate(self, 0, self.grad);
    accumulate(self, 1, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return Tensor::from_op(a.value() - b.value(), {a, b}, [](Node& self) {
    accumulate(self, 0, self.grad);
    accumulate(self, 1, -self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return Tensor::from_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    accumulate(self, 0, self.grad.cwiseProduct(self.parents[1]->value));
    accumulate(self, 1, self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  return Tensor::from_op(a.value().cwiseQuotient(b.value()), {a, b}, [](Node& self) {
    const Matrix& bv = self.parents[1]->value;
    accumulate(self, 0, self.grad.cwiseQuotient(bv));
    if (self.parents[1]->requires_grad) {
      self.parents[1]->grad -=
          self.grad.cwiseProduct(self.value).cwiseQuotient(bv);
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: " + shape_str(a.value()) + " + " + shape_str(row.value()));
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return Tensor::from_op(std::move(out), {a, row}, [](Node& self) {
    accumulate(self, 0, self.grad);
    accumulate(self, 1, self.grad.colwise().sum());
  });
}

Tensor mul_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("mul_row: " + shape_str(a.value()) + " * " + shape_str(row.value()));
  }
  Matrix out = a.value() * row.value().row(0).asDiagonal();
  return Tensor::from_op(std::move(out), {a, row}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& rv = self.parents[1]->value;
    accumulate(self, 0, self.grad * rv.row(0).asDiagonal());
    accumulate(self, 1, self.grad.cwiseProduct(av).colwise().sum());
  });
}

Tensor mul_col(const Tensor& a, const Tensor& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw ShapeError("mul_col: " + shape_str(a.value()) + " * " + shape_str(col.value()));
  }
  Matrix out = col.value().col(0).asDiagonal() * a.value();
  return Tensor::from_op(std::move(out), {a, col}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& cv = self.parents[1]->value;
    accumulate(self, 0, cv.col(0).asDiagonal() * self.grad);
    accumulate(self, 1, self.grad.cwiseProduct(av).rowwise().sum());
  });
}

Tensor scale(const Tensor& a, double s) {
  return Tensor::from_op(a.value() * s, {a},
                         [s](Node& self) { accumulate(self, 0, self.grad * s); });
}

Tensor add_scalar(const Tensor& a, double s) {
  Matrix out = a.value().array() + s;
  return Tensor::from_op(std::move(out), {a}, [](Node& self) { accumulate(self, 0, self.grad); });
}

Tensor relu(const Tensor& a) {
  return Tensor::from_op(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    accumulate(self, 0, (av.array() > 0.0).cast<double>().matrix().cwiseProduct(self.grad));
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix out = a.value().unaryExpr([](double v) {
    // Split by sign so exp never overflows.
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
  return Tensor::from_op(std::move(out), {a}, [](Node& self) {
    const Matrix& s = self.value;
    accumulate(self, 0, self.grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp();
  return Tensor::from_op(std::move(out), {a}, [](Node& self) {
    accumulate(self, 0, self.grad.cwiseProduct(self.value));
  });
}

Tensor log(const Tensor& a) {
  Matrix out = a.value().array().log();
  return Tensor::from_op(std::move(out), {a}, [](Node& self) {
    accumulate(self, 0, self.grad.cwiseQuotient(self.parents[0]->value));
  });
}

Tensor square(const Tensor& a) {
  return Tensor::from_op(a.value().cwiseAbs2(), {a}, [](Node& self) {
    accumulate(self, 0, 2.0 * self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return Tensor::from_op(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.grad.array() += self.grad(0, 0);
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  const double n = static_cast<double>(a.size());
  Matrix out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return Tensor::from_op(std::move(out), {a}, [n](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.grad.array() += self.grad(0, 0) / n;
  });
}

Tensor row_sum(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  return Tensor::from_op(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.grad.colwise() += self.grad.col(0);
  });
}

Tensor softmax_rows(const Tensor& a) {
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i).array() -= out.row(i).maxCoeff();
    out.row(i) = out.row(i).array().exp();
    out.row(i) /= out.row(i).sum();
  }
  return Tensor::from_op(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Matrix& s = self.value;
    // d_in = s * (g - <g, s>) per row
    ColVector dot = s.cwiseProduct(self.grad).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dot;
    p.grad += s.cwiseProduct(g);
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  Matrix out = a.value();
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    const double lse = m + std::log((out.row(i).array() - m).exp().sum());
    out.row(i).array() -= lse;
  }
  return Tensor::from_op(std::move(out), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Matrix s = self.value.array().exp();
    ColVector gsum = self.grad.rowwise().sum();
    p.grad += self.grad - (s.array().colwise() * gsum.array()).matrix();
  });
}

Tensor divide_by_row_max(const Tensor& a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(av.rows()));
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    Eigen::Index j = 0;
    const double m = av.row(i).maxCoeff(&j);
    if (m == 0.0) throw NumericalError("divide_by_row_max: row maximum is zero");
    argmax[static_cast<std::size_t>(i)] = j;
    out.row(i) = av.row(i) / m;
  }
  return Tensor::from_op(std::move(out), {a}, [argmax](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Matrix& av = p.value;
    for (Eigen::Index i = 0; i < av.rows(); ++i) {
      const Eigen::Index j = argmax[static_cast<std::size_t>(i)];
      const double m = av(i, j);
      p.grad.row(i) += self.grad.row(i) / m;
      // out_k = a_k / m  =>  d out_k / d m = -a_k / m^2
      p.grad(i, j) -= self.grad.row(i).dot(av.row(i)) / (m * m);
    }
  });
}

Tensor row(const Tensor& a, std::size_t i) {
  if (i >= a.rows()) throw ShapeError("row index out of range");
  const auto r = static_cast<Eigen::Index>(i);
  return Tensor::from_op(a.value().row(r), {a}, [r](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.grad.row(r) += self.grad.row(0);
  });
}

Tensor col(const Tensor& a, std::size_t j) {
  if (j >= a.cols()) throw ShapeError("column index out of range");
  const auto c = static_cast<Eigen::Index>(j);
  return Tensor::from_op(a.value().col(c), {a}, [c](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.grad.col(c) += self.grad.col(0);
  });
}

Tensor hconcat(std::span<const Tensor> cols) {
  if (cols.empty()) throw ShapeError("hconcat of nothing");
  const std::size_t rows = cols.front().rows();
  Eigen::Index total = 0;
  for (const auto& t : cols) {
    if (t.rows() != rows) throw ShapeError("hconcat: row count mismatch");
    total += static_cast<Eigen::Index>(t.cols());
  }
  Matrix out(static_cast<Eigen::Index>(rows), total);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& t : cols) {
    offsets.push_back(off);
    out.middleCols(off, static_cast<Eigen::Index>(t.cols())) = t.value();
    off += static_cast<Eigen::Index>(t.cols());
  }
  std::vector<Tensor> parents(cols.begin(), cols.end());
  return Tensor::from_op(std::move(out), std::move(parents), [offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (p.requires_grad) p.grad += self.grad.middleCols(offsets[k], p.value.cols());
    }
  });
}

Tensor pick(const Tensor& a, std::span<const int> index) {
  if (index.size() != a.rows()) throw ShapeError("pick: index length != rows");
  Matrix out(static_cast<Eigen::Index>(a.rows()), 1);
  std::vector<int> idx(index.begin(), index.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= a.cols()) {
      throw ShapeError("pick: index " + std::to_string(idx[i]) + " out of range at row " +
                       std::to_string(i));
    }
    out(static_cast<Eigen::Index>(i), 0) = a.value()(static_cast<Eigen::Index>(i), idx[i]);
  }
  return Tensor::from_op(std::move(out), {a}, [idx](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      p.grad(static_cast<Eigen::Index>(i), idx[i]) += self.grad(static_cast<Eigen::Index>(i), 0);
    }
  });
}

}  // namespace moie::diff
