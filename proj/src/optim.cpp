#include "moie/diff/optim.hpp"

#include <cmath>

#include "moie/errors.hpp"

namespace moie::diff {

Optimizer::Optimizer(OptimConfig cfg, std::vector<NamedParameter> params)
    : cfg_(cfg), params_(std::move(params)) {
  if (!(cfg_.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (cfg_.weight_decay < 0.0) throw ConfigError("weight decay must be >= 0");
  for (const auto& p : params_) {
    if (!p.tensor.requires_grad()) {
      throw ConfigError("parameter '" + p.name + "' is not trainable");
    }
    if (cfg_.kind == OptimKind::adam) {
      m_.push_back(Matrix::Zero(p.tensor.value().rows(), p.tensor.value().cols()));
      v_.push_back(Matrix::Zero(p.tensor.value().rows(), p.tensor.value().cols()));
    }
  }
}

void Optimizer::step() {
  for (const auto& p : params_) {
    if (p.tensor.has_grad() && !p.tensor.grad().allFinite()) {
      throw NumericalError("non-finite gradient in parameter '" + p.name + "' at step " +
                           std::to_string(step_count_ + 1));
    }
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor param = params_[i].tensor;
    Matrix& w = param.mutable_value();
    Matrix g = param.has_grad() ? param.grad() : Matrix::Zero(w.rows(), w.cols());
    if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * w;
    if (cfg_.kind == OptimKind::sgd) {
      w -= cfg_.lr * g;
    } else {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
      const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
      const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
      w.array() -= cfg_.lr * (m_[i].array() / bc1) /
                   ((v_[i].array() / bc2).sqrt() + cfg_.eps);
    }
    param.clear_grad();
  }
}

std::vector<NamedParameter> concat(std::vector<NamedParameter> a,
                                   const std::vector<NamedParameter>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace moie::diff
