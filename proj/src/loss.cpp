#include "moie/diff/loss.hpp"

#include <cmath>
#include <string>

#include "moie/diff/ops.hpp"
#include "moie/errors.hpp"

namespace moie::diff {

namespace {

void check_labels(const Tensor& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows()) {
    throw ShapeError("labels length " + std::to_string(labels.size()) + " != batch " +
                     std::to_string(logits.rows()));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(logits.cols()) + ")");
    }
  }
}

}  // namespace

Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_labels(logits, labels);
  return scale(pick(log_softmax_rows(logits), labels), -1.0);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return mean(cross_entropy_per_sample(logits, labels));
}

Tensor bce_with_logits_per_sample(const Tensor& logits, const Matrix& targets) {
  if (targets.rows() != static_cast<Eigen::Index>(logits.rows()) ||
      targets.cols() != static_cast<Eigen::Index>(logits.cols())) {
    throw ShapeError("bce: targets " + shape_str(targets) + " vs logits " +
                     shape_str(logits.value()));
  }
  // softplus(z) - t*z, evaluated stably, with gradient sigmoid(z) - t.
  const Matrix& z = logits.value();
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double v = z.data()[i];
    const double softplus = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    out.data()[i] = softplus - targets.data()[i] * v;
  }
  Matrix t = targets;
  return Tensor::from_op(std::move(out), {logits}, [t](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const Matrix& zv = p.value;
    for (Eigen::Index i = 0; i < zv.size(); ++i) {
      const double v = zv.data()[i];
      const double s = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      p.grad.data()[i] += self.grad.data()[i] * (s - t.data()[i]);
    }
  });
}

Tensor kd_loss_per_sample(const Tensor& student_logits, const Matrix& teacher_logits,
                          std::span<const int> labels, DistillParams p) {
  if (!(p.temperature > 0.0)) {
    throw ConfigError("distillation temperature must be > 0, got " +
                      std::to_string(p.temperature));
  }
  if (!(p.alpha >= 0.0 && p.alpha <= 1.0)) {
    throw ConfigError("distillation alpha must lie in [0, 1], got " + std::to_string(p.alpha));
  }
  if (teacher_logits.rows() != static_cast<Eigen::Index>(student_logits.rows()) ||
      teacher_logits.cols() != static_cast<Eigen::Index>(student_logits.cols())) {
    throw ShapeError("kd_loss: teacher " + shape_str(teacher_logits) + " vs student " +
                     shape_str(student_logits.value()));
  }
  check_labels(student_logits, labels);

  const double inv_t = 1.0 / p.temperature;
  const Tensor teacher_log_p = log_softmax_rows(Tensor::constant(teacher_logits * inv_t));
  const Matrix teacher_p = teacher_log_p.value().array().exp();
  const Tensor student_log_p = log_softmax_rows(scale(student_logits, inv_t));

  // KL(p_t || p_s) = sum_c p_t (log p_t - log p_s); the p_t log p_t part is constant.
  const Tensor tp = Tensor::constant(teacher_p);
  const Tensor kl = row_sum(mul(tp, sub(teacher_log_p, student_log_p)));
  const Tensor soft = scale(kl, p.alpha * p.temperature * p.temperature);
  if (p.alpha == 1.0) return soft;
  const Tensor hard = scale(cross_entropy_per_sample(student_logits, labels), 1.0 - p.alpha);
  if (p.alpha == 0.0) return hard;
  return add(soft, hard);
}

Tensor kd_loss(const Tensor& student_logits, const Matrix& teacher_logits,
               std::span<const int> labels, DistillParams p) {
  return mean(kd_loss_per_sample(student_logits, teacher_logits, labels, p));
}

Tensor entropy_sum(const Tensor& probs) {
  // Clamp inside the log only; exact zeros contribute 0 * log(tiny) = 0.
  Matrix clamped = probs.value().cwiseMax(1e-300);
  const Tensor logp = log(add(probs, Tensor::constant(clamped - probs.value())));
  return scale(sum(mul(probs, logp)), -1.0);
}

}  // namespace moie::diff
