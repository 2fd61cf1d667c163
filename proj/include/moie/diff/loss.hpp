#pragma once

#include <span>

#include "moie/diff/tensor.hpp"

namespace moie::diff {

// Per-sample cross-entropy of logits[batch, classes] against labels -> [batch, 1].
Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Per-sample binary cross-entropy on logits, targets in [0, 1] -> [batch, cols].
Tensor bce_with_logits_per_sample(const Tensor& logits, const Matrix& targets);

struct DistillParams {
  double alpha = 0.9;        // weight of the soft (teacher) term
  double temperature = 10.0;
};

// Temperature distillation, per sample -> [batch, 1]:
//   alpha * T^2 * KL(softmax(teacher/T) || softmax(student/T))
//     + (1 - alpha) * CE(labels, student)
// The teacher is treated as a constant.
Tensor kd_loss_per_sample(const Tensor& student_logits, const Matrix& teacher_logits,
                          std::span<const int> labels, DistillParams p);
Tensor kd_loss(const Tensor& student_logits, const Matrix& teacher_logits,
               std::span<const int> labels, DistillParams p);

// Shannon entropy of each row of a probability matrix, summed over rows.
Tensor entropy_sum(const Tensor& probs);

}  // namespace moie::diff
