#pragma once

#include <span>
#include <vector>

#include "moie/diff/tensor.hpp"

namespace moie::diff {

// x[batch, in] * weight[out, in]^T + bias[1, out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Broadcasting: `row` is [1, cols], `col` is [rows, 1].
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul_row(const Tensor& a, const Tensor& row);
Tensor mul_col(const Tensor& a, const Tensor& col);

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);        // -> [1, 1]
Tensor mean(const Tensor& a);       // -> [1, 1]
Tensor row_sum(const Tensor& a);    // -> [rows, 1]

Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
// Each row divided by its maximum entry; the gradient through the max flows
// to the (first) arg-max position.
Tensor divide_by_row_max(const Tensor& a);

Tensor row(const Tensor& a, std::size_t i);  // -> [1, cols]
Tensor col(const Tensor& a, std::size_t j);  // -> [rows, 1]
Tensor hconcat(std::span<const Tensor> cols);
// out[i] = a(i, index[i]), shape [rows, 1].
Tensor pick(const Tensor& a, std::span<const int> index);

}  // namespace moie::diff
