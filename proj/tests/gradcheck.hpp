#pragma once

// Central finite-difference gradient oracle shared by unit and acceptance
// tests. Independent of the autodiff path: it only evaluates the loss.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "moie/diff/mlp.hpp"
#include "moie/diff/tensor.hpp"

namespace moie::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
};

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

// loss_fn must rebuild the graph from the current parameter values.
inline GradCheckResult grad_check(const std::function<diff::Tensor()>& loss_fn,
                                  const std::vector<diff::NamedParameter>& params,
                                  double h = 1e-5) {
  diff::backward(loss_fn());
  std::vector<diff::Matrix> analytic;
  for (const auto& p : params) {
    analytic.push_back(p.tensor.has_grad() ? p.tensor.grad()
                                           : diff::Matrix::Zero(p.tensor.value().rows(),
                                                                p.tensor.value().cols()));
  }
  GradCheckResult r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    diff::Tensor t = params[k].tensor;
    diff::Matrix& w = t.mutable_value();
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double orig = w.data()[i];
      w.data()[i] = orig + h;
      const double up = loss_fn().item();
      w.data()[i] = orig - h;
      const double down = loss_fn().item();
      w.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double e = rel_error(analytic[k].data()[i], numeric);
      ++r.checked;
      if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst_param = params[k].name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

}  // namespace moie::testing
