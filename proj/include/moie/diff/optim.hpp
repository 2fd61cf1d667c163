#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moie/diff/mlp.hpp"

namespace moie::diff {

enum class OptimKind { sgd, adam };

struct OptimConfig {
  OptimKind kind = OptimKind::sgd;
  double lr = 0.01;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Optimizer state for a fixed, ordered list of parameters. Weight decay is
// the L2 form (added to the gradient) for both kinds.
class Optimizer {
 public:
  Optimizer(OptimConfig cfg, std::vector<NamedParameter> params);

  // Applies one update from the gradients left by the last backward pass,
  // then clears them. Parameters that backward never reached count as zero
  // gradient. Throws
  // NumericalError naming the parameter if any gradient is non-finite; no
  // parameter is modified in that case.
  void step();

  std::uint64_t steps() const { return step_count_; }
  const OptimConfig& config() const { return cfg_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }

 private:
  OptimConfig cfg_;
  std::vector<NamedParameter> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::uint64_t step_count_ = 0;
};

// Concatenation helper for parameter lists of several modules.
std::vector<NamedParameter> concat(std::vector<NamedParameter> a,
                                   const std::vector<NamedParameter>& b);

}  // namespace moie::diff
