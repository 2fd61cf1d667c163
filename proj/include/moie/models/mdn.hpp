#pragma once

#include <cstddef>
#include <vector>

#include "json.hpp"
#include "moie/diff/tensor.hpp"

namespace moie::models {

using diff::Matrix;
using diff::Tensor;

enum class MdnMode { train, infer };

// Metadata Normalization: removes the part of a layer's activations that is
// linearly explained by metadata.
//
// Train mode regresses the batch activations z on X = [1, meta, keep] and
// subtracts meta * beta_meta. `keep` holds optional covariates whose effect
// is estimated jointly but left in place, so metadata that is correlated
// with them does not take their signal along. Infer mode subtracts
// meta * running_beta.
struct MDNState {
  std::size_t layer_index = 0;       // Phi layer whose pre-activation is normalized
  std::vector<std::size_t> concepts;  // dataset concept columns used as metadata
  Matrix beta;                        // last batch: [n_meta, width]
  Matrix running_beta;                // [n_meta, width]
  double momentum = 0.9;
  bool initialized = false;
  double ridge = 1e-6;

  std::size_t n_meta() const { return concepts.size(); }

  nlohmann::json to_json() const;
  static MDNState from_json(const nlohmann::json& j);
};

// Fused op; gradient flows through the batch regression in train mode. The
// ridge-guarded normal equations are iteratively refined, so on a full-rank
// design the coefficients are the least-squares ones.
// Throws ShapeError on mismatched shapes or (train mode) batch < n_meta + 2,
// NumericalError if the regularized normal equations cannot be solved.
Tensor mdn_normalize(const Tensor& z, const Matrix& meta, MDNState& state, MdnMode mode,
                     const Matrix* keep = nullptr);

// Graph-free inference-mode normalization.
Matrix mdn_infer(const Matrix& z, const Matrix& meta, const MDNState& state);

// Label covariates for `keep`: one indicator column per class except class 0.
Matrix label_indicators(const std::vector<int>& labels, std::size_t n_classes);

}  // namespace moie::models
