#include "moie/models/mdn.hpp"

#include <Eigen/Cholesky>

#include "moie/diff/mlp.hpp"
#include "moie/errors.hpp"
#include "moie/util.hpp"

namespace moie::models {

nlohmann::json MDNState::to_json() const {
  return {{"layer_index", layer_index},
          {"concepts", concepts},
          {"running_beta", diff::matrix_to_json(running_beta)},
          {"momentum", momentum},
          {"initialized", initialized},
          {"ridge", ridge}};
}

MDNState MDNState::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"layer_index", "concepts", "running_beta", "momentum", "initialized", "ridge"},
                      "mdn");
  MDNState s;
  try {
    s.layer_index = j.at("layer_index").get<std::size_t>();
    s.concepts = j.at("concepts").get<std::vector<std::size_t>>();
    s.running_beta = diff::matrix_from_json(j.at("running_beta"), "mdn.running_beta");
    s.momentum = j.at("momentum").get<double>();
    s.initialized = j.at("initialized").get<bool>();
    s.ridge = j.at("ridge").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed mdn checkpoint: ") + e.what());
  }
  return s;
}

Matrix label_indicators(const std::vector<int>& labels, std::size_t n_classes) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(labels.size()),
                            static_cast<Eigen::Index>(n_classes > 0 ? n_classes - 1 : 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 0) out(static_cast<Eigen::Index>(i), labels[i] - 1) = 1.0;
  }
  return out;
}

Matrix mdn_infer(const Matrix& z, const Matrix& meta, const MDNState& state) {
  if (meta.rows() != z.rows() || meta.cols() != state.running_beta.rows() ||
      z.cols() != state.running_beta.cols()) {
    throw ShapeError("mdn: z " + diff::shape_str(z) + ", meta " + diff::shape_str(meta) +
                     ", running_beta " + diff::shape_str(state.running_beta));
  }
  return z - meta * state.running_beta;
}

Tensor mdn_normalize(const Tensor& z, const Matrix& meta, MDNState& state, MdnMode mode,
                     const Matrix* keep) {
  const Eigen::Index n = z.value().rows();
  const Eigen::Index m = meta.cols();
  if (meta.rows() != n || static_cast<std::size_t>(m) != state.n_meta()) {
    throw ShapeError("mdn: meta " + diff::shape_str(meta) + " for batch of " + std::to_string(n) +
                     " with " + std::to_string(state.n_meta()) + " metadata columns");
  }
  if (mode == MdnMode::infer) {
    if (!state.initialized) throw NumericalError("mdn: inference before any training batch");
    Matrix out = mdn_infer(z.value(), meta, state);
    return Tensor::from_op(std::move(out), {z}, [](diff::Node& self) {
      if (self.parents[0]->requires_grad) self.parents[0]->grad += self.grad;
    });
  }

  const Eigen::Index p = keep ? keep->cols() : 0;
  if (keep && keep->rows() != n) throw ShapeError("mdn: keep covariates " + diff::shape_str(*keep));
  if (n < m + 2) {
    throw ShapeError("mdn: train batch of " + std::to_string(n) + " needs at least " +
                     std::to_string(m + 2) + " rows");
  }
  Matrix design(n, 1 + m + p);
  design.col(0).setOnes();
  design.middleCols(1, m) = meta;
  if (p > 0) design.rightCols(p) = *keep;

  Matrix gram = design.transpose() * design;
  gram.diagonal().array() += state.ridge;
  Eigen::LDLT<Matrix> ldlt(gram);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    throw NumericalError("mdn: metadata design matrix is rank deficient beyond the ridge guard");
  }
  // beta = S z with S = (X'X + eps I)^-1 X', refined twice (S <- S0 + S - S0 X S)
  // so the ridge only guards conditioning and the fit is least squares.
  const Matrix s0 = ldlt.solve(Matrix(design.transpose()));
  const Matrix s0x = s0 * design;
  Matrix s_full = s0;
  for (int step = 0; step < 2; ++step) s_full = s0 + s_full - s0x * s_full;
  const Matrix s_meta = s_full.middleRows(1, m);
  Matrix beta = s_meta * z.value();
  if (!diff::all_finite(beta)) throw NumericalError("mdn: non-finite regression coefficients");

  state.beta = beta;
  if (!state.initialized) {
    state.running_beta = beta;
    state.initialized = true;
  } else {
    state.running_beta = state.momentum * state.running_beta + (1.0 - state.momentum) * beta;
  }

  Matrix out = z.value() - meta * beta;
  return Tensor::from_op(std::move(out), {z}, [meta, s_meta](diff::Node& self) {
    auto& parent = *self.parents[0];
    if (!parent.requires_grad) return;
    // out = (I - meta S_meta) z  =>  dz = g - S_meta' (meta' g)
    parent.grad += self.grad - s_meta.transpose() * (meta.transpose() * self.grad);
  });
}

}  // namespace moie::models
