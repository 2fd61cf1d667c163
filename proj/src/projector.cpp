#include "moie/models/projector.hpp"

#include "moie/diff/loss.hpp"
#include "moie/diff/mlp.hpp"
#include "moie/diff/ops.hpp"
#include "moie/diff/optim.hpp"
#include "moie/errors.hpp"
#include "moie/util.hpp"

namespace moie::models {

using diff::Tensor;

std::vector<std::size_t> Projector::included_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < included.size(); ++i)
    if (included[i]) out.push_back(i);
  return out;
}

std::vector<std::string> Projector::included_names() const {
  std::vector<std::string> out;
  for (auto i : included_indices()) out.push_back(i < concept_names.size() ? concept_names[i] : "c" + std::to_string(i));
  return out;
}

nlohmann::json Projector::to_json() const {
  return {{"weight", diff::matrix_to_json(weight)},
          {"bias", diff::matrix_to_json(bias)},
          {"val_accuracy", val_accuracy},
          {"included", included},
          {"gate", gate},
          {"concept_names", concept_names}};
}

Projector Projector::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"weight", "bias", "val_accuracy", "included", "gate", "concept_names"}, "projector");
  Projector p;
  try {
    p.weight = diff::matrix_from_json(j.at("weight"), "projector.weight");
    p.bias = diff::matrix_from_json(j.at("bias"), "projector.bias");
    p.val_accuracy = j.at("val_accuracy").get<std::vector<double>>();
    p.included = j.at("included").get<std::vector<bool>>();
    p.gate = j.at("gate").get<double>();
    p.concept_names = j.at("concept_names").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed projector checkpoint: ") + e.what());
  }
  if (p.bias.rows() != 1 || p.bias.cols() != p.weight.rows() || p.included.size() != p.n_concepts()) {
    throw ConfigError("projector checkpoint: inconsistent shapes");
  }
  return p;
}

std::vector<bool> gate_mask(const std::vector<double>& scores, double gate) {
  std::vector<bool> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= gate;
  return out;
}

Matrix project_all(const Projector& p, const Matrix& phi_x) {
  if (static_cast<std::size_t>(phi_x.cols()) != p.repr_dim()) {
    throw ShapeError("project: features " + diff::shape_str(phi_x) + " for projector over " +
                     std::to_string(p.repr_dim()) + " dims");
  }
  Matrix z = phi_x * p.weight.transpose();
  z.rowwise() += p.bias.row(0);
  return diff::activate(z, diff::Activation::sigmoid);
}

Matrix project(const Projector& p, const Matrix& phi_x) {
  const Matrix all = project_all(p, phi_x);
  const auto idx = p.included_indices();
  Matrix out(all.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = all.col(static_cast<Eigen::Index>(idx[k]));
  return out;
}

namespace {

Matrix rows_of(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace

std::vector<double> probe_accuracy(const Projector& p, const Matrix& features, const data::Dataset& ds,
                                   data::Split split) {
  const auto rows = ds.indices(split);
  std::vector<double> acc(p.n_concepts(), 0.0);
  if (rows.empty()) return acc;
  const Matrix prob = project_all(p, rows_of(features, rows));
  for (std::size_t k = 0; k < p.n_concepts(); ++k) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const bool pred = prob(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) >= 0.5;
      ok += pred == (ds.C(static_cast<Eigen::Index>(rows[i]), static_cast<Eigen::Index>(k)) >= 0.5);
    }
    acc[k] = static_cast<double>(ok) / static_cast<double>(rows.size());
  }
  return acc;
}

Projector train_projector(const Matrix& features, const data::Dataset& ds, const ProbeConfig& cfg) {
  if (static_cast<std::size_t>(features.rows()) != ds.size()) {
    throw ShapeError("train_projector: " + std::to_string(features.rows()) + " feature rows for " +
                     std::to_string(ds.size()) + " samples");
  }
  const auto tr = ds.indices(data::Split::train);
  if (tr.empty()) throw ConfigError("train_projector: dataset has no train split");
  const Matrix f = rows_of(features, tr);
  const Matrix target = rows_of(ds.C, tr);
  const auto n = static_cast<double>(tr.size());

  // Standardize on train statistics, then fold the affine map into the probe.
  const diff::RowVector mu = f.colwise().mean();
  diff::RowVector sd = ((f.rowwise() - mu).array().square().colwise().sum() / n).sqrt().matrix();
  sd.array() += 1e-8;
  const Matrix fs = (f.rowwise() - mu).array().rowwise() / sd.array();

  // The loss separates over concepts and Adam is per-coordinate, so one joint
  // linear layer trains exactly the independent probes.
  Tensor w = Tensor::parameter(Matrix::Zero(ds.C.cols(), f.cols()));
  Tensor b = Tensor::parameter(Matrix::Zero(1, ds.C.cols()));
  diff::Optimizer opt({diff::OptimKind::adam, cfg.lr}, {{"probe.weight", w}, {"probe.bias", b}});
  const Tensor x = Tensor::constant(fs);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tensor loss = diff::scale(diff::sum(diff::bce_with_logits_per_sample(diff::linear(x, w, b), target)), 1.0 / n);
    if (!std::isfinite(loss.item())) throw NumericalError("train_projector: non-finite loss at iteration " + std::to_string(it));
    diff::backward(loss);
    opt.step();
  }

  Projector p;
  p.weight = w.value().array().rowwise() / sd.array();
  p.bias = b.value() - (p.weight * mu.transpose()).transpose();
  p.gate = cfg.gate;
  p.concept_names = ds.concept_names;
  p.val_accuracy = probe_accuracy(p, features, ds, data::Split::val);
  p.included = gate_mask(p.val_accuracy, cfg.gate);
  if (p.included_indices().empty()) {
    throw ConfigError("train_projector: no concept reaches validation accuracy " + fixed(cfg.gate, 2) +
                      "; lower the concept gate or inspect the feature extractor");
  }
  return p;
}

}  // namespace moie::models
