#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "moie/data/dataset.hpp"
#include "moie/diff/tensor.hpp"

namespace moie::models {

using diff::Matrix;

// Concept projector t: one independent logistic probe per concept on Phi(x).
struct Projector {
  Matrix weight;  // [n_concepts, repr_dim]
  Matrix bias;    // [1, n_concepts]
  std::vector<double> val_accuracy;
  std::vector<bool> included;
  double gate = 0.7;
  std::vector<std::string> concept_names;

  std::size_t n_concepts() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t repr_dim() const { return static_cast<std::size_t>(weight.cols()); }
  // Dataset concept indices of included probes, ascending.
  std::vector<std::size_t> included_indices() const;
  std::vector<std::string> included_names() const;

  nlohmann::json to_json() const;
  static Projector from_json(const nlohmann::json& j);
};

struct ProbeConfig {
  double gate = 0.7;
  std::size_t iterations = 300;
  double lr = 0.01;
};

// included[i] == (scores[i] >= gate).
std::vector<bool> gate_mask(const std::vector<double>& scores, double gate);

// Trains every probe on the train-split features (standardized, full-batch
// Adam on binary cross-entropy) and scores it by validation accuracy.
// Throws ConfigError if every concept falls below the gate.
Projector train_projector(const Matrix& features, const data::Dataset& ds, const ProbeConfig& cfg);

// Validation accuracy of each probe on the given features.
std::vector<double> probe_accuracy(const Projector& p, const Matrix& features, const data::Dataset& ds,
                                   data::Split split);

// Sigmoid probe outputs of the included concepts, in included_indices() order.
Matrix project(const Projector& p, const Matrix& phi_x);
// All probes, included or not.
Matrix project_all(const Projector& p, const Matrix& phi_x);

}  // namespace moie::models
