#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moie/data/dataset.hpp"
#include "moie/diff/optim.hpp"
#include "moie/models/blackbox.hpp"
#include "moie/models/expert.hpp"
#include "moie/models/projector.hpp"

namespace moie::carve {

using diff::Matrix;
using diff::Tensor;

struct CarveConfig {
  std::size_t max_iterations = 3;
  std::vector<double> tau{0.4, 0.3, 0.3};
  // One value for every iteration, or one per iteration.
  std::vector<double> lambda_s{32.0};
  double alpha_kd = 0.9;
  double temp_kd = 10.0;
  double lambda_lens = 1e-4;
  double temp_lens = 0.7;
  std::vector<std::size_t> expert_hidden{10};
  std::size_t selector_hidden = 10;
  diff::OptimKind optimizer = diff::OptimKind::adam;
  double lr_expert = 0.01;
  double lr_residual = 0.001;
  std::size_t epochs_expert = 25;
  std::size_t epochs_residual = 5;
  std::size_t batch_size = 64;
  double coverage_stop = 0.9;
  double coverage_tolerance = 0.05;
  double concept_gate = 0.7;
  double attention_threshold = 0.5;
  std::uint64_t seed = 0;

  double tau_at(std::size_t k) const;       // k is 1-based
  double lambda_s_at(std::size_t k) const;  // k is 1-based
  void validate() const;

  // "synthetic" (the defaults), "cub_resnet", "cub_vit", "awa2_resnet",
  // "awa2_vit", "ham10000", "mimic_cxr".
  static CarveConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();
};

void to_json(nlohmann::json& j, const CarveConfig& c);
// Unknown keys are rejected. A "preset" key selects the base values that the
// remaining keys override.
void from_json(const nlohmann::json& j, CarveConfig& c);

struct IterationRecord {
  std::size_t k = 0;
  double tau = 0.0;
  double lambda_s = 0.0;
  double zeta = 0.0;                  // soft train coverage: mean cumulative weight
  double hard_coverage = 0.0;         // train fraction routed to this expert
  double cumulative_coverage = 0.0;   // train fraction routed to experts 1..k
  bool coverage_shortfall = false;    // zeta < tau - tolerance
  double expert_train_accuracy = 0.0; // on its hard-routed train samples
  double expert_fidelity = 0.0;       // agreement with f^{k-1} on those samples
  double final_selective_risk = 0.0;
  double final_residual_loss = 0.0;
};

struct Iteration {
  models::Selector selector;
  models::EntropyExpert expert;
  diff::Mlp residual_head;  // h^k
  IterationRecord record;
};

struct CarveState {
  models::Blackbox blackbox;   // f^0; Phi never changes
  models::Projector projector;
  std::vector<Iteration> iterations;
  double cumulative_coverage = 0.0;

  std::size_t n_iterations() const { return iterations.size(); }
  // h^k for k = 0..K.
  const diff::Mlp& head(std::size_t k) const;
};

// Frozen-model inputs for every row of a dataset.
struct Inputs {
  Matrix phi;       // Phi(x)
  Matrix concepts;  // projected probabilities of the included concepts
};
Inputs compute_inputs(const CarveState& state, const data::Dataset& ds);

// pis = (pi^1 .. pi^k). Returns pi^k * prod_{i<k} (1 - pi^i). Throws
// ConfigError if any value is outside [0, 1] or k is out of range.
double cumulative_weight(const std::vector<double>& pis, std::size_t k);
// Tracked form: pi_k is trainable, `prev_residual` = prod_{i<k}(1 - pi^i) is a constant.
Tensor cumulative_weight(const Tensor& pi_k, const Matrix& prev_residual);

// (mean of weighted_losses) / zeta with zeta = mean of coverage. Throws
// NumericalError if zeta is not positive.
double selective_risk(const std::vector<double>& weighted_losses, const std::vector<double>& coverage);
Tensor selective_risk(const Tensor& weighted_losses, const Tensor& coverage);

// f_prev - g.
Matrix residual_logits(const Matrix& f_prev, const Matrix& g);
Tensor residual_logits(const Tensor& f_prev, const Tensor& g);

struct Route {
  std::size_t index = 0;
  int destination = -1;  // 1-based expert id, or -1 for the residual
  std::vector<double> pis;

  bool residual() const { return destination < 0; }
};
Route route(const std::vector<double>& pis, std::size_t index = 0);
// Routes every row of `concepts`.
std::vector<Route> route_all(const CarveState& state, const Matrix& concepts);

enum class PredictMode { moie, moie_plus_r };
struct Prediction {
  int label = -1;  // -1 when uncovered in moie mode
  int destination = -1;
};
// Batch prediction for rows of `ds`.
std::vector<Prediction> moie_predict(const CarveState& state, const data::Dataset& ds, PredictMode mode);

// Trains iteration k (1-based; must equal n_iterations() + 1).
void carve_iteration(CarveState& state, const data::Dataset& ds, std::size_t k, const CarveConfig& cfg);

// Projector plus iterations until cumulative coverage reaches coverage_stop or
// max_iterations is exhausted.
CarveState run_carving(const models::Blackbox& bb, const data::Dataset& ds, const CarveConfig& cfg);

struct DestinationReport {
  std::string name;  // "expert_1", ..., "residual"
  std::size_t count = 0;
  double coverage = 0.0;
  double accuracy = 0.0;
  double proportional_accuracy = 0.0;
};

struct IterationReport {
  std::string split;
  std::size_t n = 0;
  std::vector<DestinationReport> destinations;  // experts in order, then residual
  double blackbox_accuracy = 0.0;               // f^0 on the whole split
  double residual_blackbox_accuracy = 0.0;      // f^0 on residual-routed samples
  double moie_coverage = 0.0;
  double moie_accuracy = 0.0;                   // on covered samples
  double moie_plus_r_accuracy = 0.0;
  std::vector<IterationRecord> training;
};

IterationReport evaluate(const CarveState& state, const data::Dataset& ds, data::Split split);
nlohmann::json to_json(const IterationReport& r);
nlohmann::json to_json(const IterationRecord& r);
std::string to_markdown(const IterationReport& r);

nlohmann::json to_json(const CarveState& s);
CarveState state_from_json(const nlohmann::json& j);

}  // namespace moie::carve
