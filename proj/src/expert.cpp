#include "moie/models/expert.hpp"

#include "moie/diff/loss.hpp"
#include "moie/diff/ops.hpp"
#include "moie/diff/optim.hpp"
#include "moie/errors.hpp"
#include "moie/util.hpp"

namespace moie::models {

using diff::Activation;
using diff::Mlp;

Selector Selector::create(std::size_t n_concepts, std::size_t hidden, Rng& rng) {
  if (hidden == 0) return {Mlp({n_concepts, 1}, {Activation::sigmoid}, rng)};
  return {Mlp({n_concepts, hidden, 1}, {Activation::relu, Activation::sigmoid}, rng)};
}

Selector Selector::from_json(const nlohmann::json& j) {
  Selector s{Mlp::from_json(j)};
  if (s.body.output_dim() != 1 || s.body.layer(s.body.num_layers() - 1).activation != Activation::sigmoid) {
    throw ConfigError("selector checkpoint must end in a single sigmoid unit");
  }
  return s;
}

EntropyExpert EntropyExpert::create(std::size_t n_concepts, std::size_t n_classes,
                                    const std::vector<std::size_t>& hidden, double temperature, Rng& rng) {
  if (temperature <= 0) throw ConfigError("entropy expert: temperature must be positive");
  EntropyExpert ex;
  // Small random relevance scores break the symmetry between concepts.
  Matrix g(static_cast<Eigen::Index>(n_classes), static_cast<Eigen::Index>(n_concepts));
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = 0.02 * (uniform01(rng) - 0.5);
  ex.gamma = Tensor::parameter(std::move(g));
  std::vector<std::size_t> dims{n_concepts};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(n_classes);
  std::vector<Activation> acts(hidden.size(), Activation::relu);
  acts.push_back(Activation::identity);
  ex.trunk = Mlp(dims, acts, rng);
  ex.temperature = temperature;
  return ex;
}

Tensor EntropyExpert::attention() const {
  if (temperature <= 0) throw ConfigError("entropy expert: temperature must be positive");
  return diff::softmax_rows(diff::scale(gamma, 1.0 / temperature));
}

Matrix EntropyExpert::attention_scaled() const { return diff::divide_by_row_max(attention()).value(); }

std::vector<diff::NamedParameter> EntropyExpert::parameters(const std::string& prefix) const {
  return diff::concat({{prefix + "gamma", gamma}}, trunk.parameters(prefix + "trunk."));
}

EntropyExpert EntropyExpert::clone() const {
  EntropyExpert ex;
  ex.gamma = gamma.clone_parameter();
  ex.trunk = trunk.clone();
  ex.temperature = temperature;
  return ex;
}

nlohmann::json EntropyExpert::to_json() const {
  return {{"gamma", diff::matrix_to_json(gamma.value())}, {"trunk", trunk.to_json()}, {"temperature", temperature}};
}

EntropyExpert EntropyExpert::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"gamma", "trunk", "temperature"}, "expert");
  EntropyExpert ex;
  try {
    ex.gamma = Tensor::parameter(diff::matrix_from_json(j.at("gamma"), "expert.gamma"));
    ex.trunk = Mlp::from_json(j.at("trunk"));
    ex.temperature = j.at("temperature").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed expert checkpoint: ") + e.what());
  }
  if (ex.trunk.input_dim() != ex.arity() || ex.trunk.output_dim() != ex.n_classes()) {
    throw ConfigError("expert checkpoint: trunk does not match gamma");
  }
  return ex;
}

Tensor entropy_forward(const EntropyExpert& ex, const Tensor& c) {
  if (c.cols() != ex.arity()) {
    throw ShapeError("entropy expert: concept vector has " + std::to_string(c.cols()) + " entries, expected " +
                     std::to_string(ex.arity()));
  }
  const Tensor scaled = diff::divide_by_row_max(ex.attention());
  std::vector<Tensor> per_class;
  per_class.reserve(ex.n_classes());
  for (std::size_t y = 0; y < ex.n_classes(); ++y) {
    const Tensor modulated = diff::mul_row(c, diff::row(scaled, y));
    per_class.push_back(diff::col(ex.trunk.forward(modulated), y));
  }
  return diff::hconcat(per_class);
}

Matrix entropy_infer(const EntropyExpert& ex, const Matrix& c) {
  if (static_cast<std::size_t>(c.cols()) != ex.arity()) {
    throw ShapeError("entropy expert: concept vector has " + std::to_string(c.cols()) + " entries, expected " +
                     std::to_string(ex.arity()));
  }
  const Matrix scaled = ex.attention_scaled();
  Matrix out(c.rows(), static_cast<Eigen::Index>(ex.n_classes()));
  for (std::size_t y = 0; y < ex.n_classes(); ++y) {
    const auto yi = static_cast<Eigen::Index>(y);
    const Matrix modulated = c.array().rowwise() * scaled.row(yi).array();
    out.col(yi) = ex.trunk.infer(modulated).col(yi);
  }
  return out;
}

Tensor attention_entropy(const EntropyExpert& ex) { return diff::entropy_sum(ex.attention()); }

}  // namespace moie::models
