#pragma once

#include <cstddef>
#include <cstdint>

#include "json.hpp"
#include "moie/diff/mlp.hpp"

namespace moie::models {

using diff::Matrix;
using diff::Tensor;

// pi(c): concepts -> (0, 1).
struct Selector {
  diff::Mlp body;

  static Selector create(std::size_t n_concepts, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& c) const { return body.forward(c); }
  Matrix infer(const Matrix& c) const { return body.infer(c); }
  std::size_t arity() const { return body.input_dim(); }

  nlohmann::json to_json() const { return body.to_json(); }
  static Selector from_json(const nlohmann::json& j);
};

// Entropy-layer expert. For class y:
//   alpha_y = softmax(gamma_y / T),  alpha~_y = alpha_y / max(alpha_y),
//   logit_y = trunk(c * alpha~_y)[y]
// The trunk is shared across classes; class y reads only its own output.
struct EntropyExpert {
  Tensor gamma;  // [n_classes, n_concepts]
  diff::Mlp trunk;
  double temperature = 0.7;

  static EntropyExpert create(std::size_t n_concepts, std::size_t n_classes,
                              const std::vector<std::size_t>& hidden, double temperature, Rng& rng);

  std::size_t arity() const { return gamma.cols(); }
  std::size_t n_classes() const { return gamma.rows(); }

  Tensor attention() const;          // alpha,  [n_classes, n_concepts]
  Matrix attention_scaled() const;   // alpha~, [n_classes, n_concepts]
  std::vector<diff::NamedParameter> parameters(const std::string& prefix = "") const;
  EntropyExpert clone() const;

  nlohmann::json to_json() const;
  static EntropyExpert from_json(const nlohmann::json& j);
};

// Tracked logits [batch, n_classes]. Throws ConfigError if the temperature is
// not positive, ShapeError on arity mismatch.
Tensor entropy_forward(const EntropyExpert& ex, const Tensor& c);
Matrix entropy_infer(const EntropyExpert& ex, const Matrix& c);

// Sum over classes of the entropy of alpha_y.
Tensor attention_entropy(const EntropyExpert& ex);

}  // namespace moie::models
