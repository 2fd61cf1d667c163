#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "moie/diff/tensor.hpp"
#include "moie/rng.hpp"

namespace moie::diff {

enum class Activation { relu, sigmoid, identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [1, out]
  Activation activation = Activation::identity;
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Fully connected network. Copies share parameters; use clone() for an
// independent deep copy.
class Mlp {
 public:
  Mlp() = default;
  // dims = {in, h1, ..., out}; one activation per layer.
  Mlp(const std::vector<std::size_t>& dims, const std::vector<Activation>& activations, Rng& rng);
  explicit Mlp(std::vector<Layer> layers);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t parameter_count() const;

  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  Layer& layer(std::size_t i) { return layers_.at(i); }

  // Tracked forward pass over layers [begin, end).
  Tensor forward(const Tensor& x) const;
  Tensor forward_range(const Tensor& x, std::size_t begin, std::size_t end) const;

  // Graph-free evaluation for frozen models; safe to call concurrently.
  Matrix infer(const Matrix& x) const;
  Matrix infer_range(const Matrix& x, std::size_t begin, std::size_t end) const;

  std::vector<NamedParameter> parameters(const std::string& prefix = "") const;

  Mlp clone() const;

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

 private:
  void check_chain() const;
  std::vector<Layer> layers_;
};

// Uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)).
Matrix glorot_uniform(std::size_t fan_out, std::size_t fan_in, Rng& rng);

// Applies an activation to raw values.
Matrix activate(const Matrix& z, Activation a);
Tensor activate(const Tensor& z, Activation a);

// {"shape": [r, c], "values": [row-major]}; exact round trip.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j, const std::string& what);

// Stable sigmoid.
double sigmoid(double v);

}  // namespace moie::diff
