#include "moie/diff/mlp.hpp"

#include <cmath>

#include "moie/diff/ops.hpp"
#include "moie/errors.hpp"

namespace moie::diff {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Matrix glorot_uniform(std::size_t fan_out, std::size_t fan_in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix w(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = (2.0 * uniform01(rng) - 1.0) * a;
  return w;
}

Matrix activate(const Matrix& z, Activation a) {
  switch (a) {
    case Activation::relu: return z.cwiseMax(0.0);
    case Activation::sigmoid: return z.unaryExpr([](double v) { return sigmoid(v); });
    case Activation::identity: return z;
  }
  return z;
}

Mlp::Mlp(const std::vector<std::size_t>& dims, const std::vector<Activation>& activations,
         Rng& rng) {
  if (dims.size() < 2) throw ConfigError("Mlp needs at least input and output dims");
  if (activations.size() != dims.size() - 1) {
    throw ConfigError("Mlp: " + std::to_string(dims.size() - 1) + " layers but " +
                      std::to_string(activations.size()) + " activations");
  }
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    if (dims[i] == 0 || dims[i + 1] == 0) throw ConfigError("Mlp: zero-width layer");
    Layer l;
    l.weight = Tensor::parameter(glorot_uniform(dims[i + 1], dims[i], rng));
    l.bias = Tensor::parameter(Matrix::Zero(1, static_cast<Eigen::Index>(dims[i + 1])));
    l.activation = activations[i];
    layers_.push_back(std::move(l));
  }
}

Mlp::Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) { check_chain(); }

void Mlp::check_chain() const {
  if (layers_.empty()) throw ConfigError("Mlp: no layers");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    if (l.bias.rows() != 1 || l.bias.cols() != l.weight.rows()) {
      throw ShapeError("Mlp layer " + std::to_string(i) + ": bias " + shape_str(l.bias.value()) +
                       " vs weight " + shape_str(l.weight.value()));
    }
    if (i > 0 && layers_[i - 1].weight.rows() != l.weight.cols()) {
      throw ShapeError("Mlp layer " + std::to_string(i) + " input dim " +
                       std::to_string(l.weight.cols()) + " != previous output dim " +
                       std::to_string(layers_[i - 1].weight.rows()));
    }
  }
}

std::size_t Mlp::input_dim() const { return layers_.front().weight.cols(); }
std::size_t Mlp::output_dim() const { return layers_.back().weight.rows(); }

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
  return n;
}

Tensor activate(const Tensor& z, Activation a) {
  switch (a) {
    case Activation::relu: return relu(z);
    case Activation::sigmoid: return sigmoid(z);
    case Activation::identity: return z;
  }
  return z;
}

Tensor Mlp::forward(const Tensor& x) const { return forward_range(x, 0, layers_.size()); }

Tensor Mlp::forward_range(const Tensor& x, std::size_t begin, std::size_t end) const {
  if (begin >= end || end > layers_.size()) throw ShapeError("Mlp: bad layer range");
  if (x.cols() != layers_[begin].weight.cols()) {
    throw ShapeError("Mlp: input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(layers_[begin].weight.cols()));
  }
  Tensor h = x;
  for (std::size_t i = begin; i < end; ++i) {
    h = activate(linear(h, layers_[i].weight, layers_[i].bias), layers_[i].activation);
  }
  return h;
}

Matrix Mlp::infer(const Matrix& x) const { return infer_range(x, 0, layers_.size()); }

Matrix Mlp::infer_range(const Matrix& x, std::size_t begin, std::size_t end) const {
  if (begin >= end || end > layers_.size()) throw ShapeError("Mlp: bad layer range");
  if (static_cast<std::size_t>(x.cols()) != layers_[begin].weight.cols()) {
    throw ShapeError("Mlp: input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(layers_[begin].weight.cols()));
  }
  Matrix h = x;
  for (std::size_t i = begin; i < end; ++i) {
    Matrix z = h * layers_[i].weight.value().transpose();
    z.rowwise() += layers_[i].bias.value().row(0);
    h = activate(z, layers_[i].activation);
  }
  return h;
}

std::vector<NamedParameter> Mlp::parameters(const std::string& prefix) const {
  std::vector<NamedParameter> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string base = prefix + "layer" + std::to_string(i);
    out.push_back({base + ".weight", layers_[i].weight});
    out.push_back({base + ".bias", layers_[i].bias});
  }
  return out;
}

Mlp Mlp::clone() const {
  std::vector<Layer> copy;
  copy.reserve(layers_.size());
  for (const auto& l : layers_) {
    copy.push_back({l.weight.clone_parameter(), l.bias.clone_parameter(), l.activation});
  }
  return Mlp(std::move(copy));
}

namespace {

nlohmann::json matrix_values(const Matrix& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

Matrix matrix_from(const nlohmann::json& values, std::size_t rows, std::size_t cols,
                   const std::string& what) {
  const auto v = values.get<std::vector<double>>();
  if (v.size() != rows * cols) {
    throw ConfigError(what + ": expected " + std::to_string(rows * cols) + " values, got " +
                      std::to_string(v.size()));
  }
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

}  // namespace

nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"shape", {m.rows(), m.cols()}}, {"values", matrix_values(m)}};
}

Matrix matrix_from_json(const nlohmann::json& j, const std::string& what) {
  try {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw ConfigError(what + ": shape must have two entries");
    return matrix_from(j.at("values"), shape[0], shape[1], what);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

nlohmann::json Mlp::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    layers.push_back({{"shape", {l.weight.rows(), l.weight.cols()}},
                      {"weight", matrix_values(l.weight.value())},
                      {"bias", matrix_values(l.bias.value())},
                      {"activation", to_string(l.activation)}});
  }
  return {{"layers", layers}};
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  std::vector<Layer> layers;
  try {
    for (const auto& lj : j.at("layers")) {
      const auto shape = lj.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw ConfigError("layer shape must have two entries");
      Layer l;
      l.weight = Tensor::parameter(matrix_from(lj.at("weight"), shape[0], shape[1], "weight"));
      l.bias = Tensor::parameter(matrix_from(lj.at("bias"), 1, shape[0], "bias"));
      l.activation = activation_from_string(lj.at("activation").get<std::string>());
      layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed Mlp checkpoint: ") + e.what());
  }
  return Mlp(std::move(layers));
}

}  // namespace moie::diff
