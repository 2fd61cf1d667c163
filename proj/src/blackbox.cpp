#include "moie/models/blackbox.hpp"

#include <algorithm>
#include <numeric>

#include "moie/diff/loss.hpp"
#include "moie/diff/ops.hpp"
#include "moie/diff/optim.hpp"
#include "moie/errors.hpp"
#include "moie/rng.hpp"
#include "moie/util.hpp"

namespace moie::models {

using diff::Activation;
using diff::Mlp;
using diff::Tensor;

Matrix Blackbox::metadata(const data::Dataset& ds) const {
  if (!mdn) return Matrix(static_cast<Eigen::Index>(ds.size()), 0);
  for (auto c : mdn->concepts) {
    if (c >= ds.n_concepts()) throw ConfigError("metadata concept c" + std::to_string(c) + " not in dataset");
  }
  return ds.concept_columns(mdn->concepts);
}

Tensor Blackbox::phi_forward(const Tensor& x, const Matrix* meta, MdnMode mode, const Matrix* keep) {
  if (!mdn) return phi.forward(x);
  if (!meta) throw ShapeError("blackbox: metadata required when MDN is present");
  const std::size_t site = mdn->layer_index;
  Tensor h = site == 0 ? x : phi.forward_range(x, 0, site);
  const auto& l = phi.layer(site);
  Tensor z = mdn_normalize(diff::linear(h, l.weight, l.bias), *meta, *mdn, mode, keep);
  h = diff::activate(z, l.activation);
  if (site + 1 < phi.num_layers()) h = phi.forward_range(h, site + 1, phi.num_layers());
  return h;
}

Tensor Blackbox::forward(const Tensor& x, const Matrix* meta, MdnMode mode, const Matrix* keep) {
  return head.forward(phi_forward(x, meta, mode, keep));
}

Matrix Blackbox::phi_infer(const Matrix& x, const Matrix& meta) const {
  if (!mdn) return phi.infer(x);
  const std::size_t site = mdn->layer_index;
  Matrix h = site == 0 ? x : phi.infer_range(x, 0, site);
  const auto& l = phi.layer(site);
  Matrix z = h * l.weight.value().transpose();
  z.rowwise() += l.bias.value().row(0);
  h = diff::activate(mdn_infer(z, meta, *mdn), l.activation);
  if (site + 1 < phi.num_layers()) h = phi.infer_range(h, site + 1, phi.num_layers());
  return h;
}

Matrix Blackbox::logits_infer(const Matrix& x, const Matrix& meta) const {
  return head.infer(phi_infer(x, meta));
}

Matrix Blackbox::features(const data::Dataset& ds) const { return phi_infer(ds.X, metadata(ds)); }
Matrix Blackbox::logits(const data::Dataset& ds) const { return logits_infer(ds.X, metadata(ds)); }

Blackbox Blackbox::clone() const { return Blackbox{phi.clone(), head.clone(), mdn}; }

std::string Blackbox::phi_hash() const {
  nlohmann::json j = {{"phi", phi.to_json()}};
  if (mdn) j["mdn"] = mdn->to_json();
  return sha256_hex(j.dump());
}

nlohmann::json Blackbox::to_json() const {
  nlohmann::json j = {{"phi", phi.to_json()}, {"head", head.to_json()}};
  j["mdn"] = mdn ? mdn->to_json() : nlohmann::json(nullptr);
  return j;
}

Blackbox Blackbox::from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, {"phi", "head", "mdn"}, "blackbox");
  Blackbox bb;
  try {
    bb.phi = Mlp::from_json(j.at("phi"));
    bb.head = Mlp::from_json(j.at("head"));
    if (j.contains("mdn") && !j.at("mdn").is_null()) bb.mdn = MDNState::from_json(j.at("mdn"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed blackbox checkpoint: ") + e.what());
  }
  if (bb.phi.output_dim() != bb.head.input_dim()) throw ConfigError("blackbox: phi/head dimension mismatch");
  return bb;
}

void to_json(nlohmann::json& j, const BlackboxConfig& c) {
  j = {{"hidden", c.hidden},
       {"epochs", c.epochs},
       {"lr", c.lr},
       {"batch_size", c.batch_size},
       {"weight_decay", c.weight_decay},
       {"finetune_epochs", c.finetune_epochs},
       {"finetune_lr_scale", c.finetune_lr_scale},
       {"mdn_keep_label", c.mdn_keep_label}};
}

void from_json(const nlohmann::json& j, BlackboxConfig& c) {
  reject_unknown_keys(j,
                      {"hidden", "epochs", "lr", "batch_size", "weight_decay", "finetune_epochs",
                       "finetune_lr_scale", "mdn_keep_label"},
                      "blackbox config");
  try {
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
    if (j.contains("finetune_epochs")) c.finetune_epochs = j.at("finetune_epochs").get<std::size_t>();
    if (j.contains("finetune_lr_scale")) c.finetune_lr_scale = j.at("finetune_lr_scale").get<double>();
    if (j.contains("mdn_keep_label")) c.mdn_keep_label = j.at("mdn_keep_label").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("blackbox config: ") + e.what());
  }
  if (c.hidden.empty()) throw ConfigError("blackbox config: hidden must list at least one layer");
  if (c.batch_size == 0) throw ConfigError("blackbox config: batch_size must be positive");
  if (c.lr <= 0) throw ConfigError("blackbox config: lr must be positive");
}

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index k = 0;
    logits.row(i).maxCoeff(&k);
    out[static_cast<std::size_t>(i)] = static_cast<int>(k);
  }
  return out;
}

double accuracy(const Matrix& logits, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(logits);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(labels.size());
}

Blackbox init_blackbox(std::size_t in_dim, std::size_t n_classes, const BlackboxConfig& cfg,
                       std::uint64_t seed) {
  Rng rng = substream(seed, "init.blackbox");
  std::vector<std::size_t> dims{in_dim};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  Blackbox bb;
  bb.phi = Mlp(dims, std::vector<Activation>(cfg.hidden.size(), Activation::relu), rng);
  bb.head = Mlp({cfg.hidden.back(), n_classes}, {Activation::identity}, rng);
  return bb;
}

namespace {

struct LoopSpec {
  std::size_t epochs;
  double lr;
  bool keep_label;
  std::string stream;
};

TrainResult run_training(Blackbox bb, const data::Dataset& ds, const BlackboxConfig& cfg,
                         const LoopSpec& loop, std::vector<diff::NamedParameter> params,
                         std::uint64_t seed) {
  const auto train_rows = ds.indices(data::Split::train);
  if (train_rows.empty()) throw ConfigError("train_blackbox: dataset has no train split");
  const data::Dataset tr = ds.subset(train_rows);
  const data::Dataset va = ds.split_view(data::Split::val);
  const Matrix meta_tr = bb.mdn ? tr.concept_columns(bb.mdn->concepts) : Matrix();

  diff::Optimizer opt({diff::OptimKind::sgd, loop.lr, cfg.weight_decay}, std::move(params));
  Rng rng = substream(seed, loop.stream);
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::min(cfg.batch_size, tr.size());

  TrainResult result{bb, {}};
  for (std::size_t epoch = 0; epoch < loop.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    // Drop the ragged tail so every MDN batch has the same size.
    for (std::size_t start = 0; start + bs <= order.size(); start += bs) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(start + bs));
      Matrix xb(static_cast<Eigen::Index>(bs), tr.X.cols());
      std::vector<int> yb(bs);
      Matrix mb(static_cast<Eigen::Index>(bs), meta_tr.cols());
      for (std::size_t i = 0; i < bs; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = tr.X.row(static_cast<Eigen::Index>(rows[i]));
        yb[i] = tr.y[rows[i]];
        if (bb.mdn) mb.row(static_cast<Eigen::Index>(i)) = meta_tr.row(static_cast<Eigen::Index>(rows[i]));
      }
      const Matrix keep = loop.keep_label ? label_indicators(yb, tr.n_classes) : Matrix();
      Tensor logits = result.model.forward(Tensor::constant(xb), bb.mdn ? &mb : nullptr, MdnMode::train,
                                           loop.keep_label ? &keep : nullptr);
      Tensor loss = diff::cross_entropy(logits, yb);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw NumericalError("blackbox training: non-finite loss at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batches));
      }
      diff::backward(loss);
      opt.step();
      loss_sum += lv;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    rec.train_accuracy = accuracy(result.model.logits_infer(tr.X, meta_tr), tr.y);
    if (va.size() > 0) {
      rec.val_accuracy = accuracy(result.model.logits_infer(va.X, result.model.metadata(va)), va.y);
    }
    result.history.push_back(rec);
  }
  return result;
}

}  // namespace

TrainResult train_blackbox(const data::Dataset& ds, const BlackboxConfig& cfg, std::uint64_t seed) {
  Blackbox bb = init_blackbox(ds.feature_dim(), ds.n_classes, cfg, seed);
  auto params = diff::concat(bb.phi.parameters("phi."), bb.head.parameters("head."));
  return run_training(bb, ds, cfg, {cfg.epochs, cfg.lr, false, "shuffle.blackbox"}, params, seed);
}

TrainResult finetune_with_mdn(const Blackbox& source, const data::Dataset& ds,
                              const std::vector<std::size_t>& concepts, const BlackboxConfig& cfg,
                              std::uint64_t seed) {
  if (concepts.empty()) throw ConfigError("elimination needs at least one metadata concept");
  for (auto c : concepts) {
    if (c >= ds.n_concepts()) throw ConfigError("metadata concept c" + std::to_string(c) + " not in dataset");
  }
  Blackbox bb = source.clone();
  MDNState st;
  st.layer_index = 0;
  st.concepts = concepts;
  st.running_beta = Matrix::Zero(static_cast<Eigen::Index>(concepts.size()),
                                 static_cast<Eigen::Index>(bb.phi.layer(0).weight.rows()));
  bb.mdn = st;
  std::vector<diff::NamedParameter> params;
  for (std::size_t i = 1; i < bb.phi.num_layers(); ++i) {
    const auto& l = bb.phi.layer(i);
    params.push_back({"phi.layer" + std::to_string(i) + ".weight", l.weight});
    params.push_back({"phi.layer" + std::to_string(i) + ".bias", l.bias});
  }
  params = diff::concat(params, bb.head.parameters("head."));
  // With no training batch the running estimate stays at zero: a no-op layer.
  bb.mdn->initialized = cfg.finetune_epochs == 0;
  return run_training(bb, ds, cfg,
                      {cfg.finetune_epochs, cfg.lr * cfg.finetune_lr_scale, cfg.mdn_keep_label,
                       "shuffle.finetune"},
                      params, seed);
}

}  // namespace moie::models
