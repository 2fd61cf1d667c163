#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moie/data/dataset.hpp"
#include "moie/diff/mlp.hpp"
#include "moie/models/mdn.hpp"

namespace moie::models {

// f = h o Phi. When `mdn` is set, normalization is applied to the
// pre-activation of Phi layer `mdn->layer_index`, using the dataset's ground
// truth values of `mdn->concepts` as metadata.
struct Blackbox {
  diff::Mlp phi;
  diff::Mlp head;
  std::optional<MDNState> mdn;

  std::size_t repr_dim() const { return phi.output_dim(); }
  std::size_t n_classes() const { return head.output_dim(); }

  // Metadata block for rows of `ds` (empty matrix when no MDN).
  Matrix metadata(const data::Dataset& ds) const;

  // Tracked pass. `meta` is required iff mdn is set; `keep` only in train mode.
  diff::Tensor phi_forward(const diff::Tensor& x, const Matrix* meta, MdnMode mode,
                           const Matrix* keep = nullptr);
  diff::Tensor forward(const diff::Tensor& x, const Matrix* meta, MdnMode mode,
                       const Matrix* keep = nullptr);

  // Graph-free inference; thread-safe.
  Matrix phi_infer(const Matrix& x, const Matrix& meta) const;
  Matrix logits_infer(const Matrix& x, const Matrix& meta) const;
  // Convenience over a whole dataset.
  Matrix features(const data::Dataset& ds) const;
  Matrix logits(const data::Dataset& ds) const;

  Blackbox clone() const;
  // SHA-256 of Phi's serialized parameters (and MDN state when present).
  std::string phi_hash() const;

  nlohmann::json to_json() const;
  static Blackbox from_json(const nlohmann::json& j);
};

struct BlackboxConfig {
  std::vector<std::size_t> hidden{64, 64};
  std::size_t epochs = 3;
  double lr = 0.05;
  std::size_t batch_size = 64;
  double weight_decay = 0.0;
  // Elimination fine-tune.
  std::size_t finetune_epochs = 20;
  double finetune_lr_scale = 0.1;
  bool mdn_keep_label = true;
};

void to_json(nlohmann::json& j, const BlackboxConfig& c);
void from_json(const nlohmann::json& j, BlackboxConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  Blackbox model;
  std::vector<EpochRecord> history;
};

Blackbox init_blackbox(std::size_t in_dim, std::size_t n_classes, const BlackboxConfig& cfg,
                       std::uint64_t seed);

// SGD on cross-entropy over the train split. epochs == 0 returns the
// initialization. Throws NumericalError naming epoch and batch on a
// non-finite loss.
TrainResult train_blackbox(const data::Dataset& ds, const BlackboxConfig& cfg, std::uint64_t seed);

// Inserts MDN at Phi's first layer with the given concepts as metadata and
// fine-tunes the post-MDN layers and the head at lr * finetune_lr_scale.
// Pre-MDN parameters are left untouched.
TrainResult finetune_with_mdn(const Blackbox& bb, const data::Dataset& ds,
                              const std::vector<std::size_t>& concepts, const BlackboxConfig& cfg,
                              std::uint64_t seed);

double accuracy(const Matrix& logits, const std::vector<int>& labels);
std::vector<int> argmax_rows(const Matrix& logits);

}  // namespace moie::models
