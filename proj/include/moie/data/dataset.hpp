#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moie/diff/tensor.hpp"

namespace moie::data {

using diff::Matrix;

enum class Split : std::uint8_t { train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

// Synthetic concept-annotated dataset with planted spurious concepts.
//
// Core concepts are fair coin flips; the label is a boolean function of the
// core concepts. A single background bit agrees with the label with
// probability `train_correlation` on train rows and `test_correlation` on
// val/test rows; spurious concept j is that bit for even j and its complement
// for odd j (land, water, ...). Features are a fixed random linear mix of the
// concepts plus noise.
struct ShortcutSpec {
  std::size_t n_samples = 12000;
  std::size_t n_core_concepts = 8;
  std::size_t n_spurious_concepts = 2;
  std::size_t n_classes = 2;
  std::size_t feature_dim = 32;
  double train_correlation = 0.95;
  double test_correlation = 0.5;
  // majority | parity | any | all | first | table
  std::string label_rule = "majority";
  // Used when label_rule == "table": entry i is the label of the core
  // assignment whose bit j is concept j.
  std::vector<int> truth_table;
  double noise_std = 0.05;
  // Column scale of spurious concepts in the mixing matrix (core columns
  // have scale 1): how visually dominant the spurious factor is.
  double spurious_scale = 4.0;
  std::array<double, 3> split_fractions{0.7, 0.1, 0.2};
  std::uint64_t seed = 0;

  std::size_t n_concepts() const { return n_core_concepts + n_spurious_concepts; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ShortcutSpec& s);
// Rejects unknown keys.
void from_json(const nlohmann::json& j, ShortcutSpec& s);

// Evaluates a label rule on one core-concept assignment.
int apply_label_rule(const ShortcutSpec& spec, const std::vector<int>& core);

struct Dataset {
  Matrix X;                  // [n, feature_dim]
  Matrix C;                  // [n, n_concepts], entries 0/1
  std::vector<int> y;        // class labels
  std::vector<int> group;    // label * 2 + first spurious concept (or label)
  std::vector<Split> split;  // exactly one tag per row
  std::vector<std::string> concept_names;
  std::size_t n_classes = 2;
  std::size_t n_groups = 2;

  std::size_t size() const { return y.size(); }
  std::size_t n_concepts() const { return static_cast<std::size_t>(C.cols()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(X.cols()); }

  std::vector<std::size_t> indices(Split s) const;
  // Row subset in the given order.
  Dataset subset(const std::vector<std::size_t>& rows) const;
  Dataset split_view(Split s) const { return subset(indices(s)); }
  // Columns of C selected by concept index, as doubles.
  Matrix concept_columns(const std::vector<std::size_t>& concepts) const;
};

// Everything the generator knows that the learner must not see: the spec,
// which concepts are spurious, and the mixing matrix. Lives in the JSON
// sidecar next to the CSV.
struct DatasetInfo {
  ShortcutSpec spec;
  std::vector<std::string> concept_names;
  std::vector<bool> spurious_mask;
  Matrix mixing;  // [feature_dim, n_concepts + 1], last column is the offset
};

struct Generated {
  Dataset data;
  DatasetInfo info;
};

Generated generate(const ShortcutSpec& spec);

// Stratified re-split by group id. Per group, split sizes differ from exact
// proportionality by at most one row.
Dataset split_dataset(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed);

// Largest-remainder apportionment of n into the given fractions.
std::array<std::size_t, 3> apportion(std::size_t n, const std::array<double, 3>& fractions);

// CSV header: x0..x{d-1},c0..c{k-1},y,g,split
void save_csv(const Dataset& ds, const std::filesystem::path& path);
std::string to_csv(const Dataset& ds);
// Loads `path`; if `<stem>.json` exists next to it, its concept names and
// counts are used to validate the header.
Dataset load_csv(const std::filesystem::path& path);
Dataset parse_csv(const std::string& text, const std::optional<DatasetInfo>& info = std::nullopt);

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path);
void save_sidecar(const DatasetInfo& info, const std::filesystem::path& path);
DatasetInfo load_sidecar(const std::filesystem::path& path);
nlohmann::json to_json(const DatasetInfo& info);
DatasetInfo info_from_json(const nlohmann::json& j);

// Number of rows per (split, group).
std::vector<std::array<std::size_t, 3>> group_split_counts(const Dataset& ds);

}  // namespace moie::data
