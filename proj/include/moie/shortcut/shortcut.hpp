#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moie/carve/carve.hpp"
#include "moie/data/dataset.hpp"
#include "moie/folx/folx.hpp"
#include "moie/models/blackbox.hpp"

namespace moie::shortcut {

struct ShortcutConfig {
  double attention_threshold = 0.5;
  // Concepts scoring above this are eliminated; at least `min_detected`.
  double detect_threshold = 0.2;
  std::size_t min_detected = 1;
  data::Split detect_split = data::Split::val;
  data::Split eval_split = data::Split::test;

  void validate() const;
};

void to_json(nlohmann::json& j, const ShortcutConfig& c);
void from_json(const nlohmann::json& j, ShortcutConfig& c);

// ---------------------------------------------------------------- groups

struct GroupAccuracy {
  int group = 0;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

struct GroupMetrics {
  std::vector<GroupAccuracy> groups;  // by group id
  std::size_t n = 0;
  double average = 0.0;  // overall sample accuracy
  double worst = 0.0;
  int worst_group = -1;
};

// Throws ShapeError on misaligned inputs, ConfigError if a group id is out of
// [0, n_groups) or some group has no samples.
GroupMetrics group_metrics(const std::vector<int>& preds, const std::vector<int>& labels,
                           const std::vector<int>& groups, std::size_t n_groups);
nlohmann::json to_json(const GroupMetrics& g);

// ---------------------------------------------------------------- rules

struct ExpertRules {
  std::size_t expert = 0;  // 1-based
  std::size_t covered = 0;
  folx::Vocabulary vocab;
  std::vector<folx::FOLRule> rules;
};

// Rules of every expert, extracted from the `split` samples routed to it.
// Experts that receive no samples get an empty rule list.
std::vector<ExpertRules> extract_rules(const carve::CarveState& state, const data::Dataset& ds,
                                       double attention_threshold, data::Split split = data::Split::train);
nlohmann::json to_json(const ExpertRules& r);

// ---------------------------------------------------------------- detection

struct ConceptScore {
  std::size_t index = 0;  // dataset concept index
  std::string name;
  std::size_t rule_mentions = 0;  // literals across all experts' rules
  double misclassified_frequency = 0.0;
  double correct_frequency = 0.0;
  double score = 0.0;
};

struct Detection {
  std::string split;
  std::size_t n_explained = 0;
  std::size_t n_misclassified = 0;
  std::size_t n_correct = 0;
  std::vector<ConceptScore> ranking;   // mentioned concepts by score, then unmentioned
  std::vector<std::size_t> detected;   // dataset indices handed to elimination
  std::vector<ExpertRules> rules;
};

// Scores each concept by how much more often it appears in the explanations
// governing misclassified samples of the detect split than correct ones. A
// sample's explanation is the union of the shortest subsets of its own
// selected literals that force its expert's prediction. Rules in the report are
// extracted from train. Reads only the carve state and the dataset. Throws
// ConfigError if nothing is misclassified.
Detection detect(const carve::CarveState& state, const data::Dataset& ds, const ShortcutConfig& cfg);
nlohmann::json to_json(const Detection& d);

// ---------------------------------------------------------------- elimination

struct Elimination {
  std::vector<std::size_t> concepts;
  std::vector<std::string> names;
  models::Blackbox blackbox;
  std::vector<models::EpochRecord> history;
};

// MDN fine-tune with the detected concepts' ground-truth columns as metadata.
// Throws ConfigError on an empty or out-of-range concept list.
Elimination eliminate(const models::Blackbox& bb, const std::vector<std::size_t>& detected, const data::Dataset& ds,
                      const models::BlackboxConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------- verification

struct Violation {
  std::size_t expert = 0;
  int class_id = 0;
  std::vector<std::size_t> concepts;
};

struct ProbeRow {
  std::size_t index = 0;
  std::string name;
  double before = 0.0;
  double after = 0.0;
  bool included_before = false;
  bool included_after = false;
};

struct Verification {
  std::vector<std::size_t> concepts;
  std::vector<Violation> violations;
  std::size_t mention_count = 0;
  std::vector<ExpertRules> rules;
  std::vector<ProbeRow> probes;
  GroupMetrics blackbox;     // fine-tuned blackbox
  GroupMetrics moie;         // covered samples only
  GroupMetrics moie_plus_r;
};

// `state` must be carved on a blackbox whose MDN normalizes every detected
// concept; otherwise StageOrderError.
Verification verify(const carve::CarveState& state, const data::Dataset& ds, const std::vector<std::size_t>& detected,
                    const models::Projector& before, const ShortcutConfig& cfg);
nlohmann::json to_json(const Verification& v);

// ---------------------------------------------------------------- pipeline

struct SummaryRow {
  std::string model;
  double average = 0.0;
  double worst = 0.0;
};

struct ShortcutReport {
  std::uint64_t seed = 0;
  std::string eval_split;
  GroupMetrics biased_blackbox;
  std::optional<carve::IterationReport> biased_carve;
  std::optional<Detection> detection;
  std::optional<Elimination> elimination;
  std::optional<carve::IterationReport> robust_carve;
  std::optional<Verification> verification;

  std::vector<std::string> stages() const;
  std::vector<SummaryRow> summary() const;
};

nlohmann::json to_json(const ShortcutReport& r);
std::string to_markdown(const ShortcutReport& r);

// Per-seed rows and mean ± std (population) over seeds.
nlohmann::json seeds_summary(const std::vector<ShortcutReport>& reports);
std::string seeds_markdown(const std::vector<ShortcutReport>& reports);

struct PipelineConfig {
  models::BlackboxConfig blackbox;
  carve::CarveConfig carve;
  ShortcutConfig shortcut;
  bool skip_eliminate = false;
};

// Models produced along the way, for checkpointing.
struct PipelineArtifacts {
  std::optional<models::Blackbox> biased_blackbox;
  std::optional<carve::CarveState> biased;
  std::optional<carve::CarveState> robust;
};

// Biased blackbox -> carve -> detect -> eliminate -> carve again -> verify.
// `on_stage` sees the report after every completed stage, so a failure later
// on still leaves the earlier stages behind. With skip_eliminate the
// verification step throws StageOrderError.
ShortcutReport run_pipeline(const data::Dataset& ds, const PipelineConfig& cfg, std::uint64_t seed,
                            const std::function<void(const ShortcutReport&)>& on_stage = {},
                            PipelineArtifacts* artifacts = nullptr);

}  // namespace moie::shortcut
