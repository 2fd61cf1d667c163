#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moie/models/expert.hpp"

namespace moie::folx {

using diff::Matrix;

// Concept indices here are positions in the expert's input (0..arity-1).
struct Literal {
  std::size_t index = 0;
  bool negated = false;

  friend bool operator==(const Literal&, const Literal&) = default;
  friend auto operator<=>(const Literal&, const Literal&) = default;
};

// Literals sorted by index, at most one per concept. Empty means "true".
using Conjunction = std::vector<Literal>;
using Dnf = std::vector<Conjunction>;

struct FOLRule {
  int class_id = 0;
  std::vector<std::size_t> selected;  // concepts with scaled attention >= threshold
  Dnf dnf;
  std::size_t support = 0;            // covered samples on which the rule holds
  double fidelity = 0.0;              // agreement of the rule with "expert predicts class_id"
  bool no_selected_concepts = false;  // warning: nothing passed the threshold
};

// Binarizes concept probabilities at 0.5.
std::vector<bool> binarize(const Matrix& concepts, Eigen::Index row);

// Deduplicates, merges (a & X) | (~a & X) -> X to a fixpoint, and drops
// subsumed conjunctions. Semantics are preserved exactly. Output is sorted.
Dnf simplify(const Dnf& dnf);

// One rule per class the expert predicts on at least one covered sample.
// Patterns of the selected concepts are collected verbatim, then simplified
// unless `simplify_rules` is false. Throws ConfigError on an empty covered
// set or arity mismatch.
std::vector<FOLRule> extract_fol(const models::EntropyExpert& expert, const Matrix& covered,
                                 double attention_threshold, bool simplify_rules = true);

bool conjunction_holds(const Conjunction& conj, const std::vector<bool>& c);
// True iff some conjunction holds. Throws ShapeError if a literal is out of range.
bool rule_eval(const FOLRule& rule, const std::vector<bool>& c);

// Fraction of samples whose predicted class has a rule that holds on them.
// Classes without a rule count as not explained. Throws ConfigError on no samples.
double fidelity(const std::vector<FOLRule>& rules, const models::EntropyExpert& expert, const Matrix& samples);

struct Mentions {
  std::vector<int> classes;            // class id per rule
  std::vector<bool> mentioned;         // per rule
  std::vector<std::size_t> concepts;   // the query
  std::vector<std::size_t> counts;     // literal count per queried concept, across rules
  bool any() const;
};
Mentions rule_mentions(const std::vector<FOLRule>& rules, const std::vector<std::size_t>& concepts);

// Rule for `class_id`, if any.
const FOLRule* find_rule(const std::vector<FOLRule>& rules, int class_id);

// Local explanation: the shortest conjunction of the rule that holds on the
// sample (ties broken by literal order). Falls back to the sample's own pattern
// over the selected concepts when no conjunction holds (matched = false).
struct LocalExplanation {
  Conjunction conjunction;
  bool matched = false;
};
LocalExplanation local_explanation(const FOLRule& rule, const std::vector<bool>& c);

// Union of the shortest subsets of the sample's own literals over
// `rule.selected` that force the expert to predict `rule.class_id` whatever
// values the other selected concepts take (unselected concepts held at the
// sample's values). Each such subset is an implicant of the expert's truth
// table over the selected concepts. matched is false if even the full pattern
// does not yield the class. Throws ConfigError for more than 16 selected
// concepts.
LocalExplanation sufficient_explanation(const models::EntropyExpert& expert, const FOLRule& rule,
                                        const std::vector<bool>& c);

// Dataset-facing names for the expert's inputs: `ids[i]` is the dataset
// index index of input i.
struct Vocabulary {
  std::vector<std::size_t> ids;
  std::vector<std::string> names;
};

std::string to_text(const Conjunction& conj, const Vocabulary& vocab);
// e.g. "class_1 <-> (c0=core_0 & ~c9=background_1) | (...)", rendered with
// the logic symbols.
std::string to_text(const FOLRule& rule, const Vocabulary& vocab);
nlohmann::json to_json(const FOLRule& rule, const Vocabulary& vocab);
nlohmann::json to_json(const Conjunction& conj, const Vocabulary& vocab);

}  // namespace moie::folx
