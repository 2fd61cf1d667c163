#include "moie/folx/folx.hpp"

#include <algorithm>
#include <bit>
#include <set>
#include <unordered_set>

#include "moie/errors.hpp"
#include "moie/models/blackbox.hpp"

namespace moie::folx {

namespace {

// Ordering used for every emitted DNF: shorter conjunctions first.
bool shorter(const Conjunction& a, const Conjunction& b) {
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

// Sorted, literal-deduplicated form; nullopt if the conjunction is contradictory.
std::optional<Conjunction> normalize(Conjunction c) {
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  for (std::size_t i = 1; i < c.size(); ++i)
    if (c[i].index == c[i - 1].index) return std::nullopt;
  return c;
}

bool subsumes(const Conjunction& general, const Conjunction& specific) {
  return std::includes(specific.begin(), specific.end(), general.begin(), general.end());
}

}  // namespace

std::vector<bool> binarize(const Matrix& concepts, Eigen::Index row) {
  std::vector<bool> out(static_cast<std::size_t>(concepts.cols()));
  for (Eigen::Index j = 0; j < concepts.cols(); ++j) out[static_cast<std::size_t>(j)] = concepts(row, j) >= 0.5;
  return out;
}

Dnf simplify(const Dnf& dnf) {
  // Encode every conjunction over the union of its variables as a string of
  // '0', '1' and '-' (absent).
  std::vector<std::size_t> vars;
  std::vector<Conjunction> terms;
  for (const auto& c : dnf) {
    auto n = normalize(c);
    if (!n) continue;
    for (const auto& l : *n) vars.push_back(l.index);
    terms.push_back(std::move(*n));
  }
  std::sort(vars.begin(), vars.end());
  vars.erase(std::unique(vars.begin(), vars.end()), vars.end());
  const auto pos = [&vars](std::size_t index) {
    return static_cast<std::size_t>(std::lower_bound(vars.begin(), vars.end(), index) - vars.begin());
  };

  std::unordered_set<std::string> closure;
  std::vector<std::string> frontier;
  for (const auto& c : terms) {
    std::string s(vars.size(), '-');
    for (const auto& l : c) s[pos(l.index)] = l.negated ? '0' : '1';
    if (closure.insert(s).second) frontier.push_back(std::move(s));
  }

  // Close under (a & X) | (~a & X) -> X.
  while (!frontier.empty()) {
    std::vector<std::string> next;
    for (const auto& t : frontier) {
      for (std::size_t p = 0; p < t.size(); ++p) {
        if (t[p] == '-') continue;
        std::string partner = t;
        partner[p] = t[p] == '0' ? '1' : '0';
        if (!closure.count(partner)) continue;
        std::string merged = t;
        merged[p] = '-';
        if (closure.insert(merged).second) next.push_back(std::move(merged));
      }
    }
    frontier = std::move(next);
  }

  // Keep terms with no merge partner, then drop subsumed ones.
  Dnf primes;
  for (const auto& t : closure) {
    bool mergeable = false;
    for (std::size_t p = 0; p < t.size() && !mergeable; ++p) {
      if (t[p] == '-') continue;
      std::string partner = t;
      partner[p] = t[p] == '0' ? '1' : '0';
      mergeable = closure.count(partner) > 0;
    }
    if (mergeable) continue;
    Conjunction c;
    for (std::size_t p = 0; p < t.size(); ++p)
      if (t[p] != '-') c.push_back({vars[p], t[p] == '0'});
    primes.push_back(std::move(c));
  }
  std::sort(primes.begin(), primes.end(), shorter);
  Dnf out;
  for (const auto& c : primes) {
    const bool covered = std::any_of(out.begin(), out.end(), [&c](const Conjunction& g) { return subsumes(g, c); });
    if (!covered) out.push_back(c);
  }
  return out;
}

bool conjunction_holds(const Conjunction& conj, const std::vector<bool>& c) {
  for (const auto& l : conj) {
    if (l.index >= c.size()) {
      throw ShapeError("literal over concept " + std::to_string(l.index) + " for a vector of " +
                       std::to_string(c.size()) + " concepts");
    }
    if (c[l.index] == l.negated) return false;
  }
  return true;
}

bool rule_eval(const FOLRule& rule, const std::vector<bool>& c) {
  return std::any_of(rule.dnf.begin(), rule.dnf.end(), [&c](const Conjunction& conj) { return conjunction_holds(conj, c); });
}

const FOLRule* find_rule(const std::vector<FOLRule>& rules, int class_id) {
  for (const auto& r : rules)
    if (r.class_id == class_id) return &r;
  return nullptr;
}

std::vector<FOLRule> extract_fol(const models::EntropyExpert& expert, const Matrix& covered,
                                 double attention_threshold, bool simplify_rules) {
  if (covered.rows() == 0) throw ConfigError("extract_fol: no covered samples");
  if (static_cast<std::size_t>(covered.cols()) != expert.arity()) {
    throw ShapeError("extract_fol: " + std::to_string(covered.cols()) + " concepts for an expert of arity " +
                     std::to_string(expert.arity()));
  }
  const Matrix att = expert.attention_scaled();
  const auto pred = models::argmax_rows(models::entropy_infer(expert, covered));
  std::vector<std::vector<bool>> bits;
  bits.reserve(static_cast<std::size_t>(covered.rows()));
  for (Eigen::Index i = 0; i < covered.rows(); ++i) bits.push_back(binarize(covered, i));

  std::vector<FOLRule> rules;
  for (std::size_t y = 0; y < expert.n_classes(); ++y) {
    const int cls = static_cast<int>(y);
    if (std::find(pred.begin(), pred.end(), cls) == pred.end()) continue;
    FOLRule rule;
    rule.class_id = cls;
    for (std::size_t j = 0; j < expert.arity(); ++j)
      if (att(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(j)) >= attention_threshold) rule.selected.push_back(j);
    rule.no_selected_concepts = rule.selected.empty();
    if (!rule.no_selected_concepts) {
      std::set<Conjunction> patterns;
      for (std::size_t i = 0; i < bits.size(); ++i) {
        if (pred[i] != cls) continue;
        Conjunction c;
        for (auto j : rule.selected) c.push_back({j, !bits[i][j]});
        patterns.insert(std::move(c));
      }
      rule.dnf.assign(patterns.begin(), patterns.end());
      if (simplify_rules) rule.dnf = simplify(rule.dnf);
    }
    std::size_t agree = 0;
    for (std::size_t i = 0; i < bits.size(); ++i) {
      const bool holds = rule_eval(rule, bits[i]);
      rule.support += holds;
      agree += holds == (pred[i] == cls);
    }
    rule.fidelity = static_cast<double>(agree) / static_cast<double>(bits.size());
    rules.push_back(std::move(rule));
  }
  return rules;
}

double fidelity(const std::vector<FOLRule>& rules, const models::EntropyExpert& expert, const Matrix& samples) {
  if (samples.rows() == 0) throw ConfigError("fidelity: no samples");
  const auto pred = models::argmax_rows(models::entropy_infer(expert, samples));
  std::size_t ok = 0;
  for (Eigen::Index i = 0; i < samples.rows(); ++i) {
    const FOLRule* r = find_rule(rules, pred[static_cast<std::size_t>(i)]);
    ok += r && rule_eval(*r, binarize(samples, i));
  }
  return static_cast<double>(ok) / static_cast<double>(samples.rows());
}

bool Mentions::any() const { return std::find(mentioned.begin(), mentioned.end(), true) != mentioned.end(); }

Mentions rule_mentions(const std::vector<FOLRule>& rules, const std::vector<std::size_t>& concepts) {
  Mentions m;
  m.concepts = concepts;
  m.counts.assign(concepts.size(), 0);
  for (const auto& r : rules) {
    bool hit = false;
    for (const auto& conj : r.dnf) {
      for (const auto& l : conj) {
        for (std::size_t q = 0; q < concepts.size(); ++q) {
          if (l.index == concepts[q]) {
            ++m.counts[q];
            hit = true;
          }
        }
      }
    }
    m.classes.push_back(r.class_id);
    m.mentioned.push_back(hit);
  }
  return m;
}

LocalExplanation local_explanation(const FOLRule& rule, const std::vector<bool>& c) {
  LocalExplanation out;
  for (const auto& conj : rule.dnf) {
    if (!conjunction_holds(conj, c)) continue;
    if (!out.matched || shorter(conj, out.conjunction)) out.conjunction = conj;
    out.matched = true;
  }
  if (!out.matched) {
    for (auto j : rule.selected) {
      if (j >= c.size()) throw ShapeError("local_explanation: selected index out of range");
      out.conjunction.push_back({j, !c[j]});
    }
  }
  return out;
}

LocalExplanation sufficient_explanation(const models::EntropyExpert& expert, const FOLRule& rule,
                                        const std::vector<bool>& c) {
  const std::size_t m = rule.selected.size();
  if (m > 16) throw ConfigError("sufficient_explanation: more than 16 selected concepts");
  if (c.size() != expert.arity()) throw ShapeError("sufficient_explanation: concept vector does not match the expert");
  for (auto j : rule.selected)
    if (j >= c.size()) throw ShapeError("sufficient_explanation: selected index out of range");

  // Every completion of the selected concepts, the rest fixed to the sample.
  const std::size_t n = std::size_t{1} << m;
  Matrix grid(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c.size()));
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t j = 0; j < c.size(); ++j) grid(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j)) = c[j];
    for (std::size_t b = 0; b < m; ++b)
      grid(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(rule.selected[b])) = (p >> b) & 1U;
  }
  const auto pred = models::argmax_rows(models::entropy_infer(expert, grid));

  std::size_t own = 0;
  for (std::size_t b = 0; b < m; ++b) own |= std::size_t{c[rule.selected[b]]} << b;
  // refuted[S]: some completion agreeing with the sample on S predicts another class.
  std::vector<char> refuted(n, 0);
  for (std::size_t p = 0; p < n; ++p)
    if (pred[p] != rule.class_id) refuted[~(p ^ own) & (n - 1)] = 1;
  for (std::size_t b = 0; b < m; ++b)
    for (std::size_t s = 0; s < n; ++s)
      if ((s >> b) & 1U) refuted[s & ~(std::size_t{1} << b)] |= refuted[s];

  // Union over every shortest unrefuted subset, so ties do not favour low indices.
  LocalExplanation out;
  int shortest = static_cast<int>(m) + 1;
  for (std::size_t s = 0; s < n; ++s)
    if (!refuted[s]) shortest = std::min(shortest, std::popcount(s));
  out.matched = shortest <= static_cast<int>(m);
  std::size_t best = 0;
  for (std::size_t s = 0; s < n; ++s)
    if (!refuted[s] && std::popcount(s) == shortest) best |= s;
  if (!out.matched) best = n - 1;
  for (std::size_t b = 0; b < m; ++b)
    if ((best >> b) & 1U) out.conjunction.push_back({rule.selected[b], !c[rule.selected[b]]});
  std::sort(out.conjunction.begin(), out.conjunction.end());
  return out;
}

namespace {

std::string literal_text(const Literal& l, const Vocabulary& vocab) {
  std::string name;
  if (l.index < vocab.ids.size() && l.index < vocab.names.size()) {
    name = "c" + std::to_string(vocab.ids[l.index]) + "=" + vocab.names[l.index];
  } else {
    name = "x" + std::to_string(l.index);
  }
  return l.negated ? "¬" + name : name;
}

}  // namespace

std::string to_text(const Conjunction& conj, const Vocabulary& vocab) {
  if (conj.empty()) return "⊤";
  std::string s = "(";
  for (std::size_t i = 0; i < conj.size(); ++i) {
    if (i) s += " ∧ ";
    s += literal_text(conj[i], vocab);
  }
  return s + ")";
}

std::string to_text(const FOLRule& rule, const Vocabulary& vocab) {
  std::string s = "class_" + std::to_string(rule.class_id) + " ↔ ";
  if (rule.dnf.empty()) return s + "⊥";
  for (std::size_t i = 0; i < rule.dnf.size(); ++i) {
    if (i) s += " ∨ ";
    s += to_text(rule.dnf[i], vocab);
  }
  return s;
}

nlohmann::json to_json(const Conjunction& conj, const Vocabulary& vocab) {
  nlohmann::json lits = nlohmann::json::array();
  for (const auto& l : conj) {
    nlohmann::json j = {{"concept", l.index}, {"negated", l.negated}};
    if (l.index < vocab.ids.size()) j["dataset_concept"] = vocab.ids[l.index];
    if (l.index < vocab.names.size()) j["name"] = vocab.names[l.index];
    lits.push_back(std::move(j));
  }
  return lits;
}

nlohmann::json to_json(const FOLRule& rule, const Vocabulary& vocab) {
  nlohmann::json dnf = nlohmann::json::array();
  for (const auto& c : rule.dnf) dnf.push_back(to_json(c, vocab));
  return {{"class", rule.class_id},
          {"selected", rule.selected},
          {"dnf", dnf},
          {"support", rule.support},
          {"fidelity", rule.fidelity},
          {"no_selected_concepts", rule.no_selected_concepts},
          {"text", to_text(rule, vocab)}};
}

}  // namespace moie::folx
