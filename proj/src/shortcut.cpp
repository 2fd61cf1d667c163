#include "moie/shortcut/shortcut.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "moie/errors.hpp"
#include "moie/util.hpp"

namespace moie::shortcut {

using carve::CarveState;
using data::Dataset;
using data::Split;
using diff::Matrix;

// ---------------------------------------------------------------- config

void ShortcutConfig::validate() const {
  if (attention_threshold < 0.0 || attention_threshold > 1.0) {
    throw ConfigError("shortcut: attention_threshold must lie in [0, 1]");
  }
  if (!std::isfinite(detect_threshold)) throw ConfigError("shortcut: detect_threshold must be finite");
  if (min_detected == 0) throw ConfigError("shortcut: min_detected must be at least 1");
}

void to_json(nlohmann::json& j, const ShortcutConfig& c) {
  j = {{"attention_threshold", c.attention_threshold},
       {"detect_threshold", c.detect_threshold},
       {"min_detected", c.min_detected},
       {"detect_split", data::to_string(c.detect_split)},
       {"eval_split", data::to_string(c.eval_split)}};
}

void from_json(const nlohmann::json& j, ShortcutConfig& c) {
  reject_unknown_keys(j, {"attention_threshold", "detect_threshold", "min_detected", "detect_split", "eval_split"},
                      "shortcut config");
  try {
    if (j.contains("attention_threshold")) c.attention_threshold = j.at("attention_threshold").get<double>();
    if (j.contains("detect_threshold")) c.detect_threshold = j.at("detect_threshold").get<double>();
    if (j.contains("min_detected")) c.min_detected = j.at("min_detected").get<std::size_t>();
    if (j.contains("detect_split")) c.detect_split = data::split_from_string(j.at("detect_split").get<std::string>());
    if (j.contains("eval_split")) c.eval_split = data::split_from_string(j.at("eval_split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("shortcut config: ") + e.what());
  }
  c.validate();
}

// ---------------------------------------------------------------- groups

GroupMetrics group_metrics(const std::vector<int>& preds, const std::vector<int>& labels,
                           const std::vector<int>& groups, std::size_t n_groups) {
  if (preds.size() != labels.size() || preds.size() != groups.size()) {
    throw ShapeError("group_metrics: " + std::to_string(preds.size()) + " predictions, " +
                     std::to_string(labels.size()) + " labels, " + std::to_string(groups.size()) + " group ids");
  }
  GroupMetrics m;
  m.groups.resize(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) m.groups[g].group = static_cast<int>(g);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (groups[i] < 0 || static_cast<std::size_t>(groups[i]) >= n_groups) {
      throw ConfigError("group_metrics: group id " + std::to_string(groups[i]) + " outside [0, " +
                        std::to_string(n_groups) + ")");
    }
    auto& g = m.groups[static_cast<std::size_t>(groups[i])];
    ++g.n;
    const bool ok = preds[i] == labels[i];
    g.correct += ok;
    correct += ok;
  }
  m.n = preds.size();
  m.worst = 1.0;
  for (auto& g : m.groups) {
    if (g.n == 0) throw ConfigError("group_metrics: group " + std::to_string(g.group) + " has no samples");
    g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.n);
    if (m.worst_group < 0 || g.accuracy < m.worst) {
      m.worst = g.accuracy;
      m.worst_group = g.group;
    }
  }
  m.average = static_cast<double>(correct) / static_cast<double>(m.n);
  return m;
}

nlohmann::json to_json(const GroupMetrics& g) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& a : g.groups) {
    groups.push_back({{"group", a.group}, {"n", a.n}, {"correct", a.correct}, {"accuracy", a.accuracy}});
  }
  return {{"n", g.n}, {"average", g.average}, {"worst", g.worst}, {"worst_group", g.worst_group}, {"groups", groups}};
}

// ---------------------------------------------------------------- rules

namespace {

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

folx::Vocabulary vocabulary(const CarveState& state) {
  return {state.projector.included_indices(), state.projector.included_names()};
}

// Rows of `concepts` per destination: index 0 is the residual.
std::vector<std::vector<std::size_t>> by_destination(const CarveState& state, const Matrix& concepts) {
  std::vector<std::vector<std::size_t>> out(state.n_iterations() + 1);
  for (const auto& r : carve::route_all(state, concepts)) {
    out[r.residual() ? 0 : static_cast<std::size_t>(r.destination)].push_back(r.index);
  }
  return out;
}

std::vector<int> with_uncovered(const std::vector<carve::Prediction>& preds) {
  std::vector<int> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back(p.label);
  return out;
}

}  // namespace

std::vector<ExpertRules> extract_rules(const CarveState& state, const Dataset& ds, double attention_threshold,
                                       Split split) {
  const Dataset part = ds.subset(ds.indices(split));
  const carve::Inputs in = carve::compute_inputs(state, part);
  const auto dest = by_destination(state, in.concepts);
  const folx::Vocabulary vocab = vocabulary(state);
  std::vector<ExpertRules> out;
  for (std::size_t k = 1; k <= state.n_iterations(); ++k) {
    ExpertRules er;
    er.expert = k;
    er.covered = dest[k].size();
    er.vocab = vocab;
    if (!dest[k].empty()) {
      er.rules = folx::extract_fol(state.iterations[k - 1].expert, take_rows(in.concepts, dest[k]), attention_threshold);
    }
    out.push_back(std::move(er));
  }
  return out;
}

nlohmann::json to_json(const ExpertRules& r) {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& rule : r.rules) rules.push_back(folx::to_json(rule, r.vocab));
  return {{"expert", r.expert}, {"covered", r.covered}, {"rules", rules}};
}

// ---------------------------------------------------------------- detection

Detection detect(const CarveState& state, const Dataset& ds, const ShortcutConfig& cfg) {
  cfg.validate();
  if (state.n_iterations() == 0) throw StageOrderError("detect: carve at least one expert first");
  Detection d;
  d.split = data::to_string(cfg.detect_split);
  d.rules = extract_rules(state, ds, cfg.attention_threshold, Split::train);

  const Dataset part = ds.subset(ds.indices(cfg.detect_split));
  const carve::Inputs in = carve::compute_inputs(state, part);
  const auto dest = by_destination(state, in.concepts);

  const std::size_t nc = ds.n_concepts();
  std::vector<std::size_t> wrong_hits(nc, 0), right_hits(nc, 0);
  for (std::size_t k = 1; k <= state.n_iterations(); ++k) {
    if (dest[k].empty()) continue;
    const Matrix c = take_rows(in.concepts, dest[k]);
    const auto& expert = state.iterations[k - 1].expert;
    const auto pred = models::argmax_rows(models::entropy_infer(expert, c));
    const auto& er = d.rules[k - 1];
    for (std::size_t j = 0; j < dest[k].size(); ++j) {
      const bool wrong = pred[j] != part.y[dest[k][j]];
      (wrong ? d.n_misclassified : d.n_correct) += 1;
      // A class never predicted on train still has its attention-selected concepts.
      const folx::FOLRule* rule = folx::find_rule(er.rules, pred[j]);
      folx::FOLRule fallback;
      if (!rule) {
        fallback.class_id = pred[j];
        const Matrix att = expert.attention_scaled();
        for (std::size_t q = 0; q < expert.arity(); ++q)
          if (att(pred[j], static_cast<Eigen::Index>(q)) >= cfg.attention_threshold) fallback.selected.push_back(q);
        rule = &fallback;
      }
      const auto local = folx::sufficient_explanation(expert, *rule, folx::binarize(c, static_cast<Eigen::Index>(j)));
      for (const auto& l : local.conjunction) (wrong ? wrong_hits : right_hits)[er.vocab.ids[l.index]] += 1;
    }
  }
  d.n_explained = d.n_misclassified + d.n_correct;
  if (d.n_misclassified == 0) {
    throw ConfigError("detect: no expert-covered sample of the " + d.split +
                      " split is misclassified, so there is nothing to explain; detect on a split with a "
                      "stronger distribution shift");
  }

  std::vector<std::size_t> mentions(nc, 0);
  for (const auto& er : d.rules)
    for (const auto& rule : er.rules)
      for (const auto& conj : rule.dnf)
        for (const auto& l : conj) ++mentions[er.vocab.ids[l.index]];

  for (std::size_t j = 0; j < nc; ++j) {
    ConceptScore s;
    s.index = j;
    s.name = j < ds.concept_names.size() ? ds.concept_names[j] : "c" + std::to_string(j);
    s.rule_mentions = mentions[j];
    s.misclassified_frequency = static_cast<double>(wrong_hits[j]) / static_cast<double>(d.n_misclassified);
    s.correct_frequency = d.n_correct ? static_cast<double>(right_hits[j]) / static_cast<double>(d.n_correct) : 0.0;
    // A concept no rule mentions cannot be a shortcut the rules rely on.
    s.score = s.rule_mentions > 0 ? s.misclassified_frequency - s.correct_frequency : 0.0;
    d.ranking.push_back(std::move(s));
  }
  std::stable_sort(d.ranking.begin(), d.ranking.end(), [](const ConceptScore& a, const ConceptScore& b) {
    const bool am = a.rule_mentions > 0, bm = b.rule_mentions > 0;
    if (am != bm) return am;
    return a.score > b.score;
  });
  for (const auto& s : d.ranking)
    if (s.rule_mentions > 0 && s.score > cfg.detect_threshold) d.detected.push_back(s.index);
  for (std::size_t i = 0; d.detected.size() < cfg.min_detected && i < d.ranking.size(); ++i) {
    const auto c = d.ranking[i].index;
    if (std::find(d.detected.begin(), d.detected.end(), c) == d.detected.end()) d.detected.push_back(c);
  }
  return d;
}

nlohmann::json to_json(const Detection& d) {
  nlohmann::json ranking = nlohmann::json::array();
  for (const auto& s : d.ranking) {
    ranking.push_back({{"concept", s.index},
                       {"name", s.name},
                       {"rule_mentions", s.rule_mentions},
                       {"misclassified_frequency", s.misclassified_frequency},
                       {"correct_frequency", s.correct_frequency},
                       {"score", s.score}});
  }
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : d.rules) rules.push_back(to_json(r));
  return {{"split", d.split},         {"n_explained", d.n_explained}, {"n_misclassified", d.n_misclassified},
          {"n_correct", d.n_correct}, {"ranking", ranking},           {"detected", d.detected},
          {"rules", rules}};
}

// ---------------------------------------------------------------- elimination

Elimination eliminate(const models::Blackbox& bb, const std::vector<std::size_t>& detected, const Dataset& ds,
                      const models::BlackboxConfig& cfg, std::uint64_t seed) {
  if (detected.empty()) throw ConfigError("eliminate: no concepts to eliminate");
  for (auto c : detected) {
    if (c >= ds.n_concepts()) {
      throw ConfigError("eliminate: concept " + std::to_string(c) + " is not a column of the dataset");
    }
  }
  std::vector<std::string> names;
  for (auto c : detected) names.push_back(c < ds.concept_names.size() ? ds.concept_names[c] : "c" + std::to_string(c));
  auto res = models::finetune_with_mdn(bb, ds, detected, cfg, seed);
  return {detected, std::move(names), std::move(res.model), std::move(res.history)};
}

namespace {

nlohmann::json to_json(const Elimination& e) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& h : e.history) {
    hist.push_back({{"epoch", h.epoch},
                    {"train_loss", h.train_loss},
                    {"train_accuracy", h.train_accuracy},
                    {"val_accuracy", h.val_accuracy}});
  }
  return {{"concepts", e.concepts},
          {"names", e.names},
          {"mdn_layer", e.blackbox.mdn ? e.blackbox.mdn->layer_index : 0},
          {"fine_tuned", "Phi layers after the MDN site and the head h"},
          {"phi_hash", e.blackbox.phi_hash()},
          {"history", hist}};
}

}  // namespace

// ---------------------------------------------------------------- verification

Verification verify(const CarveState& state, const Dataset& ds, const std::vector<std::size_t>& detected,
                    const models::Projector& before, const ShortcutConfig& cfg) {
  cfg.validate();
  const auto& mdn = state.blackbox.mdn;
  for (auto c : detected) {
    if (!mdn || std::find(mdn->concepts.begin(), mdn->concepts.end(), c) == mdn->concepts.end()) {
      throw StageOrderError("verify: concept " + std::to_string(c) +
                            " has not been eliminated; run the elimination step and carve the fine-tuned "
                            "blackbox before verifying");
    }
  }
  Verification v;
  v.concepts = detected;
  v.rules = extract_rules(state, ds, cfg.attention_threshold, Split::train);
  for (const auto& er : v.rules) {
    std::vector<std::size_t> local;
    for (std::size_t i = 0; i < er.vocab.ids.size(); ++i)
      if (std::find(detected.begin(), detected.end(), er.vocab.ids[i]) != detected.end()) local.push_back(i);
    const auto m = folx::rule_mentions(er.rules, local);
    for (auto n : m.counts) v.mention_count += n;
    for (std::size_t r = 0; r < er.rules.size(); ++r) {
      if (!m.mentioned[r]) continue;
      Violation viol{er.expert, er.rules[r].class_id, {}};
      for (std::size_t q = 0; q < local.size(); ++q) {
        const bool hit = std::any_of(er.rules[r].dnf.begin(), er.rules[r].dnf.end(), [&](const folx::Conjunction& c) {
          return std::any_of(c.begin(), c.end(), [&](const folx::Literal& l) { return l.index == local[q]; });
        });
        if (hit) viol.concepts.push_back(er.vocab.ids[local[q]]);
      }
      v.violations.push_back(std::move(viol));
    }
  }

  for (std::size_t j = 0; j < state.projector.n_concepts(); ++j) {
    ProbeRow row;
    row.index = j;
    row.name = j < state.projector.concept_names.size() ? state.projector.concept_names[j] : "c" + std::to_string(j);
    row.after = state.projector.val_accuracy.at(j);
    row.included_after = state.projector.included.at(j);
    if (j < before.n_concepts()) {
      row.before = before.val_accuracy.at(j);
      row.included_before = before.included.at(j);
    }
    v.probes.push_back(std::move(row));
  }

  const Dataset part = ds.subset(ds.indices(cfg.eval_split));
  if (part.size() == 0) throw ConfigError("verify: split '" + data::to_string(cfg.eval_split) + "' is empty");
  v.blackbox = group_metrics(models::argmax_rows(state.blackbox.logits(part)), part.y, part.group, part.n_groups);
  const auto moie = with_uncovered(carve::moie_predict(state, part, carve::PredictMode::moie));
  std::vector<int> p, y, g;
  for (std::size_t i = 0; i < moie.size(); ++i) {
    if (moie[i] < 0) continue;
    p.push_back(moie[i]);
    y.push_back(part.y[i]);
    g.push_back(part.group[i]);
  }
  v.moie = group_metrics(p, y, g, part.n_groups);
  v.moie_plus_r = group_metrics(with_uncovered(carve::moie_predict(state, part, carve::PredictMode::moie_plus_r)),
                                part.y, part.group, part.n_groups);
  return v;
}

nlohmann::json to_json(const Verification& v) {
  nlohmann::json viol = nlohmann::json::array();
  for (const auto& x : v.violations) viol.push_back({{"expert", x.expert}, {"class", x.class_id}, {"concepts", x.concepts}});
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& r : v.probes) {
    probes.push_back({{"concept", r.index},
                      {"name", r.name},
                      {"before", r.before},
                      {"after", r.after},
                      {"included_before", r.included_before},
                      {"included_after", r.included_after}});
  }
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& r : v.rules) rules.push_back(to_json(r));
  return {{"concepts", v.concepts},        {"clean", v.violations.empty()}, {"violations", viol},
          {"mention_count", v.mention_count}, {"probes", probes},          {"blackbox", to_json(v.blackbox)},
          {"moie", to_json(v.moie)},       {"moie_plus_r", to_json(v.moie_plus_r)}, {"rules", rules}};
}

// ---------------------------------------------------------------- report

std::vector<std::string> ShortcutReport::stages() const {
  std::vector<std::string> s;
  if (detection) s.push_back("detection");
  if (elimination) s.push_back("elimination");
  if (verification) s.push_back("verification");
  return s;
}

std::vector<SummaryRow> ShortcutReport::summary() const {
  std::vector<SummaryRow> rows{{"BB (biased)", biased_blackbox.average, biased_blackbox.worst}};
  if (verification) {
    rows.push_back({"BB w MDN", verification->blackbox.average, verification->blackbox.worst});
    rows.push_back({"MoIE", verification->moie.average, verification->moie.worst});
    rows.push_back({"MoIE+R", verification->moie_plus_r.average, verification->moie_plus_r.worst});
  }
  return rows;
}

nlohmann::json to_json(const ShortcutReport& r) {
  nlohmann::json j;
  j["seed"] = r.seed;
  j["eval_split"] = r.eval_split;
  j["stages"] = r.stages();
  j["biased_blackbox"] = to_json(r.biased_blackbox);
  if (r.biased_carve) j["biased_carve"] = carve::to_json(*r.biased_carve);
  if (r.detection) j["detection"] = to_json(*r.detection);
  if (r.elimination) j["elimination"] = to_json(*r.elimination);
  if (r.robust_carve) j["robust_carve"] = carve::to_json(*r.robust_carve);
  if (r.verification) j["verification"] = to_json(*r.verification);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.summary()) rows.push_back({{"model", s.model}, {"average", s.average}, {"worst", s.worst}});
  j["summary"] = rows;
  return j;
}

namespace {

std::string pct(double v) { return fixed(100.0 * v, 2); }

void group_table(std::ostringstream& os, const std::vector<std::pair<std::string, const GroupMetrics*>>& cols) {
  if (cols.empty()) return;
  os << "| group |";
  for (const auto& [name, _] : cols) os << " " << name << " |";
  os << "\n|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) os << "---:|";
  os << "\n";
  for (std::size_t g = 0; g < cols.front().second->groups.size(); ++g) {
    os << "| " << g << " |";
    for (const auto& [_, m] : cols) os << " " << pct(m->groups[g].accuracy) << " (n=" << m->groups[g].n << ") |";
    os << "\n";
  }
  os << "| average |";
  for (const auto& [_, m] : cols) os << " " << pct(m->average) << " |";
  os << "\n| worst |";
  for (const auto& [_, m] : cols) os << " " << pct(m->worst) << " |";
  os << "\n\n";
}

void rules_block(std::ostringstream& os, const std::vector<ExpertRules>& rules) {
  os << "```\n";
  for (const auto& er : rules) {
    os << "expert_" << er.expert << " (" << er.covered << " train samples)\n";
    for (const auto& r : er.rules) os << "  " << folx::to_text(r, er.vocab) << "\n";
  }
  os << "```\n\n";
}

}  // namespace

std::string to_markdown(const ShortcutReport& r) {
  std::ostringstream os;
  os << "# Shortcut report (seed " << r.seed << ")\n\n";
  os << "Stages completed: ";
  const auto st = r.stages();
  if (st.empty()) os << "none";
  for (std::size_t i = 0; i < st.size(); ++i) os << (i ? ", " : "") << st[i];
  os << "\n\n## Summary (" << r.eval_split << " split, accuracy %)\n\n| model | average | worst group |\n|---|---:|---:|\n";
  for (const auto& s : r.summary()) os << "| " << s.model << " | " << pct(s.average) << " | " << pct(s.worst) << " |\n";
  os << "\n";

  if (r.detection) {
    const auto& d = *r.detection;
    os << "## Detection\n\nLocal explanations of " << d.n_explained << " expert-covered " << d.split << " samples ("
       << d.n_misclassified << " misclassified).\n\n";
    os << "| rank | concept | rule mentions | misclassified | correct | score |\n|---:|---|---:|---:|---:|---:|\n";
    for (std::size_t i = 0; i < d.ranking.size(); ++i) {
      const auto& c = d.ranking[i];
      os << "| " << i + 1 << " | " << c.name << " | " << c.rule_mentions << " | " << fixed(c.misclassified_frequency, 3)
         << " | " << fixed(c.correct_frequency, 3) << " | " << fixed(c.score, 3) << " |\n";
    }
    os << "\nDetected:";
    for (auto c : d.detected) {
      const auto it = std::find_if(d.ranking.begin(), d.ranking.end(), [c](const ConceptScore& s) { return s.index == c; });
      os << " " << (it != d.ranking.end() ? it->name : "c" + std::to_string(c));
    }
    os << "\n\nRules of the biased MoIE:\n\n";
    rules_block(os, d.rules);
  }
  if (r.elimination) {
    const auto& e = *r.elimination;
    os << "## Elimination\n\nMDN on the first hidden layer of Phi with metadata:";
    for (const auto& n : e.names) os << " " << n;
    os << ". Fine-tuned the layers after the MDN site and the head for " << e.history.size() << " epochs";
    if (!e.history.empty()) os << " (final validation accuracy " << pct(e.history.back().val_accuracy) << "%)";
    os << ".\n\n";
  }
  if (r.verification) {
    const auto& v = *r.verification;
    os << "## Verification\n\n";
    if (v.violations.empty()) {
      os << "No rule mentions an eliminated concept.\n\n";
    } else {
      os << v.violations.size() << " rules still mention eliminated concepts (" << v.mention_count << " literals).\n\n";
    }
    os << "### Concept probes (validation accuracy %)\n\n| concept | before | after | included after |\n|---|---:|---:|---|\n";
    for (const auto& p : v.probes) {
      os << "| " << p.name << " | " << pct(p.before) << " | " << pct(p.after) << " | "
         << (p.included_after ? "yes" : "no") << " |\n";
    }
    os << "\n### Group accuracy (%)\n\n";
    group_table(os, {{"BB (biased)", &r.biased_blackbox},
                     {"BB w MDN", &v.blackbox},
                     {"MoIE", &v.moie},
                     {"MoIE+R", &v.moie_plus_r}});
    os << "Rules of the robust MoIE:\n\n";
    rules_block(os, v.rules);
  } else {
    os << "### Group accuracy (%)\n\n";
    group_table(os, {{"BB (biased)", &r.biased_blackbox}});
  }
  if (r.biased_carve) os << "## Biased carving\n\n" << carve::to_markdown(*r.biased_carve) << "\n";
  if (r.robust_carve) os << "## Robust carving\n\n" << carve::to_markdown(*r.robust_carve) << "\n";
  return os.str();
}

namespace {

struct Stat {
  double mean = 0.0;
  double std = 0.0;
};

Stat stat(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  return s;
}

// Models present in every report, in summary order.
std::vector<std::string> common_models(const std::vector<ShortcutReport>& reports) {
  std::vector<std::string> out;
  if (reports.empty()) return out;
  for (const auto& row : reports.front().summary()) {
    const bool everywhere = std::all_of(reports.begin(), reports.end(), [&](const ShortcutReport& r) {
      const auto s = r.summary();
      return std::any_of(s.begin(), s.end(), [&](const SummaryRow& x) { return x.model == row.model; });
    });
    if (everywhere) out.push_back(row.model);
  }
  return out;
}

SummaryRow find_row(const ShortcutReport& r, const std::string& model) {
  for (const auto& s : r.summary())
    if (s.model == model) return s;
  return {};
}

}  // namespace

nlohmann::json seeds_summary(const std::vector<ShortcutReport>& reports) {
  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : r.summary()) rows.push_back({{"model", s.model}, {"average", s.average}, {"worst", s.worst}});
    per_seed.push_back({{"seed", r.seed}, {"rows", rows}});
  }
  nlohmann::json agg = nlohmann::json::array();
  for (const auto& m : common_models(reports)) {
    std::vector<double> avg, worst;
    for (const auto& r : reports) {
      const auto row = find_row(r, m);
      avg.push_back(row.average);
      worst.push_back(row.worst);
    }
    const Stat a = stat(avg), w = stat(worst);
    agg.push_back({{"model", m}, {"average_mean", a.mean}, {"average_std", a.std}, {"worst_mean", w.mean}, {"worst_std", w.std}});
  }
  return {{"per_seed", per_seed}, {"mean_std", agg}};
}

std::string seeds_markdown(const std::vector<ShortcutReport>& reports) {
  std::ostringstream os;
  os << "| seed | model | average % | worst group % |\n|---:|---|---:|---:|\n";
  for (const auto& r : reports)
    for (const auto& s : r.summary()) os << "| " << r.seed << " | " << s.model << " | " << pct(s.average) << " | " << pct(s.worst) << " |\n";
  os << "\n| model | average % (mean ± std) | worst group % (mean ± std) |\n|---|---:|---:|\n";
  for (const auto& m : common_models(reports)) {
    std::vector<double> avg, worst;
    for (const auto& r : reports) {
      const auto row = find_row(r, m);
      avg.push_back(row.average);
      worst.push_back(row.worst);
    }
    const Stat a = stat(avg), w = stat(worst);
    os << "| " << m << " | " << pct(a.mean) << " ± " << pct(a.std) << " | " << pct(w.mean) << " ± " << pct(w.std) << " |\n";
  }
  return os.str();
}

// ---------------------------------------------------------------- pipeline

ShortcutReport run_pipeline(const Dataset& ds, const PipelineConfig& cfg, std::uint64_t seed,
                            const std::function<void(const ShortcutReport&)>& on_stage, PipelineArtifacts* artifacts) {
  cfg.shortcut.validate();
  const auto notify = [&](const ShortcutReport& r) {
    if (on_stage) on_stage(r);
  };
  ShortcutReport rep;
  rep.seed = seed;
  rep.eval_split = data::to_string(cfg.shortcut.eval_split);
  const Dataset part = ds.subset(ds.indices(cfg.shortcut.eval_split));
  if (part.size() == 0) throw ConfigError("shortcut: evaluation split '" + rep.eval_split + "' is empty");

  const models::Blackbox bb = models::train_blackbox(ds, cfg.blackbox, seed).model;
  rep.biased_blackbox = group_metrics(models::argmax_rows(bb.logits(part)), part.y, part.group, part.n_groups);
  carve::CarveConfig ccfg = cfg.carve;
  ccfg.seed = seed;
  CarveState biased = carve::run_carving(bb, ds, ccfg);
  rep.biased_carve = carve::evaluate(biased, ds, cfg.shortcut.eval_split);
  if (artifacts) {
    artifacts->biased_blackbox = bb.clone();
    artifacts->biased = biased;
  }
  notify(rep);

  rep.detection = detect(biased, ds, cfg.shortcut);
  notify(rep);

  const CarveState* robust = &biased;
  CarveState fresh;
  if (!cfg.skip_eliminate) {
    rep.elimination = eliminate(bb, rep.detection->detected, ds, cfg.blackbox, seed);
    notify(rep);
    fresh = carve::run_carving(rep.elimination->blackbox, ds, ccfg);
    rep.robust_carve = carve::evaluate(fresh, ds, cfg.shortcut.eval_split);
    if (artifacts) artifacts->robust = fresh;
    robust = &fresh;
  }
  rep.verification = verify(*robust, ds, rep.detection->detected, biased.projector, cfg.shortcut);
  notify(rep);
  return rep;
}

}  // namespace moie::shortcut
