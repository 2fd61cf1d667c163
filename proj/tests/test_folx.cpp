#include <algorithm>
#include <set>
#include <vector>

#include "doctest.h"
#include "moie/errors.hpp"
#include "moie/folx/folx.hpp"
#include "moie/models/blackbox.hpp"

using namespace moie;
using namespace moie::folx;
using diff::Activation;
using diff::Layer;
using diff::Tensor;

namespace {

Matrix rows_of(std::initializer_list<std::initializer_list<double>> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(v.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : v) {
    Eigen::Index j = 0;
    for (double x : r) m(i, j++) = x;
    ++i;
  }
  return m;
}

// Attention on the `focus` concepts only; every other concept is damped to ~1e-9.
Tensor focused_gamma(std::size_t n_classes, std::size_t n_concepts, const std::vector<std::size_t>& focus) {
  Matrix g = Matrix::Constant(static_cast<Eigen::Index>(n_classes), static_cast<Eigen::Index>(n_concepts), -15.0);
  for (auto j : focus) g.col(static_cast<Eigen::Index>(j)).setZero();
  return Tensor::parameter(g);
}

Layer dense(Matrix w, Matrix b, Activation a) { return {Tensor::parameter(std::move(w)), Tensor::parameter(std::move(b)), a}; }

// Class 1 iff c0, over four concepts.
models::EntropyExpert c0_expert(const std::vector<std::size_t>& focus = {0}) {
  models::EntropyExpert ex;
  ex.gamma = focused_gamma(2, 4, focus);
  ex.temperature = 0.7;
  Matrix w = Matrix::Zero(2, 4);
  w(0, 0) = -2.0;
  w(1, 0) = 2.0;
  ex.trunk = diff::Mlp({dense(w, rows_of({{1.0, -1.0}}), Activation::identity)});
  return ex;
}

// Class 1 iff c0 xor c1, over four concepts.
models::EntropyExpert xor_expert() {
  models::EntropyExpert ex;
  ex.gamma = focused_gamma(2, 4, {0, 1});
  ex.temperature = 0.7;
  const Matrix w0 = rows_of({{1, -1, 0, 0}, {-1, 1, 0, 0}});
  const Matrix w1 = rows_of({{-1, -1}, {1, 1}});
  ex.trunk = diff::Mlp({dense(w0, Matrix::Zero(1, 2), Activation::relu),
                        dense(w1, rows_of({{0.5, -0.5}}), Activation::identity)});
  return ex;
}

Matrix all_patterns(std::size_t n) {
  Matrix m(static_cast<Eigen::Index>(1U << n), static_cast<Eigen::Index>(n));
  for (std::size_t p = 0; p < (1U << n); ++p)
    for (std::size_t j = 0; j < n; ++j) m(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j)) = (p >> j) & 1U;
  return m;
}

std::vector<bool> bits_of(std::size_t p, std::size_t n) {
  std::vector<bool> c(n);
  for (std::size_t j = 0; j < n; ++j) c[j] = (p >> j) & 1U;
  return c;
}

// Independent evaluator: a literal holds when the bit differs from `negated`.
bool eval_dnf(const Dnf& dnf, std::size_t p) {
  return std::any_of(dnf.begin(), dnf.end(), [&](const Conjunction& conj) {
    return std::all_of(conj.begin(), conj.end(), [&](const Literal& l) { return (((p >> l.index) & 1U) != 0) != l.negated; });
  });
}

Dnf random_dnf(Rng& rng, std::size_t n_vars) {
  Dnf dnf(1 + rng() % 8);
  for (auto& conj : dnf) {
    for (std::size_t j = 0; j < n_vars; ++j) {
      const auto r = rng() % 3;
      if (r < 2) conj.push_back({j, r == 1});
    }
  }
  return dnf;
}

FOLRule make_rule(int cls, Dnf dnf) {
  FOLRule r;
  r.class_id = cls;
  r.dnf = std::move(dnf);
  return r;
}

}  // namespace

// ---------------------------------------------------------------- extraction

TEST_CASE("extract_fol: single-concept expert gives the single literal") {
  const auto ex = c0_expert();
  const auto rules = extract_fol(ex, all_patterns(4), 0.5);
  REQUIRE(rules.size() == 2);
  CHECK(rules[0].class_id == 0);
  CHECK(rules[0].selected == std::vector<std::size_t>{0});
  CHECK(rules[0].dnf == Dnf{{{0, true}}});
  CHECK(rules[1].dnf == Dnf{{{0, false}}});
  for (const auto& r : rules) {
    CHECK(r.fidelity == 1.0);
    CHECK(r.support == 8);
  }
}

TEST_CASE("extract_fol: xor expert gives both mixed terms") {
  const auto rules = extract_fol(xor_expert(), all_patterns(4), 0.5);
  REQUIRE(rules.size() == 2);
  CHECK(rules[1].dnf == Dnf{{{0, false}, {1, true}}, {{0, true}, {1, false}}});
  CHECK(rules[0].dnf == Dnf{{{0, false}, {1, false}}, {{0, true}, {1, true}}});
}

TEST_CASE("extract_fol: a selected concept that never varies stays in every conjunction") {
  const auto ex = c0_expert({0, 3});
  Matrix samples = all_patterns(4);
  samples.col(3).setOnes();
  const auto rules = extract_fol(ex, samples, 0.5);
  REQUIRE(rules.size() == 2);
  for (const auto& r : rules) {
    REQUIRE_FALSE(r.dnf.empty());
    for (const auto& conj : r.dnf)
      CHECK(std::find(conj.begin(), conj.end(), Literal{3, false}) != conj.end());
  }
}

TEST_CASE("extract_fol: only predicted classes get rules; empty threshold set warns") {
  const auto ex = c0_expert();
  const auto rules = extract_fol(ex, rows_of({{1, 0, 0, 0}, {1, 1, 0, 0}}), 0.5);
  REQUIRE(rules.size() == 1);
  CHECK(rules[0].class_id == 1);
  CHECK(find_rule(rules, 0) == nullptr);
  CHECK(find_rule(rules, 1) == &rules[0]);

  const auto none = extract_fol(ex, all_patterns(4), 1.1);
  for (const auto& r : none) {
    CHECK(r.no_selected_concepts);
    CHECK(r.dnf.empty());
    CHECK(r.support == 0);
  }
  CHECK_THROWS_AS(extract_fol(ex, Matrix(0, 4), 0.5), ConfigError);
  CHECK_THROWS_AS(extract_fol(ex, Matrix::Zero(2, 3), 0.5), ShapeError);
}

TEST_CASE("extract_fol: sound on covered samples and monotone in the threshold") {
  Rng rng(11);
  for (int t = 0; t < 10; ++t) {
    const auto ex = models::EntropyExpert::create(7, 3, {8}, 0.7, rng);
    Matrix covered(60, 7);
    for (Eigen::Index i = 0; i < covered.rows(); ++i)
      for (Eigen::Index j = 0; j < covered.cols(); ++j) covered(i, j) = uniform01(rng);
    const auto pred = models::argmax_rows(models::entropy_infer(ex, covered));

    const auto rules = extract_fol(ex, covered, 0.3);
    for (Eigen::Index i = 0; i < covered.rows(); ++i) {
      const FOLRule* r = find_rule(rules, pred[static_cast<std::size_t>(i)]);
      REQUIRE(r != nullptr);
      if (!r->no_selected_concepts) CHECK(rule_eval(*r, binarize(covered, i)));
    }

    std::vector<std::vector<std::size_t>> prev;
    std::set<std::size_t> prev_mentioned;
    for (double th : {0.1, 0.3, 0.5, 0.7, 0.9, 1.0}) {
      const auto rs = extract_fol(ex, covered, th);
      std::vector<std::vector<std::size_t>> sel;
      for (const auto& r : rs) sel.push_back(r.selected);
      // Mentioned concepts never leave the selected set.
      for (const auto& r : rs)
        for (const auto& conj : r.dnf)
          for (const auto& l : conj) CHECK(std::binary_search(r.selected.begin(), r.selected.end(), l.index));
      if (!prev.empty()) {
        for (std::size_t y = 0; y < sel.size(); ++y)
          CHECK(std::includes(prev[y].begin(), prev[y].end(), sel[y].begin(), sel[y].end()));
      }
      prev = sel;
      std::set<std::size_t> mentioned;
      for (std::size_t j = 0; j < 7; ++j)
        if (rule_mentions(rs, {j}).any()) mentioned.insert(j);
      if (th > 0.1)
        CHECK(std::includes(prev_mentioned.begin(), prev_mentioned.end(), mentioned.begin(), mentioned.end()));
      prev_mentioned = mentioned;
    }
  }
}

TEST_CASE("extract_fol: simplified and verbatim rules agree on every pattern") {
  Rng rng(12);
  const auto ex = models::EntropyExpert::create(5, 2, {6}, 0.7, rng);
  const Matrix covered = all_patterns(5);
  const auto a = extract_fol(ex, covered, 0.0, true);
  const auto b = extract_fol(ex, covered, 0.0, false);
  REQUIRE(a.size() == b.size());
  for (std::size_t y = 0; y < a.size(); ++y) {
    CHECK(a[y].dnf.size() <= b[y].dnf.size());
    for (std::size_t p = 0; p < 32; ++p) CHECK(eval_dnf(a[y].dnf, p) == eval_dnf(b[y].dnf, p));
    CHECK(a[y].fidelity == b[y].fidelity);
  }
}

// ---------------------------------------------------------------- simplify

TEST_CASE("simplify: examples") {
  CHECK(simplify({{{0, false}, {1, false}}, {{0, false}, {1, true}}}) == Dnf{{{0, false}}});
  CHECK(simplify({{{0, false}}, {{0, false}, {1, false}}}) == Dnf{{{0, false}}});
  CHECK(simplify({{{2, true}}, {{2, true}}}) == Dnf{{{2, true}}});
  CHECK(simplify({{{0, false}}, {{0, true}}}) == Dnf{Conjunction{}});
  CHECK(simplify({}).empty());
}

bool emitted_order(const Dnf& d) {
  return std::is_sorted(d.begin(), d.end(), [](const Conjunction& a, const Conjunction& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
}

TEST_CASE("simplify: truth table preserved on arbitrary dnfs") {
  Rng rng(13);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + rng() % 12;
    const Dnf in = random_dnf(rng, n);
    const Dnf out = simplify(in);
    for (std::size_t p = 0; p < (std::size_t{1} << n); ++p) REQUIRE(eval_dnf(in, p) == eval_dnf(out, p));
    CHECK(emitted_order(out));
    CHECK(std::set<Conjunction>(out.begin(), out.end()).size() == out.size());
    CHECK(out.size() <= in.size());
    for (std::size_t a = 0; a < out.size(); ++a)
      for (std::size_t b = 0; b < out.size(); ++b)
        if (a != b) CHECK_FALSE(std::includes(out[b].begin(), out[b].end(), out[a].begin(), out[a].end()));
  }
}

TEST_CASE("simplify: collected patterns reduce to the prime implicants") {
  Rng rng(15);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng() % 7;
    const std::size_t total = std::size_t{1} << n;
    // Full patterns over n concepts, as rule extraction collects them.
    Dnf in;
    for (std::size_t p = 0; p < total; ++p) {
      if (rng() % 2) continue;
      Conjunction conj;
      for (std::size_t j = 0; j < n; ++j) conj.push_back({j, ((p >> j) & 1U) == 0});
      in.push_back(conj);
    }
    const Dnf out = simplify(in);
    for (std::size_t p = 0; p < total; ++p) REQUIRE(eval_dnf(in, p) == eval_dnf(out, p));

    // Oracle: every implicant that stops being one when any literal is dropped.
    std::set<Conjunction> primes;
    std::size_t codes = 1;
    for (std::size_t j = 0; j < n; ++j) codes *= 3;
    for (std::size_t code = 0; code < codes; ++code) {
      Conjunction conj;
      for (std::size_t j = 0, c = code; j < n; ++j, c /= 3)
        if (c % 3 != 2) conj.push_back({j, c % 3 == 0});
      auto implicant = [&](const Conjunction& k) {
        for (std::size_t p = 0; p < total; ++p)
          if (eval_dnf({k}, p) && !eval_dnf(in, p)) return false;
        return true;
      };
      if (in.empty() || !implicant(conj)) continue;
      bool prime = true;
      for (std::size_t d = 0; d < conj.size() && prime; ++d) {
        Conjunction wider = conj;
        wider.erase(wider.begin() + static_cast<std::ptrdiff_t>(d));
        prime = !implicant(wider);
      }
      if (prime) primes.insert(conj);
    }
    CHECK(std::set<Conjunction>(out.begin(), out.end()) == primes);
  }
}

// ---------------------------------------------------------------- evaluation

TEST_CASE("rule_eval: semantics") {
  const auto r = make_rule(1, {{{0, false}, {1, true}}, {{2, false}}});
  CHECK(rule_eval(r, {true, false, false}));
  CHECK(rule_eval(r, {false, true, true}));
  CHECK_FALSE(rule_eval(r, {true, true, false}));
  CHECK_FALSE(rule_eval(make_rule(0, {}), {true, false}));
  CHECK(rule_eval(make_rule(0, {Conjunction{}}), {false}));
  CHECK_THROWS_AS(rule_eval(make_rule(0, {{{5, false}}}), {true}), ShapeError);
}

TEST_CASE("fidelity: counting oracle") {
  const auto ex = c0_expert();
  const Matrix samples = all_patterns(4);
  const auto pred = models::argmax_rows(models::entropy_infer(ex, samples));
  const auto self = extract_fol(ex, samples, 0.5);
  CHECK(fidelity(self, ex, samples) == 1.0);
  CHECK(fidelity({}, ex, samples) == 0.0);

  // Class 1 explained by c0 & c1 only; class 0 has no rule.
  const std::vector<FOLRule> partial{make_rule(1, {{{0, false}, {1, false}}})};
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < samples.rows(); ++i)
    hits += pred[static_cast<std::size_t>(i)] == 1 && samples(i, 0) > 0.5 && samples(i, 1) > 0.5;
  CHECK(fidelity(partial, ex, samples) == doctest::Approx(static_cast<double>(hits) / 16.0));
  CHECK_THROWS_AS(fidelity(self, ex, Matrix(0, 4)), ConfigError);
}

TEST_CASE("rule_mentions: counts literals per queried concept") {
  const std::vector<FOLRule> rules{make_rule(1, {{{0, false}, {5, true}}}), make_rule(0, {{{1, false}}})};
  const auto m = rule_mentions(rules, {5});
  CHECK(m.any());
  CHECK(m.mentioned == std::vector<bool>{true, false});
  CHECK(m.counts == std::vector<std::size_t>{1});
  CHECK(m.classes == std::vector<int>{1, 0});
  CHECK_FALSE(rule_mentions(rules, {7}).any());
}

// ---------------------------------------------------------------- local explanations

TEST_CASE("local_explanation: shortest holding conjunction or own pattern") {
  FOLRule r = make_rule(1, {{{0, false}, {1, false}}, {{2, false}}});
  r.selected = {0, 1, 2};
  auto e = local_explanation(r, {true, true, true});
  CHECK(e.matched);
  CHECK(e.conjunction == Conjunction{{2, false}});
  e = local_explanation(r, {false, true, false});
  CHECK_FALSE(e.matched);
  CHECK(e.conjunction == Conjunction{{0, true}, {1, false}, {2, true}});
}

TEST_CASE("sufficient_explanation: hand-set experts") {
  const auto c0 = c0_expert({0, 1});
  FOLRule r1 = make_rule(1, {});
  r1.selected = {0, 1};
  auto e = sufficient_explanation(c0, r1, {true, false, true, false});
  CHECK(e.matched);
  CHECK(e.conjunction == Conjunction{{0, false}});
  e = sufficient_explanation(c0, r1, {false, false, false, false});
  CHECK_FALSE(e.matched);
  CHECK(e.conjunction == Conjunction{{0, true}, {1, true}});

  FOLRule x1 = make_rule(1, {});
  x1.selected = {0, 1};
  e = sufficient_explanation(xor_expert(), x1, {true, false, false, false});
  CHECK(e.conjunction == Conjunction{{0, false}, {1, true}});

  FOLRule big = make_rule(0, {});
  for (std::size_t j = 0; j < 17; ++j) big.selected.push_back(j);
  CHECK_THROWS_AS(sufficient_explanation(c0, big, std::vector<bool>(4)), ConfigError);
  CHECK_THROWS_AS(sufficient_explanation(c0, r1, std::vector<bool>(3)), ShapeError);
}

TEST_CASE("sufficient_explanation: brute-force oracle") {
  Rng rng(14);
  for (int t = 0; t < 40; ++t) {
    const std::size_t n = 6;
    const auto ex = models::EntropyExpert::create(n, 2, {5}, 0.7, rng);
    FOLRule rule;
    rule.class_id = static_cast<int>(rng() % 2);
    for (std::size_t j = 0; j < n; ++j)
      if (rng() % 3 != 0) rule.selected.push_back(j);
    const std::size_t m = rule.selected.size();
    const auto c = bits_of(rng() % (1U << n), n);

    auto predicts = [&](const std::vector<bool>& v) {
      Matrix row(1, static_cast<Eigen::Index>(n));
      for (std::size_t j = 0; j < n; ++j) row(0, static_cast<Eigen::Index>(j)) = v[j];
      return models::argmax_rows(models::entropy_infer(ex, row))[0] == rule.class_id;
    };
    // A subset (mask over selected positions) forces the class if every
    // completion of the remaining selected concepts predicts it.
    auto forces = [&](std::size_t mask) {
      for (std::size_t p = 0; p < (1U << m); ++p) {
        auto v = c;
        for (std::size_t b = 0; b < m; ++b)
          if (!((mask >> b) & 1U)) v[rule.selected[b]] = (p >> b) & 1U;
        if (!predicts(v)) return false;
      }
      return true;
    };
    int best = -1;
    std::set<std::size_t> used;
    for (int size = 0; size <= static_cast<int>(m) && best < 0; ++size) {
      for (std::size_t mask = 0; mask < (1U << m); ++mask) {
        if (std::popcount(mask) != size || !forces(mask)) continue;
        best = size;
        for (std::size_t b = 0; b < m; ++b)
          if ((mask >> b) & 1U) used.insert(rule.selected[b]);
      }
    }
    if (best < 0) used.insert(rule.selected.begin(), rule.selected.end());

    const auto e = sufficient_explanation(ex, rule, c);
    CHECK(e.matched == (best >= 0));
    Conjunction expect;
    for (auto j : used) expect.push_back({j, !c[j]});
    CHECK(e.conjunction == expect);
  }
}

// ---------------------------------------------------------------- rendering

TEST_CASE("to_text and to_json use dataset names") {
  Vocabulary v{{3, 9}, {"core_3", "background_1"}};
  FOLRule r = make_rule(1, {{{0, false}, {1, true}}});
  r.selected = {0, 1};
  const auto text = to_text(r, v);
  CHECK(text.find("core_3") != std::string::npos);
  CHECK(text.find("background_1") != std::string::npos);
  const auto j = to_json(r, v);
  CHECK(j.dump().find("background_1") != std::string::npos);
}
