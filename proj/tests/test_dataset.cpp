#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "moie/data/dataset.hpp"
#include "moie/errors.hpp"
#include "moie/util.hpp"

using namespace moie;
using namespace moie::data;

namespace {

ShortcutSpec small_spec(std::size_t n = 2000, double rho = 0.95) {
  ShortcutSpec s;
  s.n_samples = n;
  s.train_correlation = rho;
  s.seed = 3;
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("moie_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("generate: correlation endpoints") {
  SUBCASE("rho = 1 makes the spurious column equal the label on train") {
    const auto g = generate(small_spec(2000, 1.0));
    const auto s = static_cast<Eigen::Index>(g.data.n_concepts() - 2);
    for (auto i : g.data.indices(Split::train)) {
      CHECK(g.data.C(static_cast<Eigen::Index>(i), s) == g.data.y[i]);
      CHECK(g.data.C(static_cast<Eigen::Index>(i), s + 1) == 1 - g.data.y[i]);
    }
  }
  SUBCASE("spurious concepts share one background factor") {
    const auto g = generate(small_spec(2000, 0.8));
    const auto s = static_cast<Eigen::Index>(g.data.n_concepts() - 2);
    for (Eigen::Index i = 0; i < g.data.C.rows(); ++i) CHECK(g.data.C(i, s) + g.data.C(i, s + 1) == 1.0);
  }
  SUBCASE("rho = 0.5 on test concentrates around one half") {
    // Binomial(~2000, 0.5): 0.02 is > 4 standard deviations.
    auto spec = small_spec(10000, 0.95);
    const auto g = generate(spec);
    const auto s = static_cast<Eigen::Index>(spec.n_core_concepts);
    const auto test = g.data.indices(Split::test);
    double agree = 0;
    for (auto i : test) agree += g.data.C(static_cast<Eigen::Index>(i), s) == g.data.y[i];
    const double p = agree / static_cast<double>(test.size());
    CHECK(p >= 0.48);
    CHECK(p <= 0.52);
  }
}

TEST_CASE("generate: noise-free features are reproducible from concepts") {
  auto spec = small_spec(500);
  spec.noise_std = 0.0;
  const auto g = generate(spec);
  Matrix aug(g.data.C.rows(), g.data.C.cols() + 1);
  aug << g.data.C, Matrix::Ones(g.data.C.rows(), 1);
  CHECK(((aug * g.info.mixing.transpose()) - g.data.X).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("generate: deterministic per seed and sensitive to it") {
  const auto a = generate(small_spec(300));
  const auto b = generate(small_spec(300));
  CHECK(to_csv(a.data) == to_csv(b.data));
  auto other = small_spec(300);
  other.seed = 4;
  CHECK(to_csv(generate(other).data) != to_csv(a.data));
}

TEST_CASE("generate: split tags and group structure") {
  const auto g = generate(small_spec(1000));
  CHECK(g.data.indices(Split::train).size() == 700);
  CHECK(g.data.indices(Split::val).size() == 100);
  CHECK(g.data.indices(Split::test).size() == 200);
  CHECK(g.data.n_groups == 4);
  const auto counts = group_split_counts(g.data);
  for (std::size_t grp = 0; grp < 4; ++grp) CHECK(counts[grp][2] > 0);
  CHECK(g.info.spurious_mask == std::vector<bool>{false, false, false, false, false, false, false, false, true, true});
}

TEST_CASE("generate: the label rule is a perfect classifier on every group") {
  // Bayes accuracy does not depend on the spurious correlation.
  for (double rho : {0.5, 0.95, 1.0}) {
    const auto g = generate(small_spec(3000, rho));
    std::vector<double> correct(4, 0.0), total(4, 0.0);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      std::vector<int> core(8);
      for (int j = 0; j < 8; ++j) core[j] = static_cast<int>(g.data.C(static_cast<Eigen::Index>(i), j));
      const auto grp = static_cast<std::size_t>(g.data.group[i]);
      correct[grp] += apply_label_rule(g.info.spec, core) == g.data.y[i];
      total[grp] += 1;
    }
    for (std::size_t grp = 0; grp < 4; ++grp) {
      if (total[grp] > 0) CHECK(correct[grp] / total[grp] == 1.0);
    }
  }
}

TEST_CASE("generate: concepts are linearly identifiable from features") {
  auto spec = small_spec(4000);
  spec.noise_std = 0.1;
  const auto g = generate(spec);
  const Dataset tr = g.data.split_view(Split::train);
  const Dataset va = g.data.split_view(Split::val);
  const auto design = [](const Matrix& x) {
    Matrix a(x.rows(), x.cols() + 1);
    a << x, Matrix::Ones(x.rows(), 1);
    return a;
  };
  const Matrix a_tr = design(tr.X);
  const Matrix a_va = design(va.X);
  for (Eigen::Index k = 0; k < tr.C.cols(); ++k) {
    const Eigen::VectorXd target = tr.C.col(k);
    const Eigen::VectorXd w = a_tr.colPivHouseholderQr().solve(target);
    const Eigen::VectorXd pred = a_va * w;
    double ok = 0;
    for (Eigen::Index i = 0; i < pred.size(); ++i) ok += (pred(i) >= 0.5) == (va.C(i, k) == 1.0);
    CHECK(ok / static_cast<double>(pred.size()) >= 0.95);
  }
}

TEST_CASE("generate: invalid specs are rejected") {
  auto s = small_spec();
  s.label_rule = "table";
  s.truth_table.assign(256, 1);
  CHECK_THROWS_AS(generate(s), ConfigError);  // constant rule
  s = small_spec();
  s.train_correlation = 0.4;
  CHECK_THROWS_AS(generate(s), ConfigError);
  s = small_spec();
  s.feature_dim = 5;
  CHECK_THROWS_AS(generate(s), ConfigError);
  s = small_spec();
  s.label_rule = "nonsense";
  CHECK_THROWS_AS(generate(s), ConfigError);
}

TEST_CASE("split_dataset: exact proportions and determinism") {
  Dataset ds;
  ds.n_classes = 2;
  ds.n_groups = 1;
  ds.X = Matrix::Zero(8, 1);
  ds.C = Matrix::Zero(8, 1);
  ds.y.assign(8, 0);
  ds.group.assign(8, 0);
  ds.split.assign(8, Split::train);
  const auto counts = [](const Dataset& d) {
    return std::array<std::size_t, 3>{d.indices(Split::train).size(), d.indices(Split::val).size(),
                                      d.indices(Split::test).size()};
  };
  CHECK(counts(split_dataset(ds, {0.5, 0.25, 0.25}, 1)) == std::array<std::size_t, 3>{4, 2, 2});
  CHECK(split_dataset(ds, {0.5, 0.25, 0.25}, 1).split == split_dataset(ds, {0.5, 0.25, 0.25}, 1).split);

  Dataset ten = ds.subset({0, 1, 2, 3, 4, 5, 6, 7, 0, 1});
  CHECK(counts(split_dataset(ten, {0.7, 0.1, 0.2}, 5)) == std::array<std::size_t, 3>{7, 1, 2});

  CHECK_THROWS_AS(split_dataset(ds.subset({0, 1}), {0.5, 0.25, 0.25}, 1), ConfigError);
  CHECK_THROWS_AS(split_dataset(ds, {0.5, 0.5, 0.0}, 1), ConfigError);
}

TEST_CASE("split_dataset: per-group deviation from proportionality is at most one") {
  const auto g = generate(small_spec(997));
  const std::array<double, 3> f{0.6, 0.15, 0.25};
  const auto out = split_dataset(g.data, f, 9);
  const auto counts = group_split_counts(out);
  for (const auto& c : counts) {
    const double n = static_cast<double>(c[0] + c[1] + c[2]);
    for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(static_cast<double>(c[k]) - f[k] * n) <= 1.0);
  }
}

TEST_CASE("csv: round trip, validation and degenerate input") {
  const auto dir = temp_dir("csv");
  const auto g = generate(small_spec(200));
  const auto path = dir / "data.csv";
  save_csv(g.data, path);
  save_sidecar(g.info, sidecar_path(path));

  SUBCASE("round trip") {
    const Dataset back = load_csv(path);
    CHECK(back.X == g.data.X);  // shortest round-trip formatting is exact
    CHECK(back.C == g.data.C);
    CHECK(back.y == g.data.y);
    CHECK(back.group == g.data.group);
    CHECK(back.split == g.data.split);
    CHECK(back.concept_names == g.data.concept_names);
  }
  SUBCASE("missing concept column is named") {
    Dataset cut = g.data;
    cut.C = g.data.C.leftCols(9);
    const auto bad = dir / "cut.csv";
    save_csv(cut, bad);
    save_sidecar(g.info, sidecar_path(bad));
    try {
      load_csv(bad);
      FAIL("expected error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("c9") != std::string::npos);
      CHECK(std::string(e.what()).find("background_1") != std::string::npos);
    }
  }
  SUBCASE("row arity mismatch reports the line") {
    std::string text = to_csv(g.data.subset({0, 1, 2}));
    text += "1,2,3\n";
    try {
      parse_csv(text);
      FAIL("expected error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).rfind("line 5", 0) == 0);
    }
  }
  SUBCASE("malformed header") {
    CHECK_THROWS_AS(parse_csv("x0,c0,label,g,split\n"), ConfigError);
  }
  SUBCASE("empty dataset") {
    const Dataset empty = g.data.subset({});
    const auto p = dir / "empty.csv";
    save_csv(empty, p);
    CHECK(read_file(p).find('\n') == read_file(p).size() - 1);  // header only
    CHECK(load_csv(p).size() == 0);
  }
}

TEST_CASE("sidecar: spec round trip and unknown fields") {
  const auto g = generate(small_spec(50));
  const DatasetInfo back = info_from_json(nlohmann::json::parse(to_json(g.info).dump()));
  CHECK(back.mixing == g.info.mixing);
  CHECK(back.spurious_mask == g.info.spurious_mask);
  nlohmann::json spec = nlohmann::json::object();
  spec["n_sample"] = 10;
  ShortcutSpec s;
  CHECK_THROWS_AS(from_json(spec, s), ConfigError);
}
