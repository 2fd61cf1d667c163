#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "moie/carve/carve.hpp"
#include "moie/diff/ops.hpp"
#include "moie/errors.hpp"

using namespace moie;
using namespace moie::carve;

namespace {

data::ShortcutSpec small_spec(std::uint64_t seed = 0, double rho = 0.95) {
  data::ShortcutSpec s;
  s.n_samples = 2500;
  s.train_correlation = rho;
  s.seed = seed;
  return s;
}

CarveConfig fast_config(std::uint64_t seed = 0) {
  CarveConfig c;
  c.epochs_expert = 6;
  c.epochs_residual = 2;
  c.seed = seed;
  return c;
}

struct Fixture {
  data::Dataset ds;
  models::Blackbox bb;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    out.ds = data::generate(small_spec()).data;
    out.bb = models::train_blackbox(out.ds, {}, 0).model;
    return out;
  }();
  return f;
}

// Independent reference for the product form.
double weight_oracle(const std::vector<double>& pis, std::size_t k) {
  double w = pis[k - 1];
  for (std::size_t i = 0; i + 1 < k; ++i) w *= 1.0 - pis[i];
  return w;
}

}  // namespace

// ---------------------------------------------------------------- primitives

TEST_CASE("cumulative_weight: examples and errors") {
  CHECK(cumulative_weight({0.8}, 1) == 0.8);
  CHECK(cumulative_weight({0.3, 0.8}, 2) == doctest::Approx(0.56).epsilon(1e-15));
  CHECK(cumulative_weight({0.2, 1.0, 0.7}, 3) == 0.0);
  CHECK_THROWS_AS(cumulative_weight({0.3, 1.2}, 2), ConfigError);
  CHECK_THROWS_AS(cumulative_weight({-0.1}, 1), ConfigError);
  CHECK_THROWS_AS(cumulative_weight({0.3}, 2), ConfigError);
  CHECK_THROWS_AS(cumulative_weight({0.3}, 0), ConfigError);
}

TEST_CASE("cumulative_weight: telescoping to one") {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t K = 1 + rng() % 6;
    std::vector<double> pis(K);
    for (auto& p : pis) p = uniform01(rng);
    if (t % 10 == 0) pis[rng() % K] = rng() % 2 ? 0.0 : 1.0;
    double total = 0.0, rest = 1.0;
    for (std::size_t k = 1; k <= K; ++k) {
      const double w = cumulative_weight(pis, k);
      CHECK(std::abs(w - weight_oracle(pis, k)) < 1e-15);
      total += w;
      rest *= 1.0 - pis[k - 1];
    }
    CHECK(std::abs(total + rest - 1.0) < 1e-12);
  }
}

TEST_CASE("cumulative_weight: tracked form only differentiates the current selector") {
  const Tensor pi = Tensor::parameter(Matrix::Constant(3, 1, 0.6));
  Matrix prev(3, 1);
  prev << 0.5, 1.0, 0.0;
  const Tensor w = cumulative_weight(pi, prev);
  CHECK(w.value()(0, 0) == doctest::Approx(0.3));
  CHECK(w.value()(2, 0) == 0.0);
  diff::backward(diff::sum(w));
  CHECK(pi.grad() == prev);
}

TEST_CASE("selective_risk: examples and the zero-coverage guard") {
  CHECK(selective_risk({0.5, 1.5, 1.0}, {1.0, 1.0, 1.0}) == doctest::Approx(1.0));
  CHECK(selective_risk({1.0 * 0.5, 0.0}, {0.5, 0.0}) == doctest::Approx(1.0));
  const double r = selective_risk({0.3, 0.1, 0.4}, {0.2, 0.9, 0.5});
  CHECK(selective_risk({0.6, 0.2, 0.8}, {0.2, 0.9, 0.5}) == doctest::Approx(2.0 * r));
  CHECK_THROWS_AS(selective_risk({0.0, 0.0}, {0.0, 0.0}), NumericalError);
  CHECK_THROWS_AS(selective_risk({1.0}, {1.0, 1.0}), ShapeError);
}

TEST_CASE("residual_logits: examples") {
  Matrix f(1, 2), g(1, 2);
  f << 2.0, -1.0;
  g << 0.5, 0.5;
  Matrix r(1, 2);
  r << 1.5, -1.5;
  CHECK(residual_logits(f, g) == r);
  CHECK(residual_logits(f, f).isZero(0.0));
  CHECK(residual_logits(f, g) + g == f);
  CHECK_THROWS_AS(residual_logits(f, Matrix::Zero(2, 2)), ShapeError);
}

TEST_CASE("route: first selector at or above one half") {
  CHECK(route({0.6, 0.9}).destination == 1);
  CHECK(route({0.4, 0.5}).destination == 2);
  CHECK(route({0.4, 0.49}).residual());
  CHECK(route({}).residual());
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> pis(1 + rng() % 5);
    for (auto& p : pis) p = uniform01(rng);
    const Route r = route(pis);
    int expected = -1;
    for (std::size_t k = 0; k < pis.size() && expected < 0; ++k)
      if (pis[k] >= 0.5) expected = static_cast<int>(k) + 1;
    CHECK(r.destination == expected);
  }
}

TEST_CASE("config: validation and unknown keys") {
  CarveConfig c;
  c.tau = {0.4, 0.0, 0.3};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lambda_s = {-1.0};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.coverage_stop = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  nlohmann::json j = CarveConfig{};
  CarveConfig back = j.get<CarveConfig>();
  CHECK(nlohmann::json(back) == j);
  j["tua"] = 1;
  CHECK_THROWS_AS(j.get<CarveConfig>(), ConfigError);
  CHECK_THROWS_AS(CarveConfig::preset("nope"), ConfigError);
  for (const auto& name : CarveConfig::preset_names()) CHECK_NOTHROW(CarveConfig::preset(name).validate());
}

// ---------------------------------------------------------------- carving runs

TEST_CASE("carving: structural invariants over two iterations") {
  const auto& f = fixture();
  CarveConfig cfg = fast_config();
  cfg.max_iterations = 2;
  cfg.coverage_stop = 1.0;
  cfg.tau = {0.3, 0.3};

  CarveState state;
  state.blackbox = f.bb.clone();
  state.projector = models::train_projector(state.blackbox.features(f.ds), f.ds, {});
  const std::string phi_before = state.blackbox.phi_hash();

  carve_iteration(state, f.ds, 1, cfg);
  const auto sel1 = state.iterations[0].selector.to_json().dump();
  const auto exp1 = state.iterations[0].expert.to_json().dump();
  const auto head1 = state.head(1).to_json().dump();
  CHECK_THROWS_AS(carve_iteration(state, f.ds, 3, cfg), StageOrderError);
  carve_iteration(state, f.ds, 2, cfg);

  SUBCASE("phi never changes") { CHECK(state.blackbox.phi_hash() == phi_before); }

  SUBCASE("earlier selectors, experts and heads are bit-identical") {
    CHECK(state.iterations[0].selector.to_json().dump() == sel1);
    CHECK(state.iterations[0].expert.to_json().dump() == exp1);
    CHECK(state.head(1).to_json().dump() == head1);
  }

  SUBCASE("cumulative coverage is the hard-routed train fraction and never shrinks") {
    const auto tr = f.ds.split_view(data::Split::train);
    const auto routes = route_all(state, compute_inputs(state, tr).concepts);
    const auto covered = std::count_if(routes.begin(), routes.end(), [](const Route& r) { return !r.residual(); });
    CHECK(state.cumulative_coverage == doctest::Approx(static_cast<double>(covered) / static_cast<double>(tr.size())));
    CHECK(state.iterations[1].record.cumulative_coverage >= state.iterations[0].record.cumulative_coverage);
  }

  SUBCASE("destinations partition every split") {
    for (auto sp : {data::Split::train, data::Split::val, data::Split::test}) {
      const auto rep = evaluate(state, f.ds, sp);
      double cov = 0.0;
      std::size_t count = 0;
      for (const auto& d : rep.destinations) {
        cov += d.coverage;
        count += d.count;
        CHECK(d.proportional_accuracy == doctest::Approx(d.accuracy * d.coverage));
      }
      CHECK(std::abs(cov - 1.0) < 1e-12);
      CHECK(count == rep.n);
    }
  }

  SUBCASE("prediction modes") {
    const auto test = f.ds.split_view(data::Split::test);
    const auto in = compute_inputs(state, test);
    const auto plus = moie_predict(state, test, PredictMode::moie_plus_r);
    const auto only = moie_predict(state, test, PredictMode::moie);
    const auto routes = route_all(state, in.concepts);
    for (std::size_t i = 0; i < test.size(); ++i) {
      CHECK(plus[i].label >= 0);
      CHECK(plus[i].destination == routes[i].destination);
      if (routes[i].residual()) {
        CHECK(only[i].label == -1);
      } else {
        const auto k = static_cast<std::size_t>(routes[i].destination);
        const Matrix g = models::entropy_infer(state.iterations[k - 1].expert, in.concepts.row(static_cast<Eigen::Index>(i)));
        CHECK(only[i].label == models::argmax_rows(g)[0]);
        CHECK(plus[i].label == only[i].label);
      }
    }
  }

  SUBCASE("state round-trips through json") {
    const auto back = state_from_json(to_json(state));
    const auto test = f.ds.split_view(data::Split::test);
    const auto a = moie_predict(state, test, PredictMode::moie_plus_r);
    const auto b = moie_predict(back, test, PredictMode::moie_plus_r);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].label == b[i].label);
      CHECK(a[i].destination == b[i].destination);
    }
    CHECK(to_json(back).dump() == to_json(state).dump());
  }
}

TEST_CASE("carving: residual fraction is non-increasing in k") {
  const auto& f = fixture();
  CarveConfig cfg = fast_config(1);
  cfg.coverage_stop = 1.0;
  const auto state = run_carving(f.bb, f.ds, cfg);
  REQUIRE(state.n_iterations() >= 2);
  if (state.n_iterations() < cfg.max_iterations) CHECK(state.cumulative_coverage >= cfg.coverage_stop);
  double prev = 0.0;
  for (const auto& it : state.iterations) {
    CHECK(it.record.cumulative_coverage >= prev);
    prev = it.record.cumulative_coverage;
  }
}

TEST_CASE("carving: one expert with full coverage on separable data") {
  data::ShortcutSpec s;
  s.n_samples = 2500;
  s.n_spurious_concepts = 0;
  s.label_rule = "first";
  s.seed = 4;
  const auto ds = data::generate(s).data;
  const auto bb = models::train_blackbox(ds, {}, 4).model;
  CarveConfig cfg = fast_config(4);
  cfg.max_iterations = 1;
  cfg.tau = {1.0};
  const auto state = run_carving(bb, ds, cfg);
  const auto rep = evaluate(state, ds, data::Split::test);
  CHECK(rep.moie_coverage == 1.0);
  CHECK(rep.destinations.front().proportional_accuracy == rep.destinations.front().accuracy);
  CHECK(std::abs(rep.moie_accuracy - rep.blackbox_accuracy) <= 0.02);
}

TEST_CASE("carving: coverage penalty holds a small target") {
  const auto& f = fixture();
  CarveConfig cfg = fast_config(2);
  cfg.max_iterations = 1;
  cfg.tau = {0.2};
  cfg.lambda_s = {32.0};
  const auto state = run_carving(f.bb, f.ds, cfg);
  CHECK(state.iterations[0].record.zeta >= 0.15);
  CHECK_FALSE(state.iterations[0].record.coverage_shortfall);
}

TEST_CASE("evaluate: empty split is rejected") {
  const auto& f = fixture();
  CarveConfig cfg = fast_config();
  cfg.max_iterations = 1;
  const auto state = run_carving(f.bb, f.ds, cfg);
  const auto only_train = f.ds.split_view(data::Split::train);
  CHECK_THROWS_AS(evaluate(state, only_train, data::Split::test), ConfigError);
}
