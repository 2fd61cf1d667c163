#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "moie/diff/loss.hpp"
#include "moie/diff/mlp.hpp"
#include "moie/diff/ops.hpp"
#include "moie/diff/optim.hpp"
#include "moie/errors.hpp"

using namespace moie;
using namespace moie::diff;

namespace {

Matrix rowvec(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 2.0 * uniform01(rng) - 1.0;
  return m;
}

Mlp identity_layer(std::size_t n, Activation act) {
  Layer l{Tensor::parameter(Matrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n))),
          Tensor::parameter(Matrix::Zero(1, static_cast<Eigen::Index>(n))), act};
  return Mlp({l});
}

}  // namespace

TEST_CASE("forward: identity and relu layers") {
  CHECK(identity_layer(3, Activation::identity).infer(rowvec({1, 2, 3})) == rowvec({1, 2, 3}));
  CHECK(identity_layer(3, Activation::relu).infer(rowvec({-1, 0, 2})) == rowvec({0, 0, 2}));
  const Tensor out = identity_layer(3, Activation::relu).forward(Tensor::constant(rowvec({-1, 0, 2})));
  CHECK(out.value() == rowvec({0, 0, 2}));
}

TEST_CASE("forward: two-layer mlp matches hand-rolled loops") {
  Rng rng(7);
  Mlp net({4, 5, 3}, {Activation::relu, Activation::sigmoid}, rng);
  const Matrix x = random_matrix(6, 4, rng);

  const Matrix& w0 = net.layer(0).weight.value();
  const Matrix& b0 = net.layer(0).bias.value();
  const Matrix& w1 = net.layer(1).weight.value();
  const Matrix& b1 = net.layer(1).bias.value();
  Matrix expected(6, 3);
  for (int n = 0; n < 6; ++n) {
    std::vector<double> hidden(5);
    for (int j = 0; j < 5; ++j) {
      double acc = b0(0, j);
      for (int i = 0; i < 4; ++i) acc += w0(j, i) * x(n, i);
      hidden[j] = acc > 0 ? acc : 0.0;
    }
    for (int k = 0; k < 3; ++k) {
      double acc = b1(0, k);
      for (int j = 0; j < 5; ++j) acc += w1(k, j) * hidden[j];
      expected(n, k) = 1.0 / (1.0 + std::exp(-acc));
    }
  }
  CHECK((net.infer(x) - expected).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((net.forward(Tensor::constant(x)).value() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("forward: dimension mismatch is a shape error") {
  Rng rng(1);
  Mlp net({4, 2}, {Activation::identity}, rng);
  CHECK_THROWS_AS(net.infer(Matrix::Zero(2, 3)), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::constant(Matrix::Zero(2, 5))), ShapeError);
}

TEST_CASE("backward: linear function and chain rule by hand") {
  Tensor w = Tensor::parameter(rowvec({0.3, -1.0, 2.0}));
  const Matrix x = rowvec({4.0, 5.0, -6.0});
  backward(sum(mul(w, Tensor::constant(x))));
  CHECK(w.grad() == x);

  Tensor v = Tensor::parameter(rowvec({0.0}));
  backward(sum(square(sigmoid(v))));
  CHECK(v.grad()(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward: gradients are overwritten, not accumulated") {
  Tensor w = Tensor::parameter(rowvec({1.0, 2.0}));
  const auto loss = [&] { return sum(square(w)); };
  backward(loss());
  const Matrix first = w.grad();
  backward(loss());
  CHECK(w.grad() == first);
}

TEST_CASE("backward: non-scalar loss is rejected") {
  Tensor w = Tensor::parameter(rowvec({1.0, 2.0}));
  CHECK_THROWS_AS(backward(square(w)), ShapeError);
}

TEST_CASE("backward: mlp + cross-entropy matches finite differences") {
  Rng rng(11);
  Mlp net({5, 7, 3}, {Activation::relu, Activation::identity}, rng);
  const Matrix x = random_matrix(8, 5, rng);
  const std::vector<int> y{0, 1, 2, 0, 1, 2, 2, 1};
  const auto r = testing::grad_check(
      [&] { return cross_entropy(net.forward(Tensor::constant(x)), y); }, net.parameters());
  INFO("worst " << r.worst_param);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.checked == net.parameter_count());
}

TEST_CASE("kd_loss: endpoints and direct formula") {
  const Matrix teacher = rowvec({2.0, 0.0});
  const std::vector<int> label{0};

  SUBCASE("identical logits with alpha=1 give zero") {
    const Tensor s = Tensor::parameter(teacher);
    CHECK(kd_loss(s, teacher, label, {1.0, 10.0}).item() == 0.0);
  }
  SUBCASE("alpha=0 is plain cross-entropy") {
    const Tensor s = Tensor::parameter(rowvec({0.3, -0.4}));
    CHECK(kd_loss(s, teacher, label, {0.0, 10.0}).item() == cross_entropy(s, label).item());
  }
  SUBCASE("teacher [2,0], student [0,0], alpha 0.9, T 10") {
    const double pt0 = std::exp(0.2) / (std::exp(0.2) + 1.0);
    const double pt1 = 1.0 - pt0;
    const double kl = pt0 * std::log(pt0 / 0.5) + pt1 * std::log(pt1 / 0.5);
    const double expected = 0.9 * 100.0 * kl + 0.1 * std::log(2.0);
    const Tensor s = Tensor::constant(rowvec({0.0, 0.0}));
    CHECK(std::abs(kd_loss(s, teacher, label, {0.9, 10.0}).item() - expected) < 1e-10);
  }
  SUBCASE("invalid parameters") {
    const Tensor s = Tensor::constant(rowvec({0.0, 0.0}));
    CHECK_THROWS_AS(kd_loss(s, teacher, label, {0.5, 0.0}), ConfigError);
    CHECK_THROWS_AS(kd_loss(s, teacher, label, {1.5, 1.0}), ConfigError);
    CHECK_THROWS_AS(kd_loss(s, teacher, label, {-0.1, 1.0}), ConfigError);
  }
}

TEST_CASE("kd_loss is non-negative for alpha in [0,1]") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix s = random_matrix(4, 3, rng) * 5.0;
    const Matrix t = random_matrix(4, 3, rng) * 5.0;
    const double alpha = uniform01(rng);
    const double temp = 0.5 + 10.0 * uniform01(rng);
    CHECK(kd_loss(Tensor::constant(s), t, std::vector<int>{0, 1, 2, 1}, {alpha, temp}).item() >= 0.0);
  }
}

TEST_CASE("optimizer: sgd and adam updates") {
  SUBCASE("sgd single step") {
    Tensor p = Tensor::parameter(rowvec({1.0}));
    Optimizer opt({OptimKind::sgd, 0.1}, {{"p", p}});
    backward(sum(p));
    opt.step();
    CHECK(p.value()(0, 0) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(opt.steps() == 1);
  }
  SUBCASE("zero gradient is a fixed point") {
    Tensor a = Tensor::parameter(rowvec({0.7, -0.2}));
    Tensor b = Tensor::parameter(rowvec({0.7, -0.2}));
    Optimizer sgd({OptimKind::sgd, 0.1}, {{"a", a}});
    Optimizer adam({OptimKind::adam, 0.1}, {{"b", b}});
    for (int i = 0; i < 5; ++i) {
      backward(sum(scale(a, 0.0)));
      sgd.step();
      backward(sum(scale(b, 0.0)));
      adam.step();
    }
    CHECK(a.value() == rowvec({0.7, -0.2}));
    CHECK((b.value() - rowvec({0.7, -0.2})).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("100 sgd steps on p^2 decay geometrically") {
    Tensor p = Tensor::parameter(rowvec({1.0}));
    Optimizer opt({OptimKind::sgd, 0.1}, {{"p", p}});
    for (int i = 0; i < 100; ++i) {
      backward(sum(square(p)));
      opt.step();
    }
    CHECK(std::abs(p.value()(0, 0)) < 1e-9);
    CHECK(p.value()(0, 0) == doctest::Approx(std::pow(0.8, 100)).epsilon(1e-9));
  }
  SUBCASE("non-finite gradient names the parameter") {
    Tensor p = Tensor::parameter(rowvec({0.0}));
    Optimizer opt({OptimKind::adam, 0.1}, {{"head.bias", p}});
    backward(sum(log(p)));  // d/dp log(p) at 0 = inf
    try {
      opt.step();
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("head.bias") != std::string::npos);
    }
    CHECK(p.value()(0, 0) == 0.0);
  }
  SUBCASE("invalid learning rate") {
    Tensor p = Tensor::parameter(rowvec({0.0}));
    CHECK_THROWS_AS(Optimizer({OptimKind::sgd, 0.0}, {{"p", p}}), ConfigError);
  }
}

TEST_CASE("softmax rows sum to one; sigmoid stays in (0,1)") {
  Rng rng(5);
  const Matrix z = random_matrix(20, 6, rng) * 40.0;
  const Matrix s = softmax_rows(Tensor::constant(z)).value();
  for (Eigen::Index i = 0; i < s.rows(); ++i) CHECK(std::abs(s.row(i).sum() - 1.0) < 1e-12);
  const Matrix g = sigmoid(Tensor::constant(random_matrix(20, 6, rng) * 30.0)).value();
  CHECK(g.minCoeff() > 0.0);
  CHECK(g.maxCoeff() < 1.0);
}

TEST_CASE("training is bit-identical for identical seeds") {
  const auto run = [] {
    Rng init(42);
    Mlp net({3, 4, 2}, {Activation::relu, Activation::identity}, init);
    Rng data(43);
    const Matrix x = random_matrix(16, 3, data);
    std::vector<int> y(16);
    for (int i = 0; i < 16; ++i) y[i] = x(i, 0) > 0 ? 1 : 0;
    Optimizer opt({OptimKind::adam, 0.01}, net.parameters());
    for (int s = 0; s < 25; ++s) {
      backward(cross_entropy(net.forward(Tensor::constant(x)), y));
      opt.step();
    }
    return net.to_json().dump();
  };
  CHECK(run() == run());
}

TEST_CASE("mlp checkpoint round-trip is value-exact") {
  Rng rng(9);
  Mlp net({3, 5, 2}, {Activation::sigmoid, Activation::identity}, rng);
  const Mlp back = Mlp::from_json(nlohmann::json::parse(net.to_json().dump()));
  REQUIRE(back.num_layers() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.layer(i).weight.value() == net.layer(i).weight.value());
    CHECK(back.layer(i).bias.value() == net.layer(i).bias.value());
    CHECK(back.layer(i).activation == net.layer(i).activation);
  }
  nlohmann::json bad = net.to_json();
  bad["layers"][1]["shape"] = {2, 4};
  CHECK_THROWS_AS(Mlp::from_json(bad), Error);
}

TEST_CASE("clone is independent of the source") {
  Rng rng(2);
  Mlp a({2, 2}, {Activation::identity}, rng);
  Mlp b = a.clone();
  b.layer(0).weight.mutable_value()(0, 0) += 1.0;
  CHECK(a.layer(0).weight.value()(0, 0) != b.layer(0).weight.value()(0, 0));
}

TEST_CASE("op gradients match finite differences") {
  Rng rng(21);
  Tensor a = Tensor::parameter(random_matrix(4, 3, rng) + Matrix::Constant(4, 3, 2.5));
  Tensor b = Tensor::parameter(random_matrix(4, 3, rng) + Matrix::Constant(4, 3, 2.5));
  Tensor r = Tensor::parameter(random_matrix(1, 3, rng));
  Tensor c = Tensor::parameter(random_matrix(4, 1, rng));
  const std::vector<NamedParameter> params{{"a", a}, {"b", b}, {"r", r}, {"c", c}};
  const std::vector<int> idx{2, 0, 1, 1};
  const auto loss = [&] {
    Tensor t = div(mul(a, b), add_scalar(b, 0.5));
    t = add(mul_row(t, r), mul_col(sub(a, b), c));
    t = divide_by_row_max(softmax_rows(add_row(t, r)));
    Tensor cat[] = {t, log(exp(scale(col(t, 1), 0.5)))};
    Tensor h = hconcat(cat);
    return add(mean(pick(log_softmax_rows(h), idx)), sum(row_sum(matmul(row(h, 2), Tensor::constant(Matrix::Ones(4, 1))))));
  };
  const auto res = testing::grad_check(loss, params);
  INFO("worst " << res.worst_param);
  CHECK(res.max_rel_error < 1e-4);
}
