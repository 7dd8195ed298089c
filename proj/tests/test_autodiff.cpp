#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "diml/autodiff.hpp"
#include "diml/rng.hpp"

using namespace diml;
using Catch::Approx;

namespace {

// Independent central-difference oracle over a plain function of one
// flat parameter vector.
std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double fp = f(x);
    x[i] = keep - h;
    double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST_CASE("param and const basics") {
  Tape tape;
  std::vector<double> one{1.0};
  Tensor p = tape.param({1}, one);
  tape.backward(p);
  REQUIRE(tape.grad(p)[0] == 1.0);

  Tensor c = tape.constant({1}, {2.0});
  REQUIRE(tape.param_ids().size() == 1);  // const is not registered
  REQUIRE(c.values()[0] == 2.0);

  std::vector<double> m(6, 0.5);
  Tensor pm = tape.param({3, 2}, m);
  REQUIRE(pm.shape() == Shape{3, 2});

  std::vector<double> bad{std::numeric_limits<double>::infinity()};
  REQUIRE_THROWS_AS(tape.param({1}, bad), std::invalid_argument);
}

TEST_CASE("affine identity and tanh at zero") {
  Tape tape;
  Tensor x = tape.constant({1, 2}, {1.0, 0.0});
  Tensor w = tape.constant({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor b = tape.constant({2}, {0.0, 0.0});
  Tensor y = tape.affine(x, w, b);
  REQUIRE(y.values()[0] == Approx(1.0));
  REQUIRE(y.values()[1] == Approx(0.0));

  Tensor t = tape.tanh(tape.constant({1}, {0.0}));
  REQUIRE(t.values()[0] == 0.0);
}

TEST_CASE("shape errors name both shapes") {
  Tape tape;
  Tensor a = tape.zeros({2, 3});
  Tensor b = tape.zeros({3, 2});
  REQUIRE_THROWS_WITH(tape.add(a, b),
                      Catch::Matchers::ContainsSubstring("[2,3]") &&
                          Catch::Matchers::ContainsSubstring("[3,2]"));
}

TEST_CASE("log rejects non-positive input") {
  Tape tape;
  REQUIRE_THROWS_AS(tape.log(tape.constant({1}, {0.0})), std::domain_error);
  REQUIRE_THROWS_AS(tape.log(tape.constant({1}, {-1.0})), std::domain_error);
}

TEST_CASE("gradient of sum of squares matches finite differences") {
  auto f = [](const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return acc;
  };
  std::vector<double> x{1.0, 2.0};
  auto fd = fd_gradient(f, x, 1e-5);
  REQUIRE(fd[0] == Approx(2.0).margin(1e-6));
  REQUIRE(fd[1] == Approx(4.0).margin(1e-6));

  Tape tape;
  Tensor p = tape.param({2}, x);
  Tensor root = tape.sum(tape.square(p));
  tape.backward(root);
  REQUIRE(tape.grad(p)[0] == Approx(2.0));
  REQUIRE(tape.grad(p)[1] == Approx(4.0));
}

TEST_CASE("softmax rows") {
  Tape tape;
  Tensor x = tape.constant({3, 2}, {0.0, 0.0, 1.0, 0.0, 1000.0, 0.0});
  Tensor p = tape.softmax_rows(x);
  const auto& v = p.values();
  REQUIRE(v[0] == Approx(0.5));
  REQUIRE(v[1] == Approx(0.5));
  REQUIRE(v[2] == Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-12));
  REQUIRE(v[3] == Approx(1.0 / (std::exp(1.0) + 1.0)).epsilon(1e-12));
  REQUIRE(v[4] == Approx(1.0));
  for (double e : v) REQUIRE(std::isfinite(e));
}

TEST_CASE("softmax rows sum to one for random finite inputs") {
  Rng rng(42);
  for (int trial = 0; trial < 50; ++trial) {
    int rows = 1 + rng.uniform_int(5), cols = 2 + rng.uniform_int(6);
    std::vector<double> vals(std::size_t(rows) * cols);
    for (auto& v : vals) v = rng.uniform(-1e3, 1e3);
    Tape tape;
    Tensor p = tape.softmax_rows(tape.constant({rows, cols}, vals));
    for (int r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int c = 0; c < cols; ++c) s += p.values()[std::size_t(r) * cols + c];
      REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("backward of a constant root leaves parameters at zero") {
  Tape tape;
  std::vector<double> v{3.0, 4.0};
  Tensor p = tape.param({2}, v);
  Tensor root = tape.sum(tape.constant({2}, {1.0, 2.0}));
  tape.backward(root);
  REQUIRE(tape.grad(p)[0] == 0.0);
  REQUIRE(tape.grad(p)[1] == 0.0);
}

TEST_CASE("two-step EWMA chain has the linear coefficient as gradient") {
  Tape tape;
  std::vector<double> uv{1.0, 2.0};
  Tensor u = tape.param({2}, uv);
  Tensor q1 = tape.constant({2}, {0.5, 0.5});
  double alpha = 0.5;
  Tensor q2 = tape.add(tape.scale(q1, 1.0 - alpha), tape.scale(u, alpha));
  Tensor root = tape.take(q2, {0});
  tape.backward(tape.sum(root));
  REQUIRE(tape.grad(u)[0] == Approx(0.5));
  REQUIRE(tape.grad(u)[1] == 0.0);
}

TEST_CASE("backward rejects non-scalar root") {
  Tape tape;
  Tensor x = tape.zeros({2});
  REQUIRE_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("grad_check on sum of squares and on a constant") {
  auto sq = [](Tape& t, const std::vector<Tensor>& ps) { return t.sum(t.square(ps[0])); };
  auto res = grad_check(sq, {{0.3, -1.7, 2.9}}, 1e-5);
  REQUIRE(res.max_rel_error <= 1e-6);

  auto cst = [](Tape& t, const std::vector<Tensor>& ps) {
    (void)ps;
    return t.scalar_const(7.0);
  };
  auto res2 = grad_check(cst, {{1.0, 2.0}}, 1e-5);
  REQUIRE(res2.max_rel_error == 0.0);
}

TEST_CASE("composite graph families match finite differences at random points") {
  Rng rng(7);

  // affine -> tanh -> affine -> softmax -> log-pick chain, same shape family
  // as the mechanism forward pass used by the likelihood.
  auto family = [](Tape& t, const std::vector<Tensor>& ps) {
    Tensor x = t.constant({2, 3}, {0.1, -0.2, 0.4, 0.9, 0.5, -0.7});
    Tensor w1 = t.reshape(ps[0], {3, 4});
    Tensor b1 = ps[1];
    Tensor w2 = t.reshape(ps[2], {4, 3});
    Tensor b2 = ps[3];
    Tensor h = t.tanh(t.affine(x, w1, b1));
    Tensor out = t.affine(h, w2, b2);
    Tensor p = t.softmax_rows(out);
    Tensor picked = t.take(p, {0, 5});
    return t.sum(t.log(picked));
  };

  for (int point = 0; point < 10; ++point) {
    std::vector<std::vector<double>> vals(4);
    vals[0].resize(12);
    vals[1].resize(4);
    vals[2].resize(12);
    vals[3].resize(3);
    for (auto& block : vals)
      for (auto& v : block) v = rng.uniform(-1.0, 1.0);
    auto res = grad_check(family, vals, 1e-4);
    REQUIRE(res.max_rel_error <= 1e-4);
  }

  // mixed elementwise family: mul, exp, scale_by, mean, add_scalar
  auto family2 = [](Tape& t, const std::vector<Tensor>& ps) {
    Tensor a = ps[0];
    Tensor s = ps[1];
    Tensor b = t.mul(a, t.exp(t.scale(a, 0.3)));
    Tensor c = t.scale_by(t.add_scalar(b, 0.5), s);
    return t.mean(t.square(c));
  };
  for (int point = 0; point < 10; ++point) {
    std::vector<std::vector<double>> vals(2);
    vals[0].resize(5);
    for (auto& v : vals[0]) v = rng.uniform(-1.0, 1.0);
    vals[1] = {rng.uniform(0.5, 2.0)};
    auto res = grad_check(family2, vals, 1e-4);
    REQUIRE(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("take scatter-adds repeated indices") {
  Tape tape;
  std::vector<double> v{1.0, 2.0, 3.0};
  Tensor p = tape.param({3}, v);
  Tensor picked = tape.take(p, {1, 1, 2});
  tape.backward(tape.sum(picked));
  REQUIRE(tape.grad(p)[0] == 0.0);
  REQUIRE(tape.grad(p)[1] == 2.0);
  REQUIRE(tape.grad(p)[2] == 1.0);
}

TEST_CASE("detach blocks gradient flow but passes values") {
  Tape tape;
  std::vector<double> v{2.0};
  Tensor p = tape.param({1}, v);
  Tensor d = tape.detach(tape.square(p));
  REQUIRE(d.values()[0] == 4.0);
  Tensor root = tape.sum(tape.mul(d, p));  // d treated as constant 4
  tape.backward(root);
  REQUIRE(tape.grad(p)[0] == Approx(4.0));
}

TEST_CASE("tape replay is bit-deterministic") {
  Rng rng(99);
  std::vector<double> w(12), b(4), x(6);
  for (auto& v : w) v = rng.uniform(-1, 1);
  for (auto& v : b) v = rng.uniform(-1, 1);
  for (auto& v : x) v = rng.uniform(-1, 1);

  auto run = [&](std::vector<double>& vals_out, std::vector<double>& grads_out) {
    Tape tape;
    Tensor wp = tape.param({3, 4}, w);
    Tensor bp = tape.param({4}, b);
    Tensor xc = tape.constant({2, 3}, x);
    Tensor out = tape.softmax_rows(tape.tanh(tape.affine(xc, wp, bp)));
    Tensor root = tape.sum(tape.log(tape.take(out, {0, 7})));
    tape.backward(root);
    vals_out = out.values();
    auto g = tape.grad(wp);
    grads_out.assign(g.begin(), g.end());
  };

  std::vector<double> v1, g1, v2, g2;
  run(v1, g1);
  run(v2, g2);
  REQUIRE(v1 == v2);
  REQUIRE(g1 == g2);
}
