#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "diml/estimators.hpp"

using namespace diml;
using Catch::Approx;

namespace {

Mechanism random_tabular(GameShape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::size_t rows = joint_count_capped(shape, default_tabulate_cap);
  std::vector<double> table(rows * std::size_t(shape.n));
  for (double& v : table) v = rng.normal(0.0, scale);
  return Mechanism::tabular(shape, std::move(table));
}

bool fit_results_identical(const FitResult& a, const FitResult& b) {
  if (a.loss_history != b.loss_history) return false;
  if (a.fitted_beta != b.fitted_beta) return false;
  if (a.q_init != b.q_init) return false;
  if (a.mechanism.params().size() != b.mechanism.params().size()) return false;
  for (std::size_t i = 0; i < a.mechanism.params().size(); ++i)
    if (a.mechanism.params()[i].values != b.mechanism.params()[i].values) return false;
  if (a.metric_history.size() != b.metric_history.size()) return false;
  for (std::size_t i = 0; i < a.metric_history.size(); ++i) {
    const EvalRow &ra = a.metric_history[i], &rb = b.metric_history[i];
    if (ra.epoch != rb.epoch || ra.train_nll != rb.train_nll ||
        ra.heldout_nll != rb.heldout_nll)
      return false;
    auto same = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    if (!same(ra.diff_mse, rb.diff_mse) || !same(ra.cfkl_params, rb.cfkl_params)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("optimizer_step") {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;

  SECTION("zero gradient from a fresh state leaves parameters unchanged") {
    std::vector<double> params{1.0, -2.0};
    std::vector<double> grads{0.0, 0.0};
    AdamState state;
    optimizer_step(params, grads, state, cfg);
    REQUIRE(params == std::vector<double>{1.0, -2.0});
    REQUIRE(state.step == 1);

    // after a real gradient, zero gradients decay the moments
    grads = {1.0, 1.0};
    optimizer_step(params, grads, state, cfg);
    double m_after = state.m[0];
    grads = {0.0, 0.0};
    optimizer_step(params, grads, state, cfg);
    REQUIRE(state.m[0] == Approx(0.9 * m_after));
  }

  SECTION("quadratic bowl converges") {
    std::vector<double> x{1.5, -2.0, 0.7};
    AdamState state;
    for (int step = 0; step < 500; ++step) {
      std::vector<double> g(x.size());
      for (std::size_t j = 0; j < x.size(); ++j) g[j] = 2.0 * x[j];
      optimizer_step(x, g, state, cfg);
    }
    double norm = 0.0;
    for (double v : x) norm += v * v;
    REQUIRE(std::sqrt(norm) <= 1e-3);
  }

  SECTION("two runs are bit-identical") {
    auto run = [&]() {
      std::vector<double> x{0.4, 0.6};
      AdamState state;
      Rng rng(5);
      std::vector<std::vector<double>> history;
      for (int step = 0; step < 50; ++step) {
        std::vector<double> g{rng.normal(), rng.normal()};
        optimizer_step(x, g, state, cfg);
        history.push_back(x);
      }
      return history;
    };
    REQUIRE(run() == run());
  }
}

TEST_CASE("zero-epoch fit returns the initialized mechanism unchanged") {
  GameShape shape{2, 2};
  Mechanism truth = random_tabular(shape, 3);
  auto data = simulate(truth, {0.1, 3.0, 0.05}, 30, 8, 21);

  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.likelihood.params = {0.1, 3.0, 0.05};
  Mechanism template_mech = Mechanism::neural(shape, {8}, 5);
  std::vector<double> before;
  for (const auto& arr : template_mech.params())
    before.insert(before.end(), arr.values.begin(), arr.values.end());

  FitResult result = fit_diml(data, {}, template_mech, cfg);
  std::vector<double> after;
  for (const auto& arr : result.mechanism.params())
    after.insert(after.end(), arr.values.begin(), arr.values.end());
  REQUIRE(before == after);
  REQUIRE_FALSE(result.loss_history.empty());
  REQUIRE_FALSE(result.metric_history.empty());
}

TEST_CASE("fit rejects mismatched template shapes") {
  Mechanism truth = random_tabular({2, 2}, 3);
  auto data = simulate(truth, {0.1, 3.0, 0.05}, 20, 2, 21);
  TrainConfig cfg;
  cfg.likelihood.params = {0.1, 3.0, 0.05};
  REQUIRE_THROWS_WITH(fit_diml(data, {}, Mechanism::neural({3, 2}, {8}, 5), cfg),
                      Catch::Matchers::ContainsSubstring("shape"));
  REQUIRE_THROWS_AS(fit_mechanism(random_tabular({2, 2}, 9), data, {},
                                  [] {
                                    TrainConfig c;
                                    c.epochs = -1;
                                    return c;
                                  }()),
                    std::invalid_argument);
}

TEST_CASE("tabular baseline recovers a small game and refuses large ones") {
  GameShape shape{2, 2};
  Mechanism truth = random_tabular(shape, 13);
  LearnerParams gen{0.1, 3.0, 0.05};
  auto data = simulate(truth, gen, 120, 48, 31);
  std::span<const Trajectory> train(data.data(), 40), heldout(data.data() + 40, 8);

  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 80;
  cfg.minibatch = 8;
  cfg.eval_interval = 20;
  cfg.seed = 7;
  cfg.likelihood.params = gen;

  MetricSettings ms;
  ms.diff_contexts = 128;
  ms.cfkl_rollouts = 16;
  ms.cfkl_horizon = 40;
  FitResult result = fit_tabular_mle(train, heldout, cfg, &truth, &ms);

  REQUIRE(result.metric_history.front().diff_mse > result.metric_history.back().diff_mse);
  REQUIRE(result.metric_history.back().diff_mse <= 0.05);

  // infeasible joint spaces are refused with an explanation
  Mechanism big = Mechanism::count_neural({40, 10}, {8}, 3);
  auto big_data = simulate(big, gen, 3, 1, 1);
  REQUIRE_THROWS_AS(fit_tabular_mle(big_data, {}, cfg), infeasible_error);
}

TEST_CASE("losses decrease monotonically after smoothing at default settings") {
  GameShape shape{2, 3};
  Mechanism truth = random_tabular(shape, 23);
  LearnerParams gen{0.1, 3.0, 0.05};
  auto data = simulate(truth, gen, 100, 24, 41);

  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 60;
  cfg.eval_interval = 30;
  cfg.seed = 11;
  cfg.likelihood.params = gen;
  FitResult result = fit_tabular_mle(data, {}, cfg);

  auto smoothed = [&](std::size_t e) {
    std::size_t lo = e >= 9 ? e - 9 : 0;
    double acc = 0.0;
    for (std::size_t i = lo; i <= e; ++i) acc += result.loss_history[i];
    return acc / double(e - lo + 1);
  };
  for (std::size_t e = 1; e < result.loss_history.size(); ++e)
    REQUIRE(smoothed(e) <= smoothed(e - 1) + 1e-9);
}

TEST_CASE("same seed gives bit-identical fits, workers included") {
  GameShape shape{2, 2};
  Mechanism truth = random_tabular(shape, 33);
  LearnerParams gen{0.1, 3.0, 0.05};
  auto data = simulate(truth, gen, 40, 12, 51);
  std::span<const Trajectory> train(data.data(), 10), heldout(data.data() + 10, 2);

  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.eval_interval = 5;
  cfg.seed = 99;
  cfg.likelihood.params = gen;
  MetricSettings ms;
  ms.diff_contexts = 32;
  ms.cfkl_rollouts = 8;
  ms.cfkl_horizon = 20;

  auto run = [&](int workers) {
    TrainConfig c = cfg;
    c.workers = workers;
    return fit_diml(train, heldout, Mechanism::neural(shape, {8}, 4), c, &truth, &ms);
  };
  FitResult a = run(1);
  FitResult b = run(1);
  FitResult c = run(2);
  REQUIRE(fit_results_identical(a, b));
  REQUIRE(fit_results_identical(a, c));
}

TEST_CASE("struct MLE recovers congestion and public-goods coefficients") {
  GameShape shape{3, 4};
  LearnerParams gen{0.1, 3.0, 0.05};

  SECTION("congestion") {
    Mechanism truth = Mechanism::congestion(shape, {1.0, 0.5, 0.0, 0.25}, 0.4);
    auto data = simulate(truth, gen, 150, 24, 61);
    std::span<const Trajectory> train(data.data(), 20), heldout(data.data() + 20, 4);

    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 250;
    cfg.eval_interval = 125;
    cfg.seed = 5;
    cfg.workers = 2;
    cfg.likelihood.params = gen;
    FitResult result = fit_struct_mle(train, heldout, MechanismKind::Congestion, cfg, &truth);

    double kappa = result.mechanism.params()[1].values[0];
    REQUIRE(kappa == Approx(0.4).margin(0.05));
  }

  SECTION("public goods gamma/cost ratio") {
    Mechanism truth = Mechanism::public_goods(shape, 2.0, 1.0);
    auto data = simulate(truth, gen, 150, 24, 71);
    std::span<const Trajectory> train(data.data(), 20), heldout(data.data() + 20, 4);

    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 150;
    cfg.eval_interval = 50;
    cfg.seed = 6;
    cfg.likelihood.params = gen;
    FitResult result = fit_struct_mle(train, heldout, MechanismKind::PublicGoods, cfg, &truth);

    double gamma = result.mechanism.params()[0].values[0];
    double cost = result.mechanism.params()[1].values[0];
    REQUIRE(gamma / cost == Approx(2.0).epsilon(0.05));
  }

  SECTION("family mismatch still completes but fits worse") {
    Mechanism truth = Mechanism::public_goods(shape, 2.0, 1.0);
    auto data = simulate(truth, gen, 100, 16, 81);
    std::span<const Trajectory> train(data.data(), 12), heldout(data.data() + 12, 4);

    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 80;
    cfg.eval_interval = 40;
    cfg.seed = 7;
    cfg.likelihood.params = gen;
    FitResult matched = fit_struct_mle(train, heldout, MechanismKind::PublicGoods, cfg, &truth);
    FitResult mismatched = fit_struct_mle(train, heldout, MechanismKind::Congestion, cfg, &truth);
    REQUIRE(mismatched.metric_history.back().heldout_nll >
            matched.metric_history.back().heldout_nll);
  }
}

TEST_CASE("wrong learner parameters shrink the recovered differences") {
  // doubling beta halves the recovered payoff scale (1/beta in Theorem 1)
  GameShape shape{2, 3};
  Mechanism truth = random_tabular(shape, 43);
  LearnerParams gen{0.2, 2.0, 0.05};
  auto data = simulate(truth, gen, 250, 40, 91);
  std::span<const Trajectory> train(data.data(), 32), heldout(data.data() + 32, 8);

  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 120;
  cfg.eval_interval = 60;
  cfg.seed = 9;
  cfg.likelihood.params = gen;
  cfg.likelihood.lambda_magnitude = 0.0;  // no shrinkage; isolate the beta effect

  FitResult right = fit_tabular_mle(train, heldout, cfg, &truth);
  LearnerParams wrong = gen;
  wrong.beta = 2.0 * gen.beta;
  TrainConfig cfg_wrong = cfg;
  cfg_wrong.likelihood.params = wrong;
  FitResult wrong_fit = fit_tabular_mle(train, heldout, cfg_wrong, &truth);

  // mean absolute centered difference magnitude per context
  auto mean_diff_scale = [&](const Mechanism& m) {
    auto contexts = enumerate_contexts(shape);
    double acc = 0.0;
    long cnt = 0;
    std::vector<double> row(3);
    for (const auto& ctx : contexts) {
      m.counterfactual_row(ctx.agent, context_joint(ctx, 0), row);
      for (int a = 0; a < 3; ++a)
        for (int b = a + 1; b < 3; ++b) {
          acc += std::abs(row[std::size_t(a)] - row[std::size_t(b)]);
          ++cnt;
        }
    }
    return acc / double(cnt);
  };

  double scale_right = mean_diff_scale(right.mechanism);
  double scale_wrong = mean_diff_scale(wrong_fit.mechanism);
  REQUIRE(scale_wrong == Approx(0.5 * scale_right).epsilon(0.15));

  // degenerate misspecification: wrong == true params reproduces fit exactly
  FitResult same = fit_diml_wrong(train, heldout, Mechanism::neural(shape, {8}, 2), cfg, gen);
  TrainConfig plain_cfg = cfg;
  FitResult base = fit_diml(train, heldout, Mechanism::neural(shape, {8}, 2), plain_cfg);
  REQUIRE(fit_results_identical(same, base));
}

TEST_CASE("estimated temperature stays positive and the scale gauge is pinned") {
  GameShape shape{2, 2};
  Mechanism truth = random_tabular(shape, 53);
  LearnerParams gen{0.2, 2.5, 0.05};
  auto data = simulate(truth, gen, 150, 24, 101);
  std::span<const Trajectory> train(data.data(), 20), heldout(data.data() + 20, 4);

  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 100;
  cfg.eval_interval = 50;
  cfg.seed = 13;
  cfg.likelihood.params = {0.2, 1.0, 0.05};  // start beta at 1, let it move
  cfg.estimate_beta = true;
  cfg.likelihood.lambda_magnitude = 1e-3;  // pins the payoff scale

  FitResult result = fit_tabular_mle(train, heldout, cfg, &truth);
  REQUIRE(std::isfinite(result.fitted_beta));
  REQUIRE(result.fitted_beta > 0.0);
  REQUIRE(result.loss_history.back() < result.loss_history.front());

  // with estimate_beta off the temperature never moves
  cfg.estimate_beta = false;
  FitResult fixed = fit_tabular_mle(train, heldout, cfg, &truth);
  REQUIRE(fixed.fitted_beta == 1.0);
}

TEST_CASE("objective_grad_check covers every mechanism family") {
  GameShape shape{2, 2};
  LearnerParams gen{0.2, 2.0, 0.1};
  Mechanism truth = random_tabular(shape, 63);
  auto data = simulate(truth, gen, 10, 2, 111);

  LikelihoodConfig cfg;
  cfg.params = gen;

  std::vector<Mechanism> family;
  family.push_back(random_tabular(shape, 1));
  family.push_back(Mechanism::congestion(shape, {0.7, 0.1}, 0.3));
  family.push_back(Mechanism::public_goods(shape, 1.5, 0.8));
  family.push_back(Mechanism::neural(shape, {8, 8}, 2));
  family.push_back(Mechanism::count_neural(shape, {8, 8}, 3));
  for (auto& mech : family) {
    auto report = objective_grad_check(mech, data, cfg, 1e-4);
    INFO("kind " << kind_name(mech.kind()));
    REQUIRE(report.max_rel_error <= 1e-4);
  }
}
