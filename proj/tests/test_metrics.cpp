#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "diml/metrics.hpp"

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

std::vector<double> logit_response(const std::vector<double>& u, double beta) {
  double mx = -1e300;
  for (double v : u) mx = std::max(mx, beta * v);
  std::vector<double> p(u.size());
  double z = 0.0;
  for (std::size_t a = 0; a < u.size(); ++a) {
    p[a] = std::exp(beta * u[a] - mx);
    z += p[a];
  }
  for (double& v : p) v /= z;
  return p;
}

}  // namespace

TEST_CASE("utility recovery from conditionals") {
  SECTION("uniform probabilities recover the zero vector") {
    std::vector<double> p{0.25, 0.25, 0.25, 0.25};
    for (double u : recover_utilities_from_conditionals(p, 3.0))
      REQUIRE(u == Approx(0.0).margin(1e-15));
  }
  SECTION("two-action log-ratio") {
    double e = std::exp(1.0);
    std::vector<double> p{e / (1 + e), 1 / (1 + e)};
    auto u = recover_utilities_from_conditionals(p, 1.0);
    REQUIRE(u[0] == Approx(0.5).margin(1e-12));
    REQUIRE(u[1] == Approx(-0.5).margin(1e-12));
  }
  SECTION("round-trips centered utilities at machine precision") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      int k = 2 + rng.uniform_int(6);
      double beta = rng.uniform(0.5, 4.0);
      std::vector<double> u(static_cast<std::size_t>(k));
      double mean = 0.0;
      for (double& v : u) mean += (v = rng.uniform(-2.0, 2.0));
      mean /= k;
      for (double& v : u) v -= mean;  // center
      auto back = recover_utilities_from_conditionals(logit_response(u, beta), beta);
      for (int a = 0; a < k; ++a)
        REQUIRE(back[std::size_t(a)] == Approx(u[std::size_t(a)]).margin(1e-12));
    }
  }
  SECTION("support violations are domain errors") {
    std::vector<double> p{1.0, 0.0};
    REQUIRE_THROWS_AS(recover_utilities_from_conditionals(p, 1.0), std::domain_error);
  }
}

TEST_CASE("empirical frequencies converge to the true utilities") {
  // N = 1e5 draws from the conditional logit at beta=2, k=3; the recovery
  // oracle applied to frequencies lands within 0.02 in the 5-seed median.
  std::vector<double> u{0.6, -0.1, -0.5};
  const double beta = 2.0;
  auto p = logit_response(u, beta);

  std::vector<double> errs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    std::vector<long long> counts(3, 0);
    const int draws = 100000;
    for (int s = 0; s < draws; ++s) ++counts[std::size_t(rng.categorical(p))];
    std::vector<double> freq(3);
    for (int a = 0; a < 3; ++a) freq[std::size_t(a)] = double(counts[std::size_t(a)]) / draws;
    auto back = recover_utilities_from_conditionals(freq, beta);
    double err = 0.0;
    for (int a = 0; a < 3; ++a)
      err = std::max(err, std::abs(back[std::size_t(a)] - u[std::size_t(a)]));
    errs.push_back(err);
  }
  std::sort(errs.begin(), errs.end());
  REQUIRE(errs[2] <= 0.02);  // median of 5
}

TEST_CASE("diff_mse is zero for equal and gauge-shifted mechanisms") {
  GameShape shape{2, 3};
  Mechanism truth = random_tabular(shape, 7);

  Rng rng(5);
  auto contexts = enumerate_contexts(shape);
  REQUIRE(diff_mse(truth, truth, contexts, 0, rng) == 0.0);

  // shift each (agent, opponent-profile) block by a constant
  std::vector<double> shifted = truth.params()[0].values;
  Rng shift_rng(6);
  std::vector<std::vector<double>> c(2, std::vector<double>(3));
  for (auto& row : c)
    for (auto& v : row) v = shift_rng.uniform(-2.0, 2.0);
  for (std::size_t row = 0; row < 9; ++row) {
    JointAction a = joint_from_index(shape, row);
    shifted[row * 2 + 0] += c[0][std::size_t(a[1])];
    shifted[row * 2 + 1] += c[1][std::size_t(a[0])];
  }
  Mechanism est = Mechanism::tabular(shape, shifted);
  REQUIRE(diff_mse(truth, est, contexts, 0, rng) <= 1e-12);
}

TEST_CASE("diff_mse of a doubled mechanism equals the mean squared difference") {
  GameShape shape{2, 3};
  Mechanism truth = random_tabular(shape, 17);
  std::vector<double> doubled = truth.params()[0].values;
  for (double& v : doubled) v *= 2.0;
  Mechanism est = Mechanism::tabular(shape, doubled);

  auto contexts = enumerate_contexts(shape);
  Rng rng(9);
  double metric = diff_mse(truth, est, contexts, 0, rng);

  // independent brute force over all contexts and ordered pairs
  double acc = 0.0;
  long count = 0;
  for (int agent = 0; agent < 2; ++agent) {
    for (int other = 0; other < 3; ++other) {
      for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
          JointAction ja(2), jb(2);
          ja[std::size_t(agent)] = a;
          jb[std::size_t(agent)] = b;
          ja[std::size_t(1 - agent)] = other;
          jb[std::size_t(1 - agent)] = other;
          double d = truth.payoff(ja)[std::size_t(agent)] - truth.payoff(jb)[std::size_t(agent)];
          acc += d * d;  // (d - 2d)^2
          ++count;
        }
      }
    }
  }
  REQUIRE(metric == Approx(acc / double(count)).margin(1e-12));
}

TEST_CASE("sampled contexts come from the held-out data") {
  Mechanism m = random_tabular({3, 4}, 21);
  auto trajs = simulate(m, {0.1, 3.0, 0.05}, 30, 4, 11);
  Rng rng(2);
  auto contexts = sample_contexts(trajs, 64, rng);
  REQUIRE(contexts.size() == 64);
  for (const auto& ctx : contexts) {
    REQUIRE(ctx.trajectory >= 0);
    REQUIRE(ctx.trajectory < 4);
    REQUIRE(ctx.step >= 0);
    REQUIRE(ctx.step < 30);
    const JointAction& src = trajs[std::size_t(ctx.trajectory)].actions[std::size_t(ctx.step)];
    ContextSample expect = context_from_joint(src, ctx.agent);
    REQUIRE(ctx.others == expect.others);
  }
}

TEST_CASE("empirical distributions") {
  SECTION("constant trajectory concentrates on one key") {
    Trajectory traj;
    traj.meta.shape = {2, 3};
    traj.actions.assign(25, JointAction{1, 2});
    auto dist = empirical_joint_distribution({&traj, 1}, KeyMode::ExactJoint);
    REQUIRE(dist.counts.size() == 1);
    REQUIRE(dist.counts.at({1, 2}) == 25);
    REQUIRE(dist.total == 25);
  }
  SECTION("count keys ignore agent order") {
    Trajectory a, b;
    a.meta.shape = b.meta.shape = {3, 2};
    a.actions = {{0, 0, 1}, {1, 0, 1}};
    b.actions = {{1, 0, 0}, {1, 1, 0}};  // per-step permutations of a
    auto da = empirical_joint_distribution({&a, 1}, KeyMode::CountKey);
    auto db = empirical_joint_distribution({&b, 1}, KeyMode::CountKey);
    REQUIRE(da.counts == db.counts);
  }
  SECTION("full enumeration is uniform under exact-joint keys") {
    GameShape shape{2, 3};
    Trajectory traj;
    traj.meta.shape = shape;
    for (std::size_t r = 0; r < 9; ++r) traj.actions.push_back(joint_from_index(shape, r));
    auto dist = empirical_joint_distribution({&traj, 1}, KeyMode::ExactJoint);
    REQUIRE(dist.counts.size() == 9);
    for (const auto& [key, c] : dist.counts) REQUIRE(c == 1);
  }
}

TEST_CASE("KL divergence properties") {
  SECTION("identical distributions give zero") {
    EmpiricalDistribution p;
    p.add({0, 1});
    p.add({0, 1});
    p.add({1, 0});
    REQUIRE(kl_divergence(p, p) == Approx(0.0).margin(1e-15));
  }
  SECTION("non-negative on random count maps") {
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
      EmpiricalDistribution p, q;
      int keys = 2 + rng.uniform_int(6);
      for (int key = 0; key < keys; ++key) {
        for (int c = rng.uniform_int(5); c > 0; --c) p.add({key});
        for (int c = rng.uniform_int(5); c > 0; --c) q.add({key});
      }
      p.add({99});  // ensure non-empty and partly disjoint support
      q.add({98});
      REQUIRE(kl_divergence(p, q) >= 0.0);
    }
  }
}

TEST_CASE("counterfactual KL under learner interventions") {
  GameShape shape{2, 2};
  Mechanism truth = random_tabular(shape, 41);
  LearnerParams intervened{0.2, 1.5, 0.1};

  SECTION("same mechanism, same seed is exactly zero") {
    REQUIRE(cfkl_params(truth, truth, intervened, 32, 50, KeyMode::ExactJoint, 5) == 0.0);
  }
  SECTION("same mechanism, different seeds is within sampling noise") {
    auto rolls_a = simulate(truth, intervened, 100, 1000, 71);
    auto rolls_b = simulate(truth, intervened, 100, 1000, 72);
    auto p = empirical_joint_distribution(rolls_a, KeyMode::ExactJoint);
    auto q = empirical_joint_distribution(rolls_b, KeyMode::ExactJoint);
    REQUIRE(kl_divergence(p, q) <= 0.01);  // R*T = 1e5 samples on a 2x2 game
  }
  SECTION("negating one agent's payoffs moves the distribution far") {
    GameShape s2{2, 2};
    std::vector<double> table{1.0, 0.4, -0.2, 1.1, 0.8, -0.9, -1.0, 0.3};
    Mechanism t2 = Mechanism::tabular(s2, table);
    std::vector<double> negated = table;
    for (std::size_t row = 0; row < 4; ++row) negated[row * 2] = -negated[row * 2];
    Mechanism est = Mechanism::tabular(s2, negated);
    double kl = cfkl_params(t2, est, {0.2, 5.0, 0.1}, 200, 100, KeyMode::ExactJoint, 6);
    REQUIRE(kl > 0.5);
  }
  SECTION("exact-joint refuses infeasible spaces and count-key handles them") {
    Mechanism big_truth = Mechanism::count_neural({40, 10}, {8}, 3);
    Mechanism big_est = Mechanism::count_neural({40, 10}, {8}, 4);
    REQUIRE_THROWS_AS(
        cfkl_params(big_truth, big_est, intervened, 2, 10, KeyMode::ExactJoint, 7),
        infeasible_error);
    double kl = cfkl_params(big_truth, big_est, intervened, 2, 10, KeyMode::CountKey, 7);
    REQUIRE(std::isfinite(kl));
    REQUIRE(kl >= 0.0);
  }
}
