#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "diml/estimators.hpp"
#include "diml/metrics.hpp"

namespace diml {

struct CheckLine {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool less_is_pass = true;

  bool passed() const { return less_is_pass ? value <= threshold : value >= threshold; }
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace detail

// Finite-difference audit of d(dataset_objective)/d(theta) on a (n=2, k=2,
// T=10) instance: 10 random parameter points per mechanism family, every
// coordinate checked, h = 1e-4, tolerance 1e-4.
inline std::vector<CheckLine> grad_check_suite(int points_per_family = 10) {
  const GameShape shape{2, 2};
  const LearnerParams gen{0.2, 2.0, 0.1};
  Rng data_rng(90210);
  std::vector<double> table(8);
  for (double& v : table) v = data_rng.normal();
  Mechanism truth = Mechanism::tabular(shape, table);
  auto data = simulate(truth, gen, 10, 2, 4242);

  LikelihoodConfig cfg;
  cfg.params = gen;

  std::vector<CheckLine> lines;
  auto family = [&](const char* name, auto&& make) {
    double worst = 0.0;
    for (int point = 0; point < points_per_family; ++point) {
      Mechanism mech = make(std::uint64_t(1000 + point));
      auto report = objective_grad_check(mech, data, cfg, 1e-4);
      worst = std::max(worst, report.max_rel_error);
    }
    lines.push_back({std::string("grad/") + name, worst, 1e-4, true});
  };

  family("tabular", [&](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> t(8);
    for (double& v : t) v = rng.normal();
    return Mechanism::tabular(shape, t);
  });
  family("congestion", [&](std::uint64_t seed) {
    Rng rng(seed);
    return Mechanism::congestion(shape, {rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)},
                                 rng.uniform(0.1, 0.8));
  });
  family("public-goods", [&](std::uint64_t seed) {
    Rng rng(seed);
    return Mechanism::public_goods(shape, rng.uniform(0.5, 3.0), rng.uniform(0.3, 1.5));
  });
  family("neural", [&](std::uint64_t seed) { return Mechanism::neural(shape, {8, 8}, seed); });
  family("count-neural",
         [&](std::uint64_t seed) { return Mechanism::count_neural(shape, {8, 8}, seed); });
  return lines;
}

// Executable identifiability results: exact and empirical inversion of the
// conditional logit response, and the MLE consistency trend for the tabular
// estimator on a fixed small game.
inline std::vector<CheckLine> theorem1_check_suite() {
  std::vector<CheckLine> lines;

  // exact logit probabilities reproduce centered utilities
  {
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 25; ++trial) {
      int k = 2 + rng.uniform_int(5);
      double beta = rng.uniform(0.5, 4.0);
      std::vector<double> u(static_cast<std::size_t>(k));
      double mean = 0.0;
      for (double& v : u) mean += (v = rng.uniform(-2.0, 2.0));
      mean /= k;
      for (double& v : u) v -= mean;

      double mx = -1e300;
      for (double v : u) mx = std::max(mx, beta * v);
      std::vector<double> p(u.size());
      double z = 0.0;
      for (std::size_t a = 0; a < u.size(); ++a) z += (p[a] = std::exp(beta * u[a] - mx));
      for (double& v : p) v /= z;

      auto back = recover_utilities_from_conditionals(p, beta);
      for (std::size_t a = 0; a < u.size(); ++a)
        worst = std::max(worst, std::abs(back[a] - u[a]));
    }
    lines.push_back({"theorem1/exact-recovery", worst, 1e-12, true});
  }

  // empirical frequencies at N=1e5, beta=2, k=3: median error over 5 seeds
  {
    const std::vector<double> u{0.6, -0.1, -0.5};
    const double beta = 2.0;
    double mx = -1e300;
    for (double v : u) mx = std::max(mx, beta * v);
    std::vector<double> p(u.size());
    double z = 0.0;
    for (std::size_t a = 0; a < u.size(); ++a) z += (p[a] = std::exp(beta * u[a] - mx));
    for (double& v : p) v /= z;

    std::vector<double> errs;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed);
      std::vector<double> freq(3, 0.0);
      const int draws = 100000;
      for (int s = 0; s < draws; ++s) freq[std::size_t(rng.categorical(p))] += 1.0;
      for (double& f : freq) f /= draws;
      auto back = recover_utilities_from_conditionals(freq, beta);
      double err = 0.0;
      for (std::size_t a = 0; a < u.size(); ++a)
        err = std::max(err, std::abs(back[a] - u[a]));
      errs.push_back(err);
    }
    lines.push_back({"theorem1/empirical-1e5", detail::median_of(errs), 0.02, true});
  }
  return lines;
}

struct ConsistencyTrend {
  std::vector<int> dataset_sizes{10, 50, 250};
  std::vector<double> median_final;  // diff_mse after fitting, per M
  double median_initial_largest = 0.0;

  bool strictly_decreasing() const {
    for (std::size_t i = 1; i < median_final.size(); ++i)
      if (!(median_final[i] < median_final[i - 1])) return false;
    return true;
  }
};

// Tabular MLE on a fixed (n=2, k=3) game, T=200, M in {10,50,250}, 5 seeds.
inline ConsistencyTrend theorem2_consistency_trend(int seeds = 5, int workers = 1) {
  const GameShape shape{2, 3};
  const LearnerParams gen{0.1, 3.0, 0.05};
  Rng truth_rng(515151);
  std::vector<double> table(18);
  for (double& v : table) v = truth_rng.normal();
  Mechanism truth = Mechanism::tabular(shape, table);
  auto contexts = enumerate_contexts(shape);

  ConsistencyTrend trend;
  std::vector<double> init_largest;
  for (int mi = 0; mi < int(trend.dataset_sizes.size()); ++mi) {
    int m_count = trend.dataset_sizes[std::size_t(mi)];
    std::vector<double> finals;
    for (int s = 0; s < seeds; ++s) {
      auto data =
          simulate(truth, gen, 200, m_count, 600000 + std::uint64_t(s) * 17, workers);

      TrainConfig cfg;
      cfg.learning_rate = 1e-2;
      cfg.epochs = 150;
      cfg.minibatch = 16;
      cfg.eval_interval = 150;
      cfg.seed = 7000 + std::uint64_t(s);
      cfg.workers = workers;
      cfg.likelihood.params = gen;

      Rng unused(0);
      FitResult fit = fit_tabular_mle(data, {}, cfg);
      finals.push_back(diff_mse(truth, fit.mechanism, contexts, 0, unused));
      if (mi == int(trend.dataset_sizes.size()) - 1) {
        Rng init_stream = Rng::stream(cfg.seed, 105);  // same stream fit_tabular_mle uses
        std::vector<double> t0(18);
        for (double& v : t0) v = init_stream.normal(0.0, 0.1);
        Mechanism init_mech = Mechanism::tabular(shape, t0);
        init_largest.push_back(diff_mse(truth, init_mech, contexts, 0, unused));
      }
    }
    trend.median_final.push_back(detail::median_of(finals));
  }
  trend.median_initial_largest = detail::median_of(init_largest);
  return trend;
}

inline std::vector<CheckLine> theory_check_suite(int workers = 1) {
  std::vector<CheckLine> lines = theorem1_check_suite();
  ConsistencyTrend trend = theorem2_consistency_trend(5, workers);
  lines.push_back({"theorem2/strictly-decreasing", trend.strictly_decreasing() ? 1.0 : 0.0, 1.0,
                   false});
  lines.push_back({"theorem2/final-vs-init",
                   trend.median_final.back() / trend.median_initial_largest, 0.05, true});
  return lines;
}

}  // namespace diml
