#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "diml/common.hpp"
#include "diml/dynamics.hpp"
#include "diml/mechanisms.hpp"
#include "diml/rng.hpp"

namespace diml {

// Inverts the conditional logit response: u_a = log(p_a) / beta, centered so
// the entries sum to zero. Pairwise differences come out exactly as
// (log p_a - log p_a') / beta; the centering is the zero-sum gauge fix.
inline std::vector<double> recover_utilities_from_conditionals(std::span<const double> p,
                                                               double beta) {
  if (!(beta > 0.0))
    throw std::invalid_argument("recover_utilities: beta must be > 0, got " +
                                std::to_string(beta));
  if (p.empty()) throw std::invalid_argument("recover_utilities: empty distribution");
  std::vector<double> u(p.size());
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (!(p[a] > 0.0))
      throw std::domain_error("recover_utilities: probability " + std::to_string(p[a]) +
                              " at action " + std::to_string(a) +
                              " violates the positive-support requirement");
    u[a] = std::log(p[a]) / beta;
  }
  double mean = 0.0;
  for (double v : u) mean += v;
  mean /= double(u.size());
  for (double& v : u) v -= mean;
  return u;
}

// An (agent, opponent-profile) evaluation context, tagged with where in the
// held-out data it was sampled.
struct ContextSample {
  int agent = 0;
  std::vector<int> others;  // length n-1, agent's own slot removed
  int trajectory = -1;
  int step = -1;
};

inline JointAction context_joint(const ContextSample& ctx, int own_action) {
  JointAction a;
  a.reserve(ctx.others.size() + 1);
  a.insert(a.end(), ctx.others.begin(), ctx.others.begin() + ctx.agent);
  a.push_back(own_action);
  a.insert(a.end(), ctx.others.begin() + ctx.agent, ctx.others.end());
  return a;
}

inline ContextSample context_from_joint(const JointAction& a, int agent, int trajectory = -1,
                                        int step = -1) {
  ContextSample ctx;
  ctx.agent = agent;
  ctx.trajectory = trajectory;
  ctx.step = step;
  ctx.others.reserve(a.size() - 1);
  for (std::size_t j = 0; j < a.size(); ++j)
    if (int(j) != agent) ctx.others.push_back(a[j]);
  return ctx;
}

// Uniformly sampled agent-time contexts from held-out trajectories.
inline std::vector<ContextSample> sample_contexts(std::span<const Trajectory> data, int count,
                                                  Rng& rng) {
  if (data.empty()) throw std::invalid_argument("sample_contexts: no trajectories");
  std::vector<ContextSample> out;
  out.reserve(std::size_t(count));
  for (int s = 0; s < count; ++s) {
    int ti = rng.uniform_int(int(data.size()));
    const Trajectory& traj = data[std::size_t(ti)];
    int step = rng.uniform_int(traj.horizon());
    int agent = rng.uniform_int(traj.meta.shape.n);
    out.push_back(context_from_joint(traj.actions[std::size_t(step)], agent, ti, step));
  }
  return out;
}

// Every (agent, opponent profile) pair of a small game; exhaustive oracle
// counterpart of sample_contexts.
inline std::vector<ContextSample> enumerate_contexts(GameShape shape) {
  GameShape others{shape.n - 1, shape.k};
  std::vector<ContextSample> out;
  if (shape.n < 2) {
    for (int i = 0; i < shape.n; ++i) out.push_back({i, {}, -1, -1});
    return out;
  }
  std::size_t profiles = joint_count_capped(others, default_tabulate_cap);
  if (profiles > default_tabulate_cap)
    throw infeasible_error("enumerate_contexts: profile space too large");
  for (int i = 0; i < shape.n; ++i) {
    for (std::size_t r = 0; r < profiles; ++r) {
      ContextSample ctx;
      ctx.agent = i;
      JointAction prof = joint_from_index(others, r);
      ctx.others.assign(prof.begin(), prof.end());
      out.push_back(std::move(ctx));
    }
  }
  return out;
}

// Mean squared error between true and estimated payoff differences over
// contexts and own-action pairs. pairs_per_context = 0 enumerates all k^2
// ordered pairs; otherwise pairs are drawn uniformly with replacement.
inline double diff_mse(const Mechanism& truth, const Mechanism& est,
                       std::span<const ContextSample> contexts, int pairs_per_context,
                       Rng& rng) {
  if (truth.shape() != est.shape())
    throw std::invalid_argument("diff_mse: mechanisms have different shapes");
  if (contexts.empty()) throw std::invalid_argument("diff_mse: no contexts given");
  const int k = truth.shape().k;

  double acc = 0.0;
  long count = 0;
  std::vector<double> u_truth(static_cast<std::size_t>(k));
  std::vector<double> u_est(static_cast<std::size_t>(k));
  for (const ContextSample& ctx : contexts) {
    JointAction probe = context_joint(ctx, 0);
    truth.counterfactual_row(ctx.agent, probe, u_truth);
    est.counterfactual_row(ctx.agent, probe, u_est);
    auto accumulate = [&](int a, int b) {
      double d_truth = u_truth[std::size_t(a)] - u_truth[std::size_t(b)];
      double d_est = u_est[std::size_t(a)] - u_est[std::size_t(b)];
      double e = d_truth - d_est;
      acc += e * e;
      ++count;
    };
    if (pairs_per_context <= 0) {
      for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) accumulate(a, b);
    } else {
      for (int s = 0; s < pairs_per_context; ++s)
        accumulate(rng.uniform_int(k), rng.uniform_int(k));
    }
  }
  return acc / double(count);
}

enum class KeyMode { ExactJoint, CountKey };

inline const char* key_mode_name(KeyMode m) {
  return m == KeyMode::ExactJoint ? "exact-joint" : "count-key";
}

inline KeyMode key_mode_from_name(const std::string& s) {
  if (s == "exact-joint") return KeyMode::ExactJoint;
  if (s == "count-key") return KeyMode::CountKey;
  throw config_error("unknown cfkl mode: " + s + " (use exact-joint or count-key)");
}

// Action-count vector over the k actions; canonical under agent anonymity.
inline std::vector<int> count_key(const JointAction& a, int k) {
  std::vector<int> key(std::size_t(k), 0);
  for (int v : a) key[std::size_t(v)]++;
  return key;
}

struct EmpiricalDistribution {
  std::map<std::vector<int>, long long> counts;
  long long total = 0;
  double pseudo = 1.0;  // add-one smoothing weight used by kl_divergence

  void add(std::vector<int> key) {
    ++counts[std::move(key)];
    ++total;
  }
};

// One sample per (trajectory, step); deterministic keying.
inline EmpiricalDistribution empirical_joint_distribution(std::span<const Trajectory> data,
                                                          KeyMode mode) {
  EmpiricalDistribution dist;
  for (const Trajectory& traj : data) {
    for (const JointAction& a : traj.actions) {
      if (mode == KeyMode::ExactJoint)
        dist.add(a);
      else
        dist.add(count_key(a, traj.meta.shape.k));
    }
  }
  return dist;
}

// KL(p || q) with pseudo-count smoothing over the union of observed keys;
// both smoothed estimates are proper distributions, so the result is
// non-negative and finite even when the supports differ.
inline double kl_divergence(const EmpiricalDistribution& p, const EmpiricalDistribution& q) {
  if (p.total <= 0 || q.total <= 0)
    throw std::invalid_argument("kl_divergence: empty distribution");
  std::map<std::vector<int>, std::pair<long long, long long>> joint;
  for (const auto& [key, c] : p.counts) joint[key].first = c;
  for (const auto& [key, c] : q.counts) joint[key].second = c;

  const double support = double(joint.size());
  const double pn = double(p.total) + p.pseudo * support;
  const double qn = double(q.total) + q.pseudo * support;
  double kl = 0.0;
  for (const auto& [key, c] : joint) {
    double ph = (double(c.first) + p.pseudo) / pn;
    double qh = (double(c.second) + q.pseudo) / qn;
    kl += ph * std::log(ph / qh);
  }
  return kl;
}

// Counterfactual validity under a learner intervention: roll out both
// mechanisms with the intervened parameters and compare the induced
// distributions. Exact-joint keys need an enumerable joint space; count-key
// mode is the large-scale anonymous-game path.
inline double cfkl_params(const Mechanism& truth, const Mechanism& est,
                          const LearnerParams& intervened, int rollouts, int horizon,
                          KeyMode mode, std::uint64_t seed, int workers = 1,
                          std::size_t exact_cap = default_tabulate_cap) {
  if (truth.shape() != est.shape())
    throw std::invalid_argument("cfkl_params: mechanisms have different shapes");
  if (mode == KeyMode::ExactJoint &&
      joint_count_capped(truth.shape(), exact_cap) > exact_cap)
    throw infeasible_error(
        "cfkl_params: exact-joint keys need k^n <= " + std::to_string(exact_cap) +
        "; use count-key mode for large anonymous games");

  auto roll_truth = simulate(truth, intervened, horizon, rollouts, seed, workers);
  auto roll_est = simulate(est, intervened, horizon, rollouts, seed, workers);
  EmpiricalDistribution p = empirical_joint_distribution(roll_truth, mode);
  EmpiricalDistribution q = empirical_joint_distribution(roll_est, mode);
  if (p.counts == q.counts) return 0.0;  // identical rollouts, exactly zero
  return kl_divergence(p, q);
}

}  // namespace diml
