#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "diml/autodiff.hpp"
#include "diml/dynamics.hpp"
#include "diml/mechanisms.hpp"

namespace diml {

struct LikelihoodConfig {
  enum class QInit { Zeros, Learnable };

  LearnerParams params;          // inference-side learner; may differ from the generator
  QInit q_init = QInit::Zeros;
  int truncation = 0;            // K: gradient flow through Q is cut every K steps; 0 = none
  double lambda_budget = 1e-3;   // weight on E[(sum_i r_i)^2] over visited actions
  double lambda_magnitude = 1e-4;  // weight on mean r^2; pins the payoff scale

  void validate(int horizon) const {
    params.validate();
    if (lambda_budget < 0.0 || lambda_magnitude < 0.0)
      throw std::invalid_argument("LikelihoodConfig: regularizer weights must be >= 0");
    if (truncation != 0 && (truncation < 1 || truncation > horizon - 1))
      throw std::invalid_argument("LikelihoodConfig: truncation K must be 0 or in [1, T-1], got " +
                                  std::to_string(truncation));
  }
};

// U(t): entry (i, a) imputes the payoff agent i would have received playing a
// against the opponents' realized actions at step t.
struct CounterfactualTensor {
  Tensor values;  // n x k
  int step = 0;
};

// One batched mechanism forward per agent; exactly n*k coordinate evaluations.
inline CounterfactualTensor build_counterfactual_tensor(MechanismBinding& binding,
                                                        const JointAction& a_obs, int step = 0) {
  const GameShape& shape = binding.mechanism().shape();
  Tape& tape = binding.tape();
  std::vector<Tensor> rows;
  rows.reserve(std::size_t(shape.n));
  for (int i = 0; i < shape.n; ++i) rows.push_back(binding.counterfactual_row(i, a_obs));
  Tensor flat = tape.concat(rows);
  return {tape.reshape(flat, {shape.n, shape.k}), step};
}

// Optional trainable blocks threaded through the unroll.
struct UnrollExtras {
  Tensor q_init;  // n x k scores at t = 1
  Tensor beta;    // 1-element inverse temperature (already positivity-transformed)
  bool has_q_init = false;
  bool has_beta = false;
};

struct TrajectoryTerms {
  Tensor nll;        // scalar negative log-likelihood, steps 2..T
  Tensor budget_sq;  // sum over steps of (sum_i r_i)^2 at realized actions
  Tensor mag_sq;     // sum over steps and agents of r_i^2 at realized actions
  int steps = 0;     // T - 1
};

// Unrolls the logit-Q recursion over the observed actions and scores each
// next joint action under the induced policy. The first observed action is
// conditioned on, never predicted. Realized payoffs for the regularizers are
// read back out of the counterfactual tensors, so the mechanism evaluation
// count stays exactly (T-1)*n*k coordinates.
inline TrajectoryTerms trajectory_terms(MechanismBinding& binding, const Trajectory& traj,
                                        const LikelihoodConfig& cfg,
                                        const UnrollExtras* extras = nullptr) {
  const GameShape& shape = binding.mechanism().shape();
  if (shape != traj.meta.shape)
    throw std::invalid_argument("trajectory/mechanism shape mismatch: n=" +
                                std::to_string(shape.n) + ",k=" + std::to_string(shape.k) +
                                " vs n=" + std::to_string(traj.meta.shape.n) +
                                ",k=" + std::to_string(traj.meta.shape.k));
  const int horizon = traj.horizon();
  if (horizon < 2) throw std::invalid_argument("trajectory_terms: need T >= 2");
  cfg.validate(horizon);
  if (cfg.q_init == LikelihoodConfig::QInit::Learnable &&
      !(extras != nullptr && extras->has_q_init))
    throw std::invalid_argument("trajectory_terms: learnable q_init requires mounted extras");

  Tape& tape = binding.tape();
  const int n = shape.n, k = shape.k;
  const double alpha = cfg.params.alpha;
  const double eps = cfg.params.eps;

  Tensor q = (extras != nullptr && extras->has_q_init) ? extras->q_init : tape.zeros({n, k});
  Tensor loglik = tape.scalar_const(0.0);
  Tensor budget = tape.scalar_const(0.0);
  Tensor magnitude = tape.scalar_const(0.0);

  std::vector<int> realized_idx(static_cast<std::size_t>(n));
  std::vector<int> next_idx(static_cast<std::size_t>(n));
  for (int t = 1; t < horizon; ++t) {
    const JointAction& a_prev = traj.actions[std::size_t(t - 1)];
    const JointAction& a_next = traj.actions[std::size_t(t)];

    if (cfg.truncation > 0 && t > 1 && (t - 1) % cfg.truncation == 0) q = tape.detach(q);

    CounterfactualTensor u = build_counterfactual_tensor(binding, a_prev, t);
    q = tape.add(tape.scale(q, 1.0 - alpha), tape.scale(u.values, alpha));

    Tensor scores = (extras != nullptr && extras->has_beta)
                        ? tape.scale_by(q, extras->beta)
                        : tape.scale(q, cfg.params.beta);
    Tensor policy =
        tape.add_scalar(tape.scale(tape.softmax_rows(scores), 1.0 - eps), eps / double(k));

    for (int i = 0; i < n; ++i) {
      next_idx[std::size_t(i)] = i * k + a_next[std::size_t(i)];
      realized_idx[std::size_t(i)] = i * k + a_prev[std::size_t(i)];
    }
    Tensor chosen = tape.take(policy, next_idx);
    for (std::size_t i = 0; i < chosen.values().size(); ++i) {
      if (!(chosen.values()[i] > 0.0))
        throw numeric_error("zero model probability at step " + std::to_string(t + 1) +
                            " for agent " + std::to_string(i) +
                            "; the inference eps must be > 0 to cover off-model actions");
    }
    loglik = tape.add(loglik, tape.sum(tape.log(chosen)));

    Tensor realized = tape.take(u.values, realized_idx);
    budget = tape.add(budget, tape.square(tape.sum(realized)));
    magnitude = tape.add(magnitude, tape.sum(tape.square(realized)));
  }

  return {tape.scale(loglik, -1.0), budget, magnitude, horizon - 1};
}

inline Tensor trajectory_nll(MechanismBinding& binding, const Trajectory& traj,
                             const LikelihoodConfig& cfg, const UnrollExtras* extras = nullptr) {
  return trajectory_terms(binding, traj, cfg, extras).nll;
}

// Sum of trajectory NLLs plus the mechanism-structure regularizers taken
// over the joint actions visited by the minibatch.
inline Tensor dataset_objective(MechanismBinding& binding, std::span<const Trajectory> batch,
                                const LikelihoodConfig& cfg,
                                const UnrollExtras* extras = nullptr) {
  if (batch.empty()) throw std::invalid_argument("dataset_objective: empty minibatch");
  Tape& tape = binding.tape();
  const int n = binding.mechanism().shape().n;

  Tensor nll = tape.scalar_const(0.0);
  Tensor budget = tape.scalar_const(0.0);
  Tensor magnitude = tape.scalar_const(0.0);
  long total_steps = 0;
  for (const Trajectory& traj : batch) {
    TrajectoryTerms terms = trajectory_terms(binding, traj, cfg, extras);
    nll = tape.add(nll, terms.nll);
    budget = tape.add(budget, terms.budget_sq);
    magnitude = tape.add(magnitude, terms.mag_sq);
    total_steps += terms.steps;
  }
  Tensor objective = nll;
  objective = tape.add(objective, tape.scale(budget, cfg.lambda_budget / double(total_steps)));
  objective = tape.add(
      objective, tape.scale(magnitude, cfg.lambda_magnitude / double(total_steps * n)));
  return objective;
}

// Plain-arithmetic evaluation of the same NLL; no tape, used by metric
// evaluation on held-out data. Agrees with the tape path to float rounding.
// q_init, when given, seeds the recursion (flattened n x k).
inline double trajectory_nll_value(const Mechanism& mech, const Trajectory& traj,
                                   const LikelihoodConfig& cfg,
                                   const std::vector<double>* q_init = nullptr) {
  const GameShape& shape = mech.shape();
  if (shape != traj.meta.shape)
    throw std::invalid_argument("trajectory/mechanism shape mismatch");
  const int horizon = traj.horizon();
  cfg.validate(horizon);

  const int n = shape.n, k = shape.k;
  std::vector<double> q(std::size_t(n) * k, 0.0);
  if (q_init != nullptr) {
    if (q_init->size() != q.size())
      throw std::invalid_argument("trajectory_nll_value: q_init size mismatch");
    q = *q_init;
  }
  std::vector<double> u(static_cast<std::size_t>(k));
  std::vector<double> pi(static_cast<std::size_t>(k));
  double nll = 0.0;
  for (int t = 1; t < horizon; ++t) {
    const JointAction& a_prev = traj.actions[std::size_t(t - 1)];
    const JointAction& a_next = traj.actions[std::size_t(t)];
    for (int i = 0; i < n; ++i) {
      mech.counterfactual_row(i, a_prev, u);
      q_update({q.data() + std::size_t(i) * k, std::size_t(k)}, u, cfg.params.alpha);
    }
    for (int i = 0; i < n; ++i) {
      policy_from_q({q.data() + std::size_t(i) * k, std::size_t(k)}, cfg.params, pi);
      double p = pi[std::size_t(a_next[std::size_t(i)])];
      if (!(p > 0.0))
        throw numeric_error("zero model probability at step " + std::to_string(t + 1) +
                            " for agent " + std::to_string(i) +
                            "; the inference eps must be > 0 to cover off-model actions");
      nll -= std::log(p);
    }
  }
  return nll;
}

}  // namespace diml
