#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "diml/common.hpp"
#include "diml/likelihood.hpp"
#include "diml/metrics.hpp"

namespace diml {

struct TrainConfig {
  double learning_rate = 1e-3;  // 1e-2 is the structured/tabular preset
  int epochs = 100;
  int minibatch = 8;            // trajectories per gradient step
  LikelihoodConfig likelihood;
  double beta1 = 0.9;           // first/second moment decay pair
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool estimate_beta = false;   // fit beta jointly through exp(rho)
  std::uint64_t seed = 0;
  int eval_interval = 10;       // metric evaluation cadence in epochs
  int workers = 1;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("TrainConfig: learning rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw std::invalid_argument("TrainConfig: moment decays must lie in [0,1)");
    if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
    if (minibatch < 1) throw std::invalid_argument("TrainConfig: minibatch must be >= 1");
    if (eval_interval < 1) throw std::invalid_argument("TrainConfig: eval interval must be >= 1");
  }
};

struct AdamState {
  std::vector<double> m, v;
  long long step = 0;
};

// Bias-corrected adaptive step; deterministic given inputs.
inline void optimizer_step(std::span<double> params, std::span<const double> grads,
                           AdamState& state, const TrainConfig& cfg) {
  if (params.size() != grads.size())
    throw std::invalid_argument("optimizer_step: params/grads size mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (std::size_t j = 0; j < params.size(); ++j) {
    state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * grads[j];
    state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * grads[j] * grads[j];
    double mhat = state.m[j] / c1;
    double vhat = state.v[j] / c2;
    params[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

// How diff_mse / cfkl_params are evaluated along the training curve.
struct MetricSettings {
  LearnerParams intervention{0.2, 1.5, 0.1};
  int cfkl_rollouts = 64;
  int cfkl_horizon = 100;
  KeyMode cfkl_mode = KeyMode::ExactJoint;
  int diff_contexts = 512;
  int diff_pairs = 8;
};

struct EvalRow {
  int epoch = 0;
  double train_nll = 0.0;    // mean per-trajectory NLL on the training set
  double heldout_nll = 0.0;  // mean per-trajectory NLL on held-out data
  double diff_mse = std::numeric_limits<double>::quiet_NaN();
  double cfkl_params = std::numeric_limits<double>::quiet_NaN();
  double wallclock_s = 0.0;  // cumulative training seconds at this evaluation
};

struct FitResult {
  Mechanism mechanism;
  double fitted_beta = 0.0;          // equals the assumed beta unless estimated
  std::vector<double> q_init;        // fitted Q(1) when learnable, else empty
  std::vector<double> loss_history;  // mean per-trajectory objective by epoch
  std::vector<EvalRow> metric_history;
  std::vector<double> epoch_seconds;
};

namespace detail {

// Flat view over everything the optimizer updates: mechanism arrays,
// optional learnable Q(1), optional rho with beta = exp(rho).
struct ParamVector {
  Mechanism* mech = nullptr;
  std::vector<double> q_init;
  std::vector<double> rho;
  bool has_q_init = false;
  bool has_beta = false;

  std::size_t size() const {
    std::size_t s = mech->param_count();
    if (has_q_init) s += q_init.size();
    if (has_beta) s += rho.size();
    return s;
  }

  void gather(std::vector<double>& flat) const {
    flat.clear();
    flat.reserve(size());
    for (const auto& arr : mech->params())
      flat.insert(flat.end(), arr.values.begin(), arr.values.end());
    if (has_q_init) flat.insert(flat.end(), q_init.begin(), q_init.end());
    if (has_beta) flat.insert(flat.end(), rho.begin(), rho.end());
  }

  void scatter(const std::vector<double>& flat) {
    std::size_t off = 0;
    for (auto& arr : mech->params()) {
      std::copy(flat.begin() + long(off), flat.begin() + long(off + arr.values.size()),
                arr.values.begin());
      off += arr.values.size();
    }
    mech->clamp_params();
    if (has_q_init) {
      std::copy(flat.begin() + long(off), flat.begin() + long(off + q_init.size()),
                q_init.begin());
      off += q_init.size();
    }
    if (has_beta) rho[0] = flat[off];
  }

  double beta_value(double fallback) const {
    return has_beta ? std::exp(rho[0]) : fallback;
  }
};

struct TapeMount {
  MechanismBinding binding;
  UnrollExtras extras;

  TapeMount(Mechanism& mech, Tape& tape, const ParamVector& pv, const GameShape& shape)
      : binding(mech, tape) {
    if (pv.has_q_init) {
      extras.q_init = tape.param({shape.n, shape.k}, pv.q_init);
      extras.has_q_init = true;
    }
    if (pv.has_beta) {
      Tensor rho = tape.param({1}, pv.rho);
      extras.beta = tape.exp(rho);
      extras.has_beta = true;
    }
  }

  // Gradient in the same flat layout as ParamVector::gather.
  void append_grads(Tape& tape, std::vector<double>& flat) const {
    for (const Tensor& t : binding.mounted()) {
      auto g = tape.grad(t);
      flat.insert(flat.end(), g.begin(), g.end());
    }
    if (extras.has_q_init) {
      auto g = tape.grad(extras.q_init);
      flat.insert(flat.end(), g.begin(), g.end());
    }
    if (extras.has_beta) {
      // the exp node's parent is the mounted rho param
      const auto& node = tape.node(extras.beta.id);
      auto g = tape.grad(Tensor{&tape, node.parents[0]});
      flat.insert(flat.end(), g.begin(), g.end());
    }
  }
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

}  // namespace detail

// Shared fitting loop behind all four estimators: minibatch unrolled-likelihood
// gradients, one tape per trajectory, deterministic fixed-order reduction.
// truth + metrics are optional; without them diff_mse/cfkl stay NaN.
inline FitResult fit_mechanism(Mechanism mech, std::span<const Trajectory> train,
                               std::span<const Trajectory> heldout, TrainConfig cfg,
                               const Mechanism* truth = nullptr,
                               const MetricSettings* metrics = nullptr) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("fit: no training trajectories");
  const GameShape shape = mech.shape();
  for (const Trajectory& t : train)
    if (t.meta.shape != shape)
      throw std::invalid_argument("fit: template shape (n=" + std::to_string(shape.n) +
                                  ",k=" + std::to_string(shape.k) +
                                  ") does not match the dataset");
  mech.set_trainable(true);

  detail::ParamVector pv;
  pv.mech = &mech;
  if (cfg.likelihood.q_init == LikelihoodConfig::QInit::Learnable) {
    pv.q_init.assign(std::size_t(shape.n) * shape.k, 0.0);
    pv.has_q_init = true;
  }
  if (cfg.estimate_beta) {
    pv.rho.assign(1, std::log(cfg.likelihood.params.beta));
    pv.has_beta = true;
  }

  // fixed metric streams: contexts sampled once, rollout seed reused per eval
  Rng shuffle_rng = Rng::stream(cfg.seed, 101);
  Rng context_rng = Rng::stream(cfg.seed, 102);
  std::uint64_t cfkl_seed = Rng::stream(cfg.seed, 103).next_u64();
  std::vector<ContextSample> contexts;
  if (truth != nullptr && metrics != nullptr && !heldout.empty())
    contexts = sample_contexts(heldout, metrics->diff_contexts, context_rng);

  FitResult result;
  double cumulative_seconds = 0.0;

  auto current_cfg = [&]() {
    LikelihoodConfig c = cfg.likelihood;
    c.params.beta = pv.beta_value(cfg.likelihood.params.beta);
    return c;
  };

  auto mean_nll = [&](std::span<const Trajectory> data) {
    if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
    LikelihoodConfig c = current_cfg();
    std::vector<double> per(data.size());
    parallel_for(data.size(), cfg.workers, [&](std::size_t i) {
      per[i] = trajectory_nll_value(mech, data[i], c, pv.has_q_init ? &pv.q_init : nullptr);
    });
    double acc = 0.0;
    for (double v : per) acc += v;
    return acc / double(data.size());
  };

  auto evaluate = [&](int epoch) {
    EvalRow row;
    row.epoch = epoch;
    row.train_nll = mean_nll(train);
    row.heldout_nll = mean_nll(heldout);
    if (truth != nullptr && metrics != nullptr) {
      if (!contexts.empty()) {
        Rng pair_rng = Rng::stream(cfg.seed, 104);  // same pairs every eval
        row.diff_mse = diff_mse(*truth, mech, contexts, metrics->diff_pairs, pair_rng);
      }
      row.cfkl_params =
          cfkl_params(*truth, mech, metrics->intervention, metrics->cfkl_rollouts,
                      metrics->cfkl_horizon, metrics->cfkl_mode, cfkl_seed, cfg.workers);
    }
    row.wallclock_s = cumulative_seconds;
    result.metric_history.push_back(row);
    return row;
  };

  EvalRow initial = evaluate(0);
  if (cfg.epochs == 0) result.loss_history.push_back(initial.train_nll);

  AdamState adam;
  std::vector<double> flat_params, flat_grads;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);

    double epoch_objective = 0.0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.minibatch)) {
      std::size_t stop = std::min(order.size(), start + std::size_t(cfg.minibatch));
      std::span<const std::size_t> batch(order.data() + start, stop - start);

      long total_steps = 0;
      for (std::size_t i : batch) total_steps += train[i].horizon() - 1;
      const double budget_w = cfg.likelihood.lambda_budget / double(total_steps);
      const double mag_w = cfg.likelihood.lambda_magnitude / double(total_steps * shape.n);

      std::vector<std::vector<double>> grad_slots(batch.size());
      std::vector<double> obj_slots(batch.size());
      parallel_for(batch.size(), cfg.workers, [&](std::size_t bi) {
        Tape tape;
        detail::TapeMount mount(mech, tape, pv, shape);
        TrajectoryTerms terms = trajectory_terms(mount.binding, train[batch[bi]],
                                                 current_cfg(), &mount.extras);
        Tensor obj = tape.add(terms.nll, tape.add(tape.scale(terms.budget_sq, budget_w),
                                                  tape.scale(terms.mag_sq, mag_w)));
        tape.backward(obj);
        obj_slots[bi] = obj.scalar();
        mount.append_grads(tape, grad_slots[bi]);
      });

      pv.gather(flat_params);
      flat_grads.assign(flat_params.size(), 0.0);
      for (std::size_t bi = 0; bi < batch.size(); ++bi) {  // fixed-order reduction
        epoch_objective += obj_slots[bi];
        for (std::size_t j = 0; j < flat_grads.size(); ++j)
          flat_grads[j] += grad_slots[bi][j];
      }
      if (!std::isfinite(epoch_objective))
        throw numeric_error("fit: non-finite objective at epoch " + std::to_string(epoch));
      optimizer_step(flat_params, flat_grads, adam, cfg);
      pv.scatter(flat_params);
    }
    result.loss_history.push_back(epoch_objective / double(train.size()));

    auto t1 = std::chrono::steady_clock::now();
    double secs = std::chrono::duration<double>(t1 - t0).count();
    result.epoch_seconds.push_back(secs);
    cumulative_seconds += secs;

    if (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs) evaluate(epoch);
  }

  result.mechanism = std::move(mech);
  result.fitted_beta = pv.beta_value(cfg.likelihood.params.beta);
  if (pv.has_q_init) result.q_init = pv.q_init;
  return result;
}

// DIML: neural or count-neural template trained through the unrolled dynamics.
inline FitResult fit_diml(std::span<const Trajectory> train, std::span<const Trajectory> heldout,
                          Mechanism template_mech, const TrainConfig& cfg,
                          const Mechanism* truth = nullptr,
                          const MetricSettings* metrics = nullptr) {
  if (template_mech.kind() != MechanismKind::Neural &&
      template_mech.kind() != MechanismKind::CountNeural)
    throw std::invalid_argument("fit_diml: template must be neural or count-neural");
  return fit_mechanism(std::move(template_mech), train, heldout, cfg, truth, metrics);
}

// Expressivity oracle: free k^n x n table under the same dynamics. Refuses
// shapes whose joint space cannot be enumerated.
inline FitResult fit_tabular_mle(std::span<const Trajectory> train,
                                 std::span<const Trajectory> heldout, const TrainConfig& cfg,
                                 const Mechanism* truth = nullptr,
                                 const MetricSettings* metrics = nullptr,
                                 std::size_t cap = default_tabulate_cap) {
  if (train.empty()) throw std::invalid_argument("fit_tabular_mle: no training trajectories");
  const GameShape shape = train[0].meta.shape;
  std::size_t rows = joint_count_capped(shape, cap);
  if (rows > cap)
    throw infeasible_error("fit_tabular_mle: joint action space k^n = " +
                           std::to_string(shape.k) + "^" + std::to_string(shape.n) +
                           " exceeds the tabulation cap of " + std::to_string(cap) +
                           " entries; the tabular baseline is infeasible at this scale");
  Rng init = Rng::stream(cfg.seed, 105);
  std::vector<double> table(rows * std::size_t(shape.n));
  for (double& v : table) v = init.normal(0.0, 0.1);
  return fit_mechanism(Mechanism::tabular(shape, std::move(table), true), train, heldout, cfg,
                       truth, metrics);
}

// Correctly specified structural family fitted by the same likelihood.
inline FitResult fit_struct_mle(std::span<const Trajectory> train,
                                std::span<const Trajectory> heldout, MechanismKind family,
                                const TrainConfig& cfg, const Mechanism* truth = nullptr,
                                const MetricSettings* metrics = nullptr) {
  if (train.empty()) throw std::invalid_argument("fit_struct_mle: no training trajectories");
  const GameShape shape = train[0].meta.shape;
  Mechanism mech;
  switch (family) {
    case MechanismKind::Congestion:
      mech = Mechanism::congestion(shape, std::vector<double>(std::size_t(shape.k), 0.0), 0.5,
                                   true);
      break;
    case MechanismKind::PublicGoods:
      mech = Mechanism::public_goods(shape, 1.0, 0.5, true);
      break;
    default:
      throw std::invalid_argument("fit_struct_mle: family must be congestion or public-goods");
  }
  return fit_mechanism(std::move(mech), train, heldout, cfg, truth, metrics);
}

// DIML with deliberately misspecified learning hyperparameters.
inline FitResult fit_diml_wrong(std::span<const Trajectory> train,
                                std::span<const Trajectory> heldout, Mechanism template_mech,
                                TrainConfig cfg, const LearnerParams& wrong,
                                const Mechanism* truth = nullptr,
                                const MetricSettings* metrics = nullptr) {
  cfg.likelihood.params = wrong;
  return fit_diml(train, heldout, std::move(template_mech), cfg, truth, metrics);
}

// Finite-difference audit of the training gradient: analytic d(objective)/d(theta)
// against central differences over every mechanism coordinate.
struct ObjectiveGradCheck {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

inline ObjectiveGradCheck objective_grad_check(Mechanism mech, std::span<const Trajectory> batch,
                                               const LikelihoodConfig& cfg, double h = 1e-4) {
  mech.set_trainable(true);
  auto value = [&]() {
    Tape tape;
    MechanismBinding binding(mech, tape);
    return dataset_objective(binding, batch, cfg).scalar();
  };

  Tape tape;
  MechanismBinding binding(mech, tape);
  Tensor obj = dataset_objective(binding, batch, cfg);
  tape.backward(obj);

  ObjectiveGradCheck out;
  for (std::size_t ai = 0; ai < mech.params().size(); ++ai) {
    auto analytic = tape.grad(binding.mounted()[ai]);
    auto& values = mech.params()[ai].values;
    for (std::size_t j = 0; j < values.size(); ++j) {
      double keep = values[j];
      values[j] = keep + h;
      double fp = value();
      values[j] = keep - h;
      double fm = value();
      values[j] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double denom = std::max({std::abs(analytic[j]), std::abs(fd), 1e-6});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[j] - fd) / denom);
      ++out.coords_checked;
    }
  }
  return out;
}

}  // namespace diml
