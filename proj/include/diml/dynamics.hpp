#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diml/common.hpp"
#include "diml/mechanisms.hpp"
#include "diml/rng.hpp"

namespace diml {

// Logit-Q learner: EWMA score update plus temperature-beta softmax policy
// with eps-uniform exploration. eps > 0 keeps every action probability at
// least eps/k, so no realized action is impossible under the model.
struct LearnerParams {
  double alpha = 0.1;
  double beta = 3.0;
  double eps = 0.05;

  bool operator==(const LearnerParams&) const = default;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw std::invalid_argument("LearnerParams: alpha must be in (0,1], got " +
                                  std::to_string(alpha));
    if (!(beta > 0.0))
      throw std::invalid_argument("LearnerParams: beta must be > 0, got " + std::to_string(beta));
    // eps = 1 is accepted as the pure-exploration degenerate (uniform play).
    if (!(eps >= 0.0 && eps <= 1.0))
      throw std::invalid_argument("LearnerParams: eps must be in [0,1], got " +
                                  std::to_string(eps));
  }
};

// pi = (1-eps) * softmax(beta * q) + eps/k, stabilized by max subtraction.
// Shared verbatim by the generator and the inference recursion.
inline void policy_from_q(std::span<const double> q, const LearnerParams& params,
                          std::span<double> out) {
  const std::size_t k = q.size();
  double mx = params.beta * q[0];
  for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, params.beta * q[c]);
  double z = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    out[c] = std::exp(params.beta * q[c] - mx);
    z += out[c];
  }
  const double mix = params.eps / double(k);
  for (std::size_t c = 0; c < k; ++c) out[c] = (1.0 - params.eps) * (out[c] / z) + mix;
}

inline std::vector<double> policy_from_q(std::span<const double> q, const LearnerParams& params) {
  std::vector<double> out(q.size());
  policy_from_q(q, params, out);
  return out;
}

// q <- (1-alpha) q + alpha u, elementwise.
inline void q_update(std::span<double> q, std::span<const double> u, double alpha) {
  for (std::size_t c = 0; c < q.size(); ++c) q[c] = (1.0 - alpha) * q[c] + alpha * u[c];
}

inline int sample_action(std::span<const double> probs, Rng& rng) {
  return rng.categorical(probs);
}

struct TrajectoryMeta {
  GameShape shape;
  LearnerParams generator;
  std::string mechanism_kind;
  std::uint64_t mechanism_seed = 0;
  std::string q_init = "zeros";
  std::uint64_t rng_seed = 0;  // master seed; per-trajectory stream is (seed, index)
  int index = 0;
};

struct Trajectory {
  std::vector<JointAction> actions;  // T rows of n action indices
  TrajectoryMeta meta;

  int horizon() const { return int(actions.size()); }

  void validate() const {
    if (horizon() < 2) throw std::invalid_argument("trajectory: need T >= 2");
    for (const JointAction& a : actions) validate_action(meta.shape, a);
  }
};

// Q snapshots for the generator/inference parity test: q[0] is Q(1), then
// one flattened n x k matrix per update.
struct SimDebug {
  std::vector<std::vector<double>> q_history;
};

namespace detail {

inline Trajectory simulate_one(const Mechanism& mech, const LearnerParams& params, int horizon,
                               std::uint64_t master_seed, int index, SimDebug* debug) {
  const GameShape& shape = mech.shape();
  Rng rng = Rng::stream(master_seed, std::uint64_t(index));

  Trajectory traj;
  traj.meta.shape = shape;
  traj.meta.generator = params;
  traj.meta.mechanism_kind = kind_name(mech.kind());
  traj.meta.mechanism_seed = mech.seed();
  traj.meta.q_init = "zeros";
  traj.meta.rng_seed = master_seed;
  traj.meta.index = index;
  traj.actions.reserve(std::size_t(horizon));

  std::vector<double> q(std::size_t(shape.n) * shape.k, 0.0);
  std::vector<double> pi(std::size_t(shape.k));
  std::vector<double> u(std::size_t(shape.k));
  if (debug) debug->q_history.push_back(q);

  JointAction action(std::size_t(shape.n));
  for (int i = 0; i < shape.n; ++i) {
    policy_from_q({q.data() + std::size_t(i) * shape.k, std::size_t(shape.k)}, params, pi);
    action[std::size_t(i)] = sample_action(pi, rng);
  }
  traj.actions.push_back(action);

  for (int t = 1; t < horizon; ++t) {
    const JointAction& prev = traj.actions.back();
    // Eq-style full-vector update: every agent sees the counterfactual row
    // for the opponents' realized actions.
    for (int i = 0; i < shape.n; ++i) {
      mech.counterfactual_row(i, prev, u);
      q_update({q.data() + std::size_t(i) * shape.k, std::size_t(shape.k)}, u, params.alpha);
    }
    if (debug) debug->q_history.push_back(q);
    for (int i = 0; i < shape.n; ++i) {
      policy_from_q({q.data() + std::size_t(i) * shape.k, std::size_t(shape.k)}, params, pi);
      action[std::size_t(i)] = sample_action(pi, rng);
    }
    traj.actions.push_back(action);
  }
  return traj;
}

}  // namespace detail

// Generates n_traj independent trajectories; deterministic in (seed, config)
// for any worker count.
inline std::vector<Trajectory> simulate(const Mechanism& mech, const LearnerParams& params,
                                        int horizon, int n_traj, std::uint64_t seed,
                                        int workers = 1,
                                        std::vector<SimDebug>* debug = nullptr) {
  params.validate();
  mech.shape().validate();
  if (horizon < 2) throw std::invalid_argument("simulate: need T >= 2, got " +
                                               std::to_string(horizon));
  if (n_traj < 1) throw std::invalid_argument("simulate: need at least one trajectory");

  std::vector<Trajectory> out(static_cast<std::size_t>(n_traj));
  if (debug) debug->assign(std::size_t(n_traj), {});
  parallel_for(std::size_t(n_traj), workers, [&](std::size_t m) {
    out[m] = detail::simulate_one(mech, params, horizon, seed, int(m),
                                  debug ? &(*debug)[m] : nullptr);
  });
  return out;
}

// --- line-delimited trajectory files: meta object, then one integer row per step ---

inline nlohmann::json meta_to_json(const TrajectoryMeta& meta) {
  return {
      {"shape", {{"n", meta.shape.n}, {"k", meta.shape.k}}},
      {"generator",
       {{"alpha", meta.generator.alpha}, {"beta", meta.generator.beta},
        {"eps", meta.generator.eps}}},
      {"mechanism_kind", meta.mechanism_kind},
      {"mechanism_seed", meta.mechanism_seed},
      {"q_init", meta.q_init},
      {"rng_seed", meta.rng_seed},
      {"index", meta.index},
  };
}

inline TrajectoryMeta meta_from_json(const nlohmann::json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key != "shape" && key != "generator" && key != "mechanism_kind" &&
        key != "mechanism_seed" && key != "q_init" && key != "rng_seed" && key != "index")
      throw config_error("trajectory meta: unknown key '" + key + "'");
  }
  TrajectoryMeta meta;
  meta.shape.n = j.at("shape").at("n").get<int>();
  meta.shape.k = j.at("shape").at("k").get<int>();
  meta.generator.alpha = j.at("generator").at("alpha").get<double>();
  meta.generator.beta = j.at("generator").at("beta").get<double>();
  meta.generator.eps = j.at("generator").at("eps").get<double>();
  meta.mechanism_kind = j.at("mechanism_kind").get<std::string>();
  meta.mechanism_seed = j.at("mechanism_seed").get<std::uint64_t>();
  meta.q_init = j.at("q_init").get<std::string>();
  meta.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  meta.index = j.at("index").get<int>();
  return meta;
}

inline void save_trajectory(std::ostream& out, const Trajectory& traj) {
  out << meta_to_json(traj.meta).dump() << "\n";
  for (const JointAction& a : traj.actions) {
    out << nlohmann::json(a).dump() << "\n";
  }
}

inline Trajectory load_trajectory(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw config_error("trajectory file: missing meta line");
  Trajectory traj;
  try {
    traj.meta = meta_from_json(nlohmann::json::parse(line));
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      traj.actions.push_back(nlohmann::json::parse(line).get<JointAction>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("trajectory file: ") + e.what());
  }
  traj.validate();
  return traj;
}

}  // namespace diml
