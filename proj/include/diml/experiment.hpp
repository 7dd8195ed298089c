#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diml/common.hpp"
#include "diml/estimators.hpp"
#include "diml/likelihood.hpp"
#include "diml/metrics.hpp"

namespace diml {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// strict config parsing: unknown keys are errors, messages carry the path
// ---------------------------------------------------------------------------

namespace cfgkeys {

inline void expect_object(const json& j, const std::string& path) {
  if (!j.is_object()) throw config_error(path + ": expected an object");
}

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  expect_object(j, path);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* key : allowed) ok |= (it.key() == key);
    if (!ok) throw config_error(path + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
T get(const json& j, const std::string& path, const char* key) {
  if (!j.contains(key)) throw config_error(path + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw config_error(path + "." + key + ": " + e.what());
  }
}

template <typename T>
T get_or(const json& j, const std::string& path, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw config_error(path + "." + key + ": " + e.what());
  }
}

}  // namespace cfgkeys

// ---------------------------------------------------------------------------
// experiment presets
// ---------------------------------------------------------------------------

struct TruthSpec {
  MechanismKind kind = MechanismKind::Neural;
  std::vector<int> widths{64, 64};
  double weight_scale = 1.0;
  std::uint64_t seed = 0;
  std::vector<double> base;  // congestion base values
  double kappa = 0.0;
  double gamma = 0.0;  // public goods
  double cost = 0.0;
};

struct DatasetSpec {
  int num_trajectories = 64;
  int horizon = 300;
  double heldout_fraction = 0.25;
};

struct EstimatorSpec {
  std::string name;  // diml | tabular | struct | diml-wrong
  std::vector<int> widths{64, 64};
  double weight_scale = 1.0;
  MechanismKind family = MechanismKind::Congestion;  // struct only
  double wrong_beta_factor = 2.0;                    // diml-wrong only
  TrainConfig train;
};

struct MetricSpec {
  LearnerParams intervention{0.2, 1.5, 0.1};
  int cfkl_rollouts = 64;
  int cfkl_horizon = 100;
  KeyMode cfkl_mode = KeyMode::ExactJoint;
  int diff_contexts = 512;
  int diff_pairs = 8;

  MetricSettings settings() const {
    MetricSettings s;
    s.intervention = intervention;
    s.cfkl_rollouts = cfkl_rollouts;
    s.cfkl_horizon = cfkl_horizon;
    s.cfkl_mode = cfkl_mode;
    s.diff_contexts = diff_contexts;
    s.diff_pairs = diff_pairs;
    return s;
  }
};

struct ExperimentPreset {
  std::string name;
  GameShape shape;
  TruthSpec truth;
  LearnerParams generator{0.1, 3.0, 0.05};
  DatasetSpec dataset;
  std::vector<EstimatorSpec> estimators;
  MetricSpec metrics;
  std::uint64_t master_seed = 0;

  void validate() const {
    shape.validate();
    generator.validate();
    if (dataset.num_trajectories < 2)
      throw config_error("preset " + name + ": need at least 2 trajectories");
    if (dataset.horizon < 2) throw config_error("preset " + name + ": horizon must be >= 2");
    if (!(dataset.heldout_fraction > 0.0 && dataset.heldout_fraction < 1.0))
      throw config_error("preset " + name + ": heldout fraction must lie in (0,1)");
    for (const auto& est : estimators) est.train.validate();
  }
};

// derived seed streams, recorded in every manifest
inline std::uint64_t sim_seed_of(std::uint64_t master) { return Rng::stream(master, 11).next_u64(); }
inline std::uint64_t train_seed_of(std::uint64_t master, std::size_t estimator_index) {
  return Rng::stream(master, 21 + estimator_index).next_u64();
}
inline std::uint64_t eval_seed_of(std::uint64_t master) { return Rng::stream(master, 31).next_u64(); }

inline Mechanism build_truth(const ExperimentPreset& preset) {
  const TruthSpec& t = preset.truth;
  switch (t.kind) {
    case MechanismKind::Neural:
      return Mechanism::neural(preset.shape, t.widths, t.seed, t.weight_scale);
    case MechanismKind::CountNeural:
      return Mechanism::count_neural(preset.shape, t.widths, t.seed, t.weight_scale);
    case MechanismKind::Congestion:
      return Mechanism::congestion(preset.shape, t.base, t.kappa);
    case MechanismKind::PublicGoods:
      return Mechanism::public_goods(preset.shape, t.gamma, t.cost);
    case MechanismKind::Tabular:
      break;
  }
  throw config_error("preset " + preset.name + ": unsupported ground-truth kind");
}

// ---------------------------------------------------------------------------
// preset <-> json (the config file format; round-trips to identity)
// ---------------------------------------------------------------------------

inline json learner_to_json(const LearnerParams& p) {
  return {{"alpha", p.alpha}, {"beta", p.beta}, {"eps", p.eps}};
}

inline LearnerParams learner_from_json(const json& j, const std::string& path) {
  cfgkeys::check_keys(j, path, {"alpha", "beta", "eps"});
  LearnerParams p;
  p.alpha = cfgkeys::get<double>(j, path, "alpha");
  p.beta = cfgkeys::get<double>(j, path, "beta");
  p.eps = cfgkeys::get<double>(j, path, "eps");
  return p;
}

inline json train_to_json(const TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"epochs", t.epochs},
          {"minibatch", t.minibatch},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"estimate_beta", t.estimate_beta},
          {"eval_interval", t.eval_interval},
          {"truncation", t.likelihood.truncation},
          {"lambda_budget", t.likelihood.lambda_budget},
          {"lambda_magnitude", t.likelihood.lambda_magnitude},
          {"q_init", t.likelihood.q_init == LikelihoodConfig::QInit::Zeros ? "zeros"
                                                                           : "learnable"}};
}

inline TrainConfig train_from_json(const json& j, const std::string& path) {
  cfgkeys::check_keys(j, path,
                      {"learning_rate", "epochs", "minibatch", "beta1", "beta2", "estimate_beta",
                       "eval_interval", "truncation", "lambda_budget", "lambda_magnitude",
                       "q_init"});
  TrainConfig t;
  t.learning_rate = cfgkeys::get<double>(j, path, "learning_rate");
  t.epochs = cfgkeys::get<int>(j, path, "epochs");
  t.minibatch = cfgkeys::get_or<int>(j, path, "minibatch", 8);
  t.beta1 = cfgkeys::get_or<double>(j, path, "beta1", 0.9);
  t.beta2 = cfgkeys::get_or<double>(j, path, "beta2", 0.999);
  t.estimate_beta = cfgkeys::get_or<bool>(j, path, "estimate_beta", false);
  t.eval_interval = cfgkeys::get_or<int>(j, path, "eval_interval", 10);
  t.likelihood.truncation = cfgkeys::get_or<int>(j, path, "truncation", 0);
  t.likelihood.lambda_budget = cfgkeys::get_or<double>(j, path, "lambda_budget", 1e-3);
  t.likelihood.lambda_magnitude = cfgkeys::get_or<double>(j, path, "lambda_magnitude", 1e-4);
  std::string qi = cfgkeys::get_or<std::string>(j, path, "q_init", "zeros");
  if (qi != "zeros" && qi != "learnable")
    throw config_error(path + ".q_init: expected 'zeros' or 'learnable', got '" + qi + "'");
  t.likelihood.q_init =
      qi == "zeros" ? LikelihoodConfig::QInit::Zeros : LikelihoodConfig::QInit::Learnable;
  return t;
}

inline json preset_to_json(const ExperimentPreset& p) {
  json truth = {{"kind", kind_name(p.truth.kind)}, {"seed", p.truth.seed}};
  switch (p.truth.kind) {
    case MechanismKind::Neural:
    case MechanismKind::CountNeural:
      truth["widths"] = p.truth.widths;
      truth["weight_scale"] = p.truth.weight_scale;
      break;
    case MechanismKind::Congestion:
      truth["base"] = p.truth.base;
      truth["kappa"] = p.truth.kappa;
      break;
    case MechanismKind::PublicGoods:
      truth["gamma"] = p.truth.gamma;
      truth["cost"] = p.truth.cost;
      break;
    case MechanismKind::Tabular:
      break;
  }
  json ests = json::array();
  for (const auto& e : p.estimators) {
    json je = {{"name", e.name}, {"train", train_to_json(e.train)}};
    if (e.name == "diml" || e.name == "diml-wrong") {
      je["widths"] = e.widths;
      je["weight_scale"] = e.weight_scale;
    }
    if (e.name == "diml-wrong") je["wrong_beta_factor"] = e.wrong_beta_factor;
    if (e.name == "struct") je["family"] = kind_name(e.family);
    ests.push_back(je);
  }
  return {{"name", p.name},
          {"shape", {{"n", p.shape.n}, {"k", p.shape.k}}},
          {"truth", truth},
          {"generator", learner_to_json(p.generator)},
          {"dataset",
           {{"num_trajectories", p.dataset.num_trajectories},
            {"horizon", p.dataset.horizon},
            {"heldout_fraction", p.dataset.heldout_fraction}}},
          {"estimators", ests},
          {"metrics",
           {{"intervention", learner_to_json(p.metrics.intervention)},
            {"cfkl_rollouts", p.metrics.cfkl_rollouts},
            {"cfkl_horizon", p.metrics.cfkl_horizon},
            {"cfkl_mode", key_mode_name(p.metrics.cfkl_mode)},
            {"diff_contexts", p.metrics.diff_contexts},
            {"diff_pairs", p.metrics.diff_pairs}}},
          {"master_seed", p.master_seed}};
}

inline ExperimentPreset preset_from_json(const json& j) {
  const std::string path = "config";
  cfgkeys::check_keys(j, path,
                      {"name", "shape", "truth", "generator", "dataset", "estimators", "metrics",
                       "master_seed"});
  ExperimentPreset p;
  p.name = cfgkeys::get<std::string>(j, path, "name");

  const json& shape = j.at("shape");
  cfgkeys::check_keys(shape, path + ".shape", {"n", "k"});
  p.shape.n = cfgkeys::get<int>(shape, path + ".shape", "n");
  p.shape.k = cfgkeys::get<int>(shape, path + ".shape", "k");

  const json& truth = j.at("truth");
  cfgkeys::check_keys(truth, path + ".truth",
                      {"kind", "seed", "widths", "weight_scale", "base", "kappa", "gamma",
                       "cost"});
  p.truth.kind = kind_from_name(cfgkeys::get<std::string>(truth, path + ".truth", "kind"));
  p.truth.seed = cfgkeys::get<std::uint64_t>(truth, path + ".truth", "seed");
  p.truth.widths = cfgkeys::get_or<std::vector<int>>(truth, path + ".truth", "widths", {64, 64});
  p.truth.weight_scale = cfgkeys::get_or<double>(truth, path + ".truth", "weight_scale", 1.0);
  p.truth.base = cfgkeys::get_or<std::vector<double>>(truth, path + ".truth", "base", {});
  p.truth.kappa = cfgkeys::get_or<double>(truth, path + ".truth", "kappa", 0.0);
  p.truth.gamma = cfgkeys::get_or<double>(truth, path + ".truth", "gamma", 0.0);
  p.truth.cost = cfgkeys::get_or<double>(truth, path + ".truth", "cost", 0.0);

  p.generator = learner_from_json(j.at("generator"), path + ".generator");

  const json& ds = j.at("dataset");
  cfgkeys::check_keys(ds, path + ".dataset",
                      {"num_trajectories", "horizon", "heldout_fraction"});
  p.dataset.num_trajectories = cfgkeys::get<int>(ds, path + ".dataset", "num_trajectories");
  p.dataset.horizon = cfgkeys::get<int>(ds, path + ".dataset", "horizon");
  p.dataset.heldout_fraction = cfgkeys::get<double>(ds, path + ".dataset", "heldout_fraction");

  const json& ests = j.at("estimators");
  if (!ests.is_array()) throw config_error(path + ".estimators: expected an array");
  for (std::size_t i = 0; i < ests.size(); ++i) {
    std::string epath = path + ".estimators[" + std::to_string(i) + "]";
    cfgkeys::check_keys(ests[i], epath,
                        {"name", "widths", "weight_scale", "family", "wrong_beta_factor",
                         "train"});
    EstimatorSpec e;
    e.name = cfgkeys::get<std::string>(ests[i], epath, "name");
    if (e.name != "diml" && e.name != "tabular" && e.name != "struct" && e.name != "diml-wrong")
      throw config_error(epath + ".name: unknown estimator '" + e.name + "'");
    e.widths = cfgkeys::get_or<std::vector<int>>(ests[i], epath, "widths", {64, 64});
    e.weight_scale = cfgkeys::get_or<double>(ests[i], epath, "weight_scale", 1.0);
    if (ests[i].contains("family"))
      e.family = kind_from_name(cfgkeys::get<std::string>(ests[i], epath, "family"));
    e.wrong_beta_factor = cfgkeys::get_or<double>(ests[i], epath, "wrong_beta_factor", 2.0);
    e.train = train_from_json(ests[i].at("train"), epath + ".train");
    p.estimators.push_back(std::move(e));
  }

  const json& ms = j.at("metrics");
  cfgkeys::check_keys(ms, path + ".metrics",
                      {"intervention", "cfkl_rollouts", "cfkl_horizon", "cfkl_mode",
                       "diff_contexts", "diff_pairs"});
  p.metrics.intervention = learner_from_json(ms.at("intervention"), path + ".metrics.intervention");
  p.metrics.cfkl_rollouts = cfgkeys::get<int>(ms, path + ".metrics", "cfkl_rollouts");
  p.metrics.cfkl_horizon = cfgkeys::get<int>(ms, path + ".metrics", "cfkl_horizon");
  p.metrics.cfkl_mode =
      key_mode_from_name(cfgkeys::get<std::string>(ms, path + ".metrics", "cfkl_mode"));
  p.metrics.diff_contexts = cfgkeys::get<int>(ms, path + ".metrics", "diff_contexts");
  p.metrics.diff_pairs = cfgkeys::get<int>(ms, path + ".metrics", "diff_pairs");

  p.master_seed = cfgkeys::get<std::uint64_t>(j, path, "master_seed");
  p.validate();
  return p;
}

inline ExperimentPreset load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw config_error("cannot read config file " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw config_error("config file " + file.string() + ": " + e.what());
  }
  return preset_from_json(j);
}

// ---------------------------------------------------------------------------
// builtin presets
// ---------------------------------------------------------------------------

inline TrainConfig default_train(double lr, int epochs, int eval_interval = 10) {
  TrainConfig t;
  t.learning_rate = lr;
  t.epochs = epochs;
  t.eval_interval = eval_interval;
  return t;
}

// E1: frozen random neural mechanism. Desk shape 3x4; the paper-scale
// variant keeps the 4-agent 5-action shape.
inline ExperimentPreset preset_e1(bool paper_scale) {
  ExperimentPreset p;
  p.name = "e1";
  p.shape = paper_scale ? GameShape{4, 5} : GameShape{3, 4};
  p.truth.kind = MechanismKind::Neural;
  p.truth.widths = {64, 64};
  p.truth.weight_scale = 1.0;
  p.truth.seed = 8101;
  p.dataset = {64, 300, 0.25};
  p.master_seed = 1001;

  EstimatorSpec diml{"diml", {32, 32}, 1.0, MechanismKind::Congestion, 2.0,
                     default_train(1e-3, 120)};
  EstimatorSpec tab{"tabular", {}, 1.0, MechanismKind::Congestion, 2.0,
                    default_train(1e-2, 150)};
  EstimatorSpec wrong = diml;
  wrong.name = "diml-wrong";
  p.estimators = {diml, tab, wrong};

  p.metrics.cfkl_mode = KeyMode::ExactJoint;
  p.metrics.cfkl_rollouts = 64;
  p.metrics.cfkl_horizon = 100;
  p.metrics.diff_contexts = 512;
  p.metrics.diff_pairs = 8;
  return p;
}

// E2: congestion tolling at the paper shape (3 agents, 7 actions).
inline ExperimentPreset preset_e2(bool paper_scale) {
  ExperimentPreset p;
  p.name = "e2";
  p.shape = {3, 7};
  p.truth.kind = MechanismKind::Congestion;
  p.truth.base = {1.0, 0.5, 0.0, 0.25, 0.75, 0.1, 0.6};
  p.truth.kappa = 0.4;
  p.truth.seed = 8202;
  p.dataset = paper_scale ? DatasetSpec{64, 300, 0.25} : DatasetSpec{32, 200, 0.25};
  p.master_seed = 2002;

  EstimatorSpec st{"struct", {}, 1.0, MechanismKind::Congestion, 2.0,
                   default_train(1e-2, 250, 25)};
  EstimatorSpec diml{"diml", {32, 32}, 1.0, MechanismKind::Congestion, 2.0,
                     default_train(2e-3, 150, 15)};
  EstimatorSpec wrong = diml;
  wrong.name = "diml-wrong";
  p.estimators = {st, diml, wrong};

  p.metrics.cfkl_mode = KeyMode::ExactJoint;
  p.metrics.cfkl_rollouts = 64;
  p.metrics.cfkl_horizon = 100;
  p.metrics.diff_contexts = 256;
  p.metrics.diff_pairs = 8;
  return p;
}

// E3: public-goods contributions with diminishing returns (3 agents,
// 7 contribution levels).
inline ExperimentPreset preset_e3(bool paper_scale) {
  ExperimentPreset p = preset_e2(paper_scale);
  p.name = "e3";
  p.truth = TruthSpec{};
  p.truth.kind = MechanismKind::PublicGoods;
  p.truth.gamma = 2.0;
  p.truth.cost = 1.0;
  p.truth.seed = 8303;
  p.master_seed = 3003;
  for (auto& e : p.estimators)
    if (e.name == "struct") e.family = MechanismKind::PublicGoods;
  return p;
}

// E4: large anonymous game with a count-based neural mechanism. Desk scale
// is the low end of the paper's range; paper scale is n=300, k=40.
inline ExperimentPreset preset_e4(bool paper_scale) {
  ExperimentPreset p;
  p.name = "e4";
  p.shape = paper_scale ? GameShape{300, 40} : GameShape{40, 10};
  p.truth.kind = MechanismKind::CountNeural;
  p.truth.widths = {32, 32};
  p.truth.weight_scale = 1.0;
  p.truth.seed = 8404;
  p.dataset = paper_scale ? DatasetSpec{16, 200, 0.25} : DatasetSpec{32, 200, 0.25};
  p.master_seed = 4004;

  EstimatorSpec diml{"diml", {32, 32}, 1.0, MechanismKind::Congestion, 2.0,
                     default_train(3e-3, 40, 10)};
  EstimatorSpec wrong = diml;
  wrong.name = "diml-wrong";
  // tabular is listed but infeasible at this scale; `fit` refuses it and
  // `experiment` records the skip
  EstimatorSpec tab{"tabular", {}, 1.0, MechanismKind::Congestion, 2.0,
                    default_train(1e-2, 40, 10)};
  p.estimators = {diml, wrong, tab};

  p.metrics.cfkl_mode = KeyMode::CountKey;
  p.metrics.cfkl_rollouts = 48;
  p.metrics.cfkl_horizon = 100;
  p.metrics.diff_contexts = 256;
  p.metrics.diff_pairs = 8;
  return p;
}

inline ExperimentPreset find_preset(const std::string& name, bool paper_scale) {
  if (name == "e1") return preset_e1(paper_scale);
  if (name == "e2") return preset_e2(paper_scale);
  if (name == "e3") return preset_e3(paper_scale);
  if (name == "e4") return preset_e4(paper_scale);
  throw config_error("unknown preset '" + name + "' (choose e1, e2, e3, e4 or all)");
}

// ---------------------------------------------------------------------------
// dataset directories and CSV output
// ---------------------------------------------------------------------------

inline constexpr const char* metrics_csv_header =
    "epoch,train_nll,heldout_nll,diff_mse,cfkl_params,wallclock_s";

inline std::string num17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_metrics_csv(const fs::path& file, std::span<const EvalRow> rows,
                              bool zero_wallclock) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << metrics_csv_header << "\n";
  for (const EvalRow& r : rows) {
    out << r.epoch << ',' << num17(r.train_nll) << ',' << num17(r.heldout_nll) << ','
        << num17(r.diff_mse) << ',' << num17(r.cfkl_params) << ','
        << num17(zero_wallclock ? 0.0 : r.wallclock_s) << "\n";
  }
}

struct Dataset {
  std::vector<Trajectory> trajectories;
  json manifest;
  Mechanism truth;

  std::span<const Trajectory> train() const {
    return {trajectories.data(), trajectories.size() - heldout_count()};
  }
  std::span<const Trajectory> heldout() const {
    return {trajectories.data() + (trajectories.size() - heldout_count()), heldout_count()};
  }
  std::size_t heldout_count() const {
    return manifest.at("heldout_count").get<std::size_t>();
  }
};

inline void write_json(const fs::path& file, const json& j) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << j.dump(2) << "\n";
}

inline json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw config_error("cannot read " + file.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw config_error(file.string() + ": " + e.what());
  }
}

// simulate a preset's dataset and write it out: trajectory files, the
// ground-truth mechanism, and a manifest sufficient to re-run bit-exactly
inline fs::path run_simulate(const ExperimentPreset& preset, const fs::path& out_dir,
                             int workers = 1) {
  preset.validate();
  fs::create_directories(out_dir);
  Mechanism truth = build_truth(preset);
  std::uint64_t sim_seed = sim_seed_of(preset.master_seed);
  auto trajs = simulate(truth, preset.generator, preset.dataset.horizon,
                        preset.dataset.num_trajectories, sim_seed, workers);

  std::size_t heldout_count = std::max<std::size_t>(
      1, std::size_t(std::llround(preset.dataset.heldout_fraction * double(trajs.size()))));
  if (heldout_count >= trajs.size()) heldout_count = trajs.size() - 1;

  json files = json::array();
  for (std::size_t m = 0; m < trajs.size(); ++m) {
    char name[32];
    std::snprintf(name, sizeof(name), "traj_%05zu.jsonl", m);
    std::ofstream out(out_dir / name);
    save_trajectory(out, trajs[m]);
    files.push_back(name);
  }
  truth.save(out_dir / "truth_mechanism.json");

  json manifest = {{"tool_version", version},
                   {"command", "simulate"},
                   {"preset", preset_to_json(preset)},
                   {"master_seed", preset.master_seed},
                   {"sim_seed", sim_seed},
                   {"heldout_count", heldout_count},
                   {"truth_mechanism", "truth_mechanism.json"},
                   {"trajectory_files", files}};
  write_json(out_dir / "manifest.json", manifest);
  return out_dir;
}

inline Dataset read_dataset(const fs::path& dir) {
  Dataset ds;
  ds.manifest = read_json(dir / "manifest.json");
  for (const auto& name : ds.manifest.at("trajectory_files")) {
    std::ifstream in(dir / name.get<std::string>());
    if (!in) throw config_error("missing trajectory file " + name.get<std::string>());
    ds.trajectories.push_back(load_trajectory(in));
  }
  if (ds.trajectories.empty()) throw config_error("dataset at " + dir.string() + " is empty");
  ds.truth = Mechanism::load(dir / ds.manifest.at("truth_mechanism").get<std::string>());
  return ds;
}

// fit one estimator from a preset on a stored dataset
inline FitResult run_fit(const ExperimentPreset& preset, std::size_t estimator_index,
                         const Dataset& data, const fs::path& out_dir, int workers = 1,
                         bool zero_wallclock = false) {
  if (estimator_index >= preset.estimators.size())
    throw config_error("estimator index out of range");
  const EstimatorSpec& spec = preset.estimators[estimator_index];
  fs::create_directories(out_dir);

  TrainConfig cfg = spec.train;
  cfg.seed = train_seed_of(preset.master_seed, estimator_index);
  cfg.workers = workers;
  cfg.likelihood.params = preset.generator;
  cfg.likelihood.truncation = spec.train.likelihood.truncation;
  cfg.likelihood.lambda_budget = spec.train.likelihood.lambda_budget;
  cfg.likelihood.lambda_magnitude = spec.train.likelihood.lambda_magnitude;
  cfg.likelihood.q_init = spec.train.likelihood.q_init;

  MetricSettings ms = preset.metrics.settings();
  const GameShape& shape = data.trajectories[0].meta.shape;

  FitResult result;
  if (spec.name == "diml") {
    Mechanism tmpl = preset.truth.kind == MechanismKind::CountNeural
                         ? Mechanism::count_neural(shape, spec.widths, cfg.seed,
                                                   spec.weight_scale, true)
                         : Mechanism::neural(shape, spec.widths, cfg.seed, spec.weight_scale,
                                             true);
    result = fit_diml(data.train(), data.heldout(), std::move(tmpl), cfg, &data.truth, &ms);
  } else if (spec.name == "tabular") {
    result = fit_tabular_mle(data.train(), data.heldout(), cfg, &data.truth, &ms);
  } else if (spec.name == "struct") {
    result = fit_struct_mle(data.train(), data.heldout(), spec.family, cfg, &data.truth, &ms);
  } else if (spec.name == "diml-wrong") {
    LearnerParams wrong = preset.generator;
    wrong.beta *= spec.wrong_beta_factor;
    Mechanism tmpl = preset.truth.kind == MechanismKind::CountNeural
                         ? Mechanism::count_neural(shape, spec.widths, cfg.seed,
                                                   spec.weight_scale, true)
                         : Mechanism::neural(shape, spec.widths, cfg.seed, spec.weight_scale,
                                             true);
    result = fit_diml_wrong(data.train(), data.heldout(), std::move(tmpl), cfg, wrong,
                            &data.truth, &ms);
  } else {
    throw config_error("unknown estimator '" + spec.name + "'");
  }

  result.mechanism.save(out_dir / "mechanism.json");
  write_metrics_csv(out_dir / "metrics.csv", result.metric_history, zero_wallclock);
  json manifest = {{"tool_version", version},
                   {"command", "fit"},
                   {"estimator", spec.name},
                   {"train_seed", cfg.seed},
                   {"master_seed", preset.master_seed},
                   {"fitted_beta", result.fitted_beta},
                   {"wrong_beta_factor", spec.name == "diml-wrong" ? spec.wrong_beta_factor : 1.0},
                   {"inference_beta",
                    spec.name == "diml-wrong" ? preset.generator.beta * spec.wrong_beta_factor
                                              : preset.generator.beta},
                   {"preset", preset_to_json(preset)},
                   {"mechanism_file", "mechanism.json"},
                   {"metrics_file", "metrics.csv"}};
  write_json(out_dir / "manifest.json", manifest);
  return result;
}

struct EvaluateResult {
  double diff_mse = std::numeric_limits<double>::quiet_NaN();
  double cfkl_exact = std::numeric_limits<double>::quiet_NaN();
  double cfkl_count = std::numeric_limits<double>::quiet_NaN();
  double heldout_nll = std::numeric_limits<double>::quiet_NaN();
};

// one-shot metric evaluation of an estimated mechanism against the truth
inline EvaluateResult run_evaluate(const Mechanism& truth, const Mechanism& est,
                                   const Dataset& data, const MetricSpec& spec,
                                   std::uint64_t master_seed, const fs::path& out_csv,
                                   int workers = 1) {
  EvaluateResult r;
  Rng ctx_rng = Rng::stream(eval_seed_of(master_seed), 1);
  Rng pair_rng = Rng::stream(eval_seed_of(master_seed), 2);
  std::uint64_t roll_seed = Rng::stream(eval_seed_of(master_seed), 3).next_u64();

  auto contexts = sample_contexts(data.heldout(), spec.diff_contexts, ctx_rng);
  r.diff_mse = diff_mse(truth, est, contexts, spec.diff_pairs, pair_rng);
  if (joint_count_capped(truth.shape(), default_tabulate_cap) <= default_tabulate_cap)
    r.cfkl_exact = cfkl_params(truth, est, spec.intervention, spec.cfkl_rollouts,
                               spec.cfkl_horizon, KeyMode::ExactJoint, roll_seed, workers);
  r.cfkl_count = cfkl_params(truth, est, spec.intervention, spec.cfkl_rollouts,
                             spec.cfkl_horizon, KeyMode::CountKey, roll_seed, workers);

  LikelihoodConfig nll_cfg;
  nll_cfg.params = data.trajectories[0].meta.generator;
  auto heldout = data.heldout();
  std::vector<double> per(heldout.size());
  parallel_for(heldout.size(), workers,
               [&](std::size_t i) { per[i] = trajectory_nll_value(est, heldout[i], nll_cfg); });
  double acc = 0.0;
  for (double v : per) acc += v;
  r.heldout_nll = acc / double(heldout.size());

  if (!out_csv.empty()) {
    fs::create_directories(out_csv.parent_path().empty() ? "." : out_csv.parent_path());
    std::ofstream out(out_csv);
    out << "diff_mse,cfkl_exact_joint,cfkl_count_key,heldout_nll\n"
        << num17(r.diff_mse) << ',' << num17(r.cfkl_exact) << ',' << num17(r.cfkl_count) << ','
        << num17(r.heldout_nll) << "\n";
  }
  return r;
}

// full pipeline for one preset: simulate -> fit every estimator -> evaluate.
// Learning-curve CSVs land in fit_<estimator>/metrics.csv. wallclock_s is
// zeroed in this mode so reruns with one master seed stay byte-identical.
inline void run_experiment(const ExperimentPreset& preset, const fs::path& out_root,
                           int workers = 1) {
  fs::path base = out_root / preset.name;
  run_simulate(preset, base / "sim", workers);
  Dataset data = read_dataset(base / "sim");

  json stages = json::array();
  stages.push_back("simulate");
  for (std::size_t e = 0; e < preset.estimators.size(); ++e) {
    const std::string& name = preset.estimators[e].name;
    try {
      FitResult fit = run_fit(preset, e, data, base / ("fit_" + name), workers,
                              /*zero_wallclock=*/true);
      run_evaluate(data.truth, fit.mechanism, data, preset.metrics, preset.master_seed,
                   base / ("eval_" + name + ".csv"), workers);
      stages.push_back("fit:" + name);
      stages.push_back("eval:" + name);
    } catch (const infeasible_error& e_infeasible) {
      // the tabular baseline is omitted by design at large scale
      stages.push_back("skipped:" + name + " (" + e_infeasible.what() + ")");
    }
  }
  json manifest = {{"tool_version", version},
                   {"command", "experiment"},
                   {"preset", preset_to_json(preset)},
                   {"master_seed", preset.master_seed},
                   {"stages", stages}};
  write_json(base / "manifest.json", manifest);
}

}  // namespace diml
