#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diml/autodiff.hpp"
#include "diml/common.hpp"
#include "diml/rng.hpp"

namespace diml {

// Uniform action count across agents; the counterfactual tensor is n x k.
struct GameShape {
  int n = 2;  // agents
  int k = 2;  // actions per agent

  bool operator==(const GameShape&) const = default;

  void validate() const {
    // n == 1 is accepted so single-agent counterfactual reasoning stays
    // well-defined; presets always use n >= 2.
    if (n < 1 || k < 2)
      throw std::invalid_argument("GameShape: need n >= 1 and k >= 2, got n=" +
                                  std::to_string(n) + " k=" + std::to_string(k));
  }
};

using JointAction = std::vector<int>;

inline void validate_action(const GameShape& shape, const JointAction& a) {
  if (int(a.size()) != shape.n)
    throw std::invalid_argument("joint action has " + std::to_string(a.size()) +
                                " entries for n=" + std::to_string(shape.n));
  for (int v : a)
    if (v < 0 || v >= shape.k)
      throw std::out_of_range("action index " + std::to_string(v) + " out of [0," +
                              std::to_string(shape.k) + ")");
}

// k^n saturating at cap+1; used by the tabulation feasibility guard.
inline std::size_t joint_count_capped(const GameShape& shape, std::size_t cap) {
  std::size_t count = 1;
  for (int i = 0; i < shape.n; ++i) {
    if (count > cap / std::size_t(shape.k)) return cap + 1;
    count *= std::size_t(shape.k);
  }
  return count;
}

// Row-major enumeration with agent 0 most significant.
inline std::size_t joint_index(const GameShape& shape, const JointAction& a) {
  std::size_t idx = 0;
  for (int i = 0; i < shape.n; ++i) idx = idx * std::size_t(shape.k) + std::size_t(a[i]);
  return idx;
}

inline JointAction joint_from_index(const GameShape& shape, std::size_t idx) {
  JointAction a(std::size_t(shape.n));
  for (int i = shape.n - 1; i >= 0; --i) {
    a[std::size_t(i)] = int(idx % std::size_t(shape.k));
    idx /= std::size_t(shape.k);
  }
  return a;
}

// One-hot concatenation of length n*k.
inline std::vector<double> encode_joint(const GameShape& shape, const JointAction& a) {
  validate_action(shape, a);
  std::vector<double> x(std::size_t(shape.n) * shape.k, 0.0);
  for (int i = 0; i < shape.n; ++i) x[std::size_t(i) * shape.k + a[std::size_t(i)]] = 1.0;
  return x;
}

inline JointAction decode_joint(const GameShape& shape, std::span<const double> x) {
  if (x.size() != std::size_t(shape.n) * shape.k)
    throw std::invalid_argument("decode_joint: bad encoding length");
  JointAction a(std::size_t(shape.n));
  for (int i = 0; i < shape.n; ++i) {
    int best = 0;
    for (int c = 1; c < shape.k; ++c)
      if (x[std::size_t(i) * shape.k + c] > x[std::size_t(i) * shape.k + best]) best = c;
    a[std::size_t(i)] = best;
  }
  return a;
}

// Opponents' action counts (entries sum to n-1); invariant to opponent order.
inline std::vector<double> count_others(const GameShape& shape, const JointAction& a, int agent) {
  validate_action(shape, a);
  std::vector<double> counts(std::size_t(shape.k), 0.0);
  for (int j = 0; j < shape.n; ++j)
    if (j != agent) counts[std::size_t(a[std::size_t(j)])] += 1.0;
  return counts;
}

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

enum class MechanismKind { Neural, Tabular, Congestion, PublicGoods, CountNeural };

inline const char* kind_name(MechanismKind k) {
  switch (k) {
    case MechanismKind::Neural: return "neural";
    case MechanismKind::Tabular: return "tabular";
    case MechanismKind::Congestion: return "congestion";
    case MechanismKind::PublicGoods: return "public-goods";
    case MechanismKind::CountNeural: return "count-neural";
  }
  return "?";
}

inline MechanismKind kind_from_name(const std::string& s) {
  if (s == "neural") return MechanismKind::Neural;
  if (s == "tabular") return MechanismKind::Tabular;
  if (s == "congestion") return MechanismKind::Congestion;
  if (s == "public-goods") return MechanismKind::PublicGoods;
  if (s == "count-neural") return MechanismKind::CountNeural;
  throw config_error("unknown mechanism kind: " + s);
}

// Counts mechanism coordinate evaluations done for counterfactual rows;
// thread-local so parallel fits do not race. The acceptance suite reads it
// after serial runs: one trajectory NLL costs exactly (T-1)*n*k.
struct EvalCounter {
  static std::uint64_t& slot() {
    thread_local std::uint64_t count = 0;
    return count;
  }
  static void reset() { slot() = 0; }
  static std::uint64_t value() { return slot(); }
  static void bump(std::uint64_t by) { slot() += by; }
};

inline constexpr std::size_t default_tabulate_cap = 1'000'000;

// A joint-action -> per-agent-payoff map. Structured kinds (congestion,
// public goods) fix the exact rules:
//   congestion:   u_i(a) = base[a_i] - kappa * |{j : a_j = a_i}|   (self included)
//   public goods: u_i(a) = gamma * ln(1 + sum_j a_j) - cost * a_i
// Neural kinds are fully-connected tanh networks; count-neural sees the
// agent's own one-hot plus the opponents' action-count vector normalized
// by (n-1), shared across agents.
class Mechanism {
 public:
  Mechanism() = default;

  static Mechanism tabular(GameShape shape, std::vector<double> table, bool trainable = false) {
    shape.validate();
    std::size_t rows = joint_count_capped(shape, default_tabulate_cap);
    if (rows > default_tabulate_cap)
      throw infeasible_error("tabular mechanism: k^n exceeds the tabulation cap of " +
                             std::to_string(default_tabulate_cap) + " entries");
    if (table.size() != rows * std::size_t(shape.n))
      throw std::invalid_argument("tabular mechanism: table needs " +
                                  std::to_string(rows * std::size_t(shape.n)) + " values, got " +
                                  std::to_string(table.size()));
    Mechanism m;
    m.kind_ = MechanismKind::Tabular;
    m.shape_ = shape;
    m.trainable_ = trainable;
    m.params_.push_back({"table", {int(rows), shape.n}, std::move(table)});
    return m;
  }

  static Mechanism congestion(GameShape shape, std::vector<double> base, double kappa,
                              bool trainable = false) {
    shape.validate();
    if (int(base.size()) != shape.k)
      throw std::invalid_argument("congestion: base needs k=" + std::to_string(shape.k) +
                                  " entries, got " + std::to_string(base.size()));
    if (kappa < 0.0) throw std::invalid_argument("congestion: kappa must be >= 0");
    Mechanism m;
    m.kind_ = MechanismKind::Congestion;
    m.shape_ = shape;
    m.trainable_ = trainable;
    m.params_.push_back({"base", {shape.k}, std::move(base)});
    m.params_.push_back({"kappa", {1}, {kappa}});
    return m;
  }

  static Mechanism public_goods(GameShape shape, double gamma, double cost,
                                bool trainable = false) {
    shape.validate();
    if (gamma <= 0.0 || cost <= 0.0)
      throw std::invalid_argument("public goods: need gamma > 0 and cost > 0");
    Mechanism m;
    m.kind_ = MechanismKind::PublicGoods;
    m.shape_ = shape;
    m.trainable_ = trainable;
    m.params_.push_back({"gamma", {1}, {gamma}});
    m.params_.push_back({"cost", {1}, {cost}});
    return m;
  }

  // Random fully-connected network over the one-hot joint action;
  // deterministic in seed, weights ~ N(0, weight_scale/sqrt(fan_in)).
  static Mechanism neural(GameShape shape, std::vector<int> widths, std::uint64_t seed,
                          double weight_scale = 1.0, bool trainable = false) {
    shape.validate();
    Mechanism m;
    m.kind_ = MechanismKind::Neural;
    m.shape_ = shape;
    m.trainable_ = trainable;
    m.seed_ = seed;
    m.widths_ = std::move(widths);
    m.init_dense(shape.n * shape.k, shape.n, weight_scale);
    return m;
  }

  // Anonymous-game network: input = own one-hot + opponents' count vector
  // normalized by (n-1); scalar output shared across agents.
  static Mechanism count_neural(GameShape shape, std::vector<int> widths, std::uint64_t seed,
                                double weight_scale = 1.0, bool trainable = false) {
    shape.validate();
    Mechanism m;
    m.kind_ = MechanismKind::CountNeural;
    m.shape_ = shape;
    m.trainable_ = trainable;
    m.seed_ = seed;
    m.widths_ = std::move(widths);
    m.init_dense(2 * shape.k, 1, weight_scale);
    return m;
  }

  MechanismKind kind() const { return kind_; }
  const GameShape& shape() const { return shape_; }
  bool trainable() const { return trainable_; }
  void set_trainable(bool t) { trainable_ = t; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<int>& widths() const { return widths_; }

  std::vector<NamedArray>& params() { return params_; }
  const std::vector<NamedArray>& params() const { return params_; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& a : params_) n += a.values.size();
    return n;
  }

  // Structured kinds keep their coefficients in-range during fitting.
  double param_lower_bound(std::size_t array_index) const {
    const std::string& name = params_[array_index].name;
    if (kind_ == MechanismKind::Congestion && name == "kappa") return 0.0;
    if (kind_ == MechanismKind::PublicGoods) return 1e-6;
    return -std::numeric_limits<double>::infinity();
  }

  void clamp_params() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      double lo = param_lower_bound(i);
      if (lo == -std::numeric_limits<double>::infinity()) continue;
      for (double& v : params_[i].values) v = std::max(v, lo);
    }
  }

  // --- plain evaluation paths ---

  std::vector<double> payoff(const JointAction& a) const {
    validate_action(shape_, a);
    std::vector<double> r(std::size_t(shape_.n));
    switch (kind_) {
      case MechanismKind::Tabular: {
        std::size_t row = joint_index(shape_, a);
        const auto& table = params_[0].values;
        for (int i = 0; i < shape_.n; ++i) r[std::size_t(i)] = table[row * shape_.n + i];
        break;
      }
      case MechanismKind::Congestion: {
        const auto& base = params_[0].values;
        double kappa = params_[1].values[0];
        std::vector<int> counts(std::size_t(shape_.k), 0);
        for (int v : a) counts[std::size_t(v)]++;
        for (int i = 0; i < shape_.n; ++i) {
          int ai = a[std::size_t(i)];
          r[std::size_t(i)] = base[std::size_t(ai)] - kappa * counts[std::size_t(ai)];
        }
        break;
      }
      case MechanismKind::PublicGoods: {
        double gamma = params_[0].values[0], cost = params_[1].values[0];
        double total = 0.0;
        for (int v : a) total += v;
        double benefit = gamma * std::log(1.0 + total);
        for (int i = 0; i < shape_.n; ++i) r[std::size_t(i)] = benefit - cost * a[std::size_t(i)];
        break;
      }
      case MechanismKind::Neural: {
        std::vector<double> x = encode_joint(shape_, a);
        dense_forward(x, 1, r);
        break;
      }
      case MechanismKind::CountNeural: {
        std::vector<double> out(1);
        std::vector<double> x(std::size_t(2) * shape_.k);
        for (int i = 0; i < shape_.n; ++i) {
          count_input(a, i, a[std::size_t(i)], x);
          dense_forward(x, 1, out);
          r[std::size_t(i)] = out[0];
        }
        break;
      }
    }
    return r;
  }

  double payoff_agent(int agent, const JointAction& a) const {
    if (agent < 0 || agent >= shape_.n)
      throw std::out_of_range("payoff_agent: agent " + std::to_string(agent) + " out of range");
    switch (kind_) {
      case MechanismKind::Tabular:
        validate_action(shape_, a);
        return params_[0].values[joint_index(shape_, a) * shape_.n + agent];
      case MechanismKind::CountNeural: {
        validate_action(shape_, a);
        std::vector<double> x(std::size_t(2) * shape_.k), out(1);
        count_input(a, agent, a[std::size_t(agent)], x);
        dense_forward(x, 1, out);
        return out[0];
      }
      default:
        return payoff(a)[std::size_t(agent)];
    }
  }

  // Counterfactual payoffs u_agent(a', a_obs[-agent]) for every own action a',
  // holding opponents at their realized actions. One batched forward for the
  // neural kinds; k coordinate evaluations either way.
  void counterfactual_row(int agent, const JointAction& a_obs, std::span<double> out) const {
    validate_action(shape_, a_obs);
    if (out.size() != std::size_t(shape_.k))
      throw std::invalid_argument("counterfactual_row: out span must have k entries");
    EvalCounter::bump(std::uint64_t(shape_.k));
    switch (kind_) {
      case MechanismKind::Tabular: {
        const auto& table = params_[0].values;
        std::size_t stride = 1;
        for (int j = agent + 1; j < shape_.n; ++j) stride *= std::size_t(shape_.k);
        std::size_t base =
            joint_index(shape_, a_obs) - std::size_t(a_obs[std::size_t(agent)]) * stride;
        for (int c = 0; c < shape_.k; ++c)
          out[std::size_t(c)] = table[(base + std::size_t(c) * stride) * shape_.n + agent];
        break;
      }
      case MechanismKind::Congestion: {
        const auto& base = params_[0].values;
        double kappa = params_[1].values[0];
        std::vector<double> counts = count_others(shape_, a_obs, agent);
        for (int c = 0; c < shape_.k; ++c)
          out[std::size_t(c)] = base[std::size_t(c)] - kappa * (counts[std::size_t(c)] + 1.0);
        break;
      }
      case MechanismKind::PublicGoods: {
        double gamma = params_[0].values[0], cost = params_[1].values[0];
        double others = 0.0;
        for (int j = 0; j < shape_.n; ++j)
          if (j != agent) others += a_obs[std::size_t(j)];
        for (int c = 0; c < shape_.k; ++c)
          out[std::size_t(c)] = gamma * std::log(1.0 + others + c) - cost * c;
        break;
      }
      case MechanismKind::Neural: {
        std::vector<double> x(std::size_t(shape_.k) * shape_.n * shape_.k);
        std::vector<double> row = encode_joint(shape_, a_obs);
        for (int c = 0; c < shape_.k; ++c) {
          double* dst = x.data() + std::size_t(c) * row.size();
          std::copy(row.begin(), row.end(), dst);
          for (int v = 0; v < shape_.k; ++v) dst[std::size_t(agent) * shape_.k + v] = 0.0;
          dst[std::size_t(agent) * shape_.k + c] = 1.0;
        }
        std::vector<double> fwd(std::size_t(shape_.k) * shape_.n);
        dense_forward(x, shape_.k, fwd);
        for (int c = 0; c < shape_.k; ++c)
          out[std::size_t(c)] = fwd[std::size_t(c) * shape_.n + agent];
        break;
      }
      case MechanismKind::CountNeural: {
        std::vector<double> x(std::size_t(shape_.k) * 2 * shape_.k);
        for (int c = 0; c < shape_.k; ++c) {
          std::span<double> dst(x.data() + std::size_t(c) * 2 * shape_.k,
                                std::size_t(2) * shape_.k);
          count_input(a_obs, agent, c, dst);
        }
        std::vector<double> fwd(std::size_t(shape_.k));
        dense_forward(x, shape_.k, fwd);
        for (int c = 0; c < shape_.k; ++c) out[std::size_t(c)] = fwd[std::size_t(c)];
        break;
      }
    }
  }

  std::vector<double> counterfactual_row(int agent, const JointAction& a_obs) const {
    std::vector<double> out(std::size_t(shape_.k));
    counterfactual_row(agent, a_obs, out);
    return out;
  }

  // --- serialization: kind tag, shape, named arrays, creation seed ---

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["kind"] = kind_name(kind_);
    j["shape"] = {{"n", shape_.n}, {"k", shape_.k}};
    j["trainable"] = trainable_;
    j["seed"] = seed_;
    j["widths"] = widths_;
    nlohmann::json arrays = nlohmann::json::array();
    for (const auto& a : params_) {
      arrays.push_back({{"name", a.name}, {"shape", a.shape}, {"values", a.values}});
    }
    j["params"] = arrays;
    return j;
  }

  static Mechanism from_json(const nlohmann::json& j) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      if (key != "kind" && key != "shape" && key != "trainable" && key != "seed" &&
          key != "widths" && key != "params")
        throw config_error("mechanism file: unknown key '" + key + "'");
    }
    Mechanism m;
    m.kind_ = kind_from_name(j.at("kind").get<std::string>());
    m.shape_.n = j.at("shape").at("n").get<int>();
    m.shape_.k = j.at("shape").at("k").get<int>();
    m.shape_.validate();
    m.trainable_ = j.at("trainable").get<bool>();
    m.seed_ = j.at("seed").get<std::uint64_t>();
    m.widths_ = j.at("widths").get<std::vector<int>>();
    for (const auto& a : j.at("params")) {
      NamedArray arr;
      arr.name = a.at("name").get<std::string>();
      arr.shape = a.at("shape").get<Shape>();
      arr.values = a.at("values").get<std::vector<double>>();
      if (numel(arr.shape) != arr.values.size())
        throw config_error("mechanism file: array '" + arr.name + "' shape/value mismatch");
      m.params_.push_back(std::move(arr));
    }
    return m;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_json().dump(2) << "\n";
  }

  static Mechanism load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw config_error("mechanism file " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  // Internal dense forward over `rows` stacked inputs; used by both neural
  // kinds. Layer arrays are W0,b0,W1,b1,... in params_.
  void dense_forward(std::span<const double> input, int rows, std::span<double> out) const {
    int in_width = int(input.size()) / rows;
    std::vector<double> cur(input.begin(), input.end());
    int cur_w = in_width;
    for (std::size_t layer = 0; layer * 2 < params_.size(); ++layer) {
      const auto& w = params_[layer * 2];
      const auto& b = params_[layer * 2 + 1];
      int q = w.shape[1];
      std::vector<double> next(std::size_t(rows) * q);
      for (int r = 0; r < rows; ++r) {
        double* orow = next.data() + std::size_t(r) * q;
        for (int c = 0; c < q; ++c) orow[c] = b.values[std::size_t(c)];
        const double* xrow = cur.data() + std::size_t(r) * cur_w;
        for (int j = 0; j < cur_w; ++j) {
          double xv = xrow[j];
          if (xv == 0.0) continue;  // one-hot blocks are mostly zero
          const double* wrow = w.values.data() + std::size_t(j) * q;
          for (int c = 0; c < q; ++c) orow[c] += xv * wrow[c];
        }
      }
      bool last = (layer * 2 + 2 >= params_.size());
      if (!last)
        for (double& v : next) v = std::tanh(v);
      cur = std::move(next);
      cur_w = q;
    }
    if (cur.size() != out.size()) throw std::logic_error("dense_forward: output size mismatch");
    std::copy(cur.begin(), cur.end(), out.begin());
  }

  // own one-hot + opponents' count vector over k actions, normalized by (n-1)
  void count_input(const JointAction& a, int agent, int own_action,
                   std::span<double> dst) const {
    double norm = shape_.n > 1 ? double(shape_.n - 1) : 1.0;
    std::fill(dst.begin(), dst.end(), 0.0);
    dst[std::size_t(own_action)] = 1.0;
    for (int j = 0; j < shape_.n; ++j)
      if (j != agent) dst[std::size_t(shape_.k) + a[std::size_t(j)]] += 1.0 / norm;
  }

 private:
  MechanismKind kind_ = MechanismKind::Tabular;
  GameShape shape_;
  bool trainable_ = false;
  std::uint64_t seed_ = 0;
  std::vector<int> widths_;
  std::vector<NamedArray> params_;

  void init_dense(int in_width, int out_width, double weight_scale) {
    Rng rng(seed_);
    std::vector<int> dims;
    dims.push_back(in_width);
    for (int w : widths_) dims.push_back(w);
    dims.push_back(out_width);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      int fan_in = dims[l], fan_out = dims[l + 1];
      NamedArray w{"W" + std::to_string(l), {fan_in, fan_out}, {}};
      w.values.resize(std::size_t(fan_in) * fan_out);
      double sd = weight_scale / std::sqrt(double(fan_in));
      for (double& v : w.values) v = rng.normal(0.0, sd);
      params_.push_back(std::move(w));
      params_.push_back({"b" + std::to_string(l), {fan_out},
                         std::vector<double>(std::size_t(fan_out), 0.0)});
    }
  }
};

// Mounts a mechanism's parameter arrays onto a tape (as params when
// trainable, consts otherwise) and builds counterfactual rows as tape ops.
class MechanismBinding {
 public:
  MechanismBinding(Mechanism& m, Tape& tape) : mech_(&m), tape_(&tape) {
    mounted_.reserve(m.params().size());
    for (const auto& arr : m.params()) {
      mounted_.push_back(m.trainable() ? tape.param(arr.shape, arr.values)
                                       : tape.constant(arr.shape, arr.values));
    }
  }

  Mechanism& mechanism() { return *mech_; }
  Tape& tape() { return *tape_; }
  const std::vector<Tensor>& mounted() const { return mounted_; }

  // Tape twin of Mechanism::counterfactual_row; same math, differentiable
  // w.r.t. the mounted parameters.
  Tensor counterfactual_row(int agent, const JointAction& a_obs) {
    const GameShape& shape = mech_->shape();
    validate_action(shape, a_obs);
    EvalCounter::bump(std::uint64_t(shape.k));
    Tape& t = *tape_;
    switch (mech_->kind()) {
      case MechanismKind::Tabular: {
        std::size_t stride = 1;
        for (int j = agent + 1; j < shape.n; ++j) stride *= std::size_t(shape.k);
        std::size_t base =
            joint_index(shape, a_obs) - std::size_t(a_obs[std::size_t(agent)]) * stride;
        std::vector<int> idx(std::size_t(shape.k));
        for (int c = 0; c < shape.k; ++c)
          idx[std::size_t(c)] = int((base + std::size_t(c) * stride) * shape.n) + agent;
        return t.take(mounted_[0], std::move(idx));
      }
      case MechanismKind::Congestion: {
        std::vector<double> counts = count_others(shape, a_obs, agent);
        for (double& c : counts) c += 1.0;  // self included
        Tensor toll = t.scale_by(t.constant({shape.k}, counts), mounted_[1]);
        return t.sub(mounted_[0], toll);
      }
      case MechanismKind::PublicGoods: {
        double others = 0.0;
        for (int j = 0; j < shape.n; ++j)
          if (j != agent) others += a_obs[std::size_t(j)];
        std::vector<double> logs(std::size_t(shape.k)), levels(std::size_t(shape.k));
        for (int c = 0; c < shape.k; ++c) {
          logs[std::size_t(c)] = std::log(1.0 + others + c);
          levels[std::size_t(c)] = double(c);
        }
        return t.sub(t.scale_by(t.constant({shape.k}, logs), mounted_[0]),
                     t.scale_by(t.constant({shape.k}, levels), mounted_[1]));
      }
      case MechanismKind::Neural: {
        int in = shape.n * shape.k;
        std::vector<double> x(std::size_t(shape.k) * in);
        std::vector<double> row = encode_joint(shape, a_obs);
        for (int c = 0; c < shape.k; ++c) {
          double* dst = x.data() + std::size_t(c) * in;
          std::copy(row.begin(), row.end(), dst);
          for (int v = 0; v < shape.k; ++v) dst[std::size_t(agent) * shape.k + v] = 0.0;
          dst[std::size_t(agent) * shape.k + c] = 1.0;
        }
        Tensor out = dense_tape(t.constant({shape.k, in}, x));
        std::vector<int> idx(std::size_t(shape.k));
        for (int c = 0; c < shape.k; ++c) idx[std::size_t(c)] = c * shape.n + agent;
        return t.take(out, std::move(idx));
      }
      case MechanismKind::CountNeural: {
        int in = 2 * shape.k;
        std::vector<double> x(std::size_t(shape.k) * in);
        for (int c = 0; c < shape.k; ++c)
          mech_->count_input(a_obs, agent, c,
                             std::span<double>(x.data() + std::size_t(c) * in, std::size_t(in)));
        Tensor out = dense_tape(t.constant({shape.k, in}, x));
        return t.reshape(out, {shape.k});
      }
    }
    throw std::logic_error("counterfactual_row: bad kind");
  }

 private:
  Mechanism* mech_;
  Tape* tape_;
  std::vector<Tensor> mounted_;

  Tensor dense_tape(Tensor x) {
    Tape& t = *tape_;
    std::size_t layers = mounted_.size() / 2;
    Tensor cur = x;
    for (std::size_t l = 0; l < layers; ++l) {
      cur = t.affine(cur, mounted_[l * 2], mounted_[l * 2 + 1]);
      if (l + 1 < layers) cur = t.tanh(cur);
    }
    return cur;
  }
};

// Full k^n x n payoff table (row-major, joint_index order). Refuses above
// the cap; large-scale shapes must use on-the-fly evaluation instead.
inline std::vector<double> tabulate(const Mechanism& m,
                                    std::size_t cap = default_tabulate_cap) {
  const GameShape& shape = m.shape();
  std::size_t rows = joint_count_capped(shape, cap);
  if (rows > cap)
    throw infeasible_error("tabulate: joint action space k^n = " + std::to_string(shape.k) +
                           "^" + std::to_string(shape.n) + " exceeds the cap of " +
                           std::to_string(cap) + " entries; use a structured or count-based"
                           " evaluation path instead");
  std::vector<double> table(rows * std::size_t(shape.n));
  JointAction a(std::size_t(shape.n), 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<double> pay = m.payoff(a);
    std::copy(pay.begin(), pay.end(), table.begin() + long(r * std::size_t(shape.n)));
    for (int i = shape.n - 1; i >= 0; --i) {  // odometer in joint_index order
      if (++a[std::size_t(i)] < shape.k) break;
      a[std::size_t(i)] = 0;
    }
  }
  return table;
}

// Mean of (sum_i r_i)^2 over a sample of joint actions.
inline double budget_imbalance(const Mechanism& m, std::span<const JointAction> sample) {
  if (sample.empty()) throw std::invalid_argument("budget_imbalance: empty sample");
  double acc = 0.0;
  for (const JointAction& a : sample) {
    std::vector<double> r = m.payoff(a);
    double s = 0.0;
    for (double v : r) s += v;
    acc += s * s;
  }
  return acc / double(sample.size());
}

}  // namespace diml
