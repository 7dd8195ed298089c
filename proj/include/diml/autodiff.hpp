#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diml/common.hpp"

namespace diml {

// Dense row-major shape. {} is not used; scalars are {1}.
using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= std::size_t(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tape;

// Handle into a Tape; cheap to copy, the tape owns all storage.
struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  const std::vector<double>& values() const;
  std::size_t size() const { return values().size(); }
  double scalar() const;
};

// Recording tape for reverse-mode differentiation. Forward values are
// computed eagerly as nodes are appended, so parents always precede
// children and backward() is a single reverse sweep. One tape per
// trajectory; tapes are independent across workers.
class Tape {
 public:
  enum class Op : std::uint8_t {
    Param, Const, Add, Sub, Mul, Scale, AddScalar, ScaleBy, Square,
    Log, Exp, Tanh, Sum, Mean, Affine, SoftmaxRows, Take, Reshape, Concat
  };

  struct Node {
    Op op;
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;    // sized during backward()
    std::vector<int> parents;
    double aux = 0.0;            // scale factor / added scalar
    std::vector<int> indices;    // Take gather indices
  };

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(std::size_t(id)); }
  const std::vector<int>& param_ids() const { return params_; }

  Tensor param(Shape shape, std::span<const double> values) {
    check_extent(shape, values.size(), "param");
    for (double v : values)
      if (!std::isfinite(v))
        throw std::invalid_argument("param: non-finite input value");
    int id = push(Op::Param, std::move(shape),
                  std::vector<double>(values.begin(), values.end()), {});
    params_.push_back(id);
    return {this, id};
  }

  Tensor constant(Shape shape, std::span<const double> values) {
    check_extent(shape, values.size(), "const");
    int id = push(Op::Const, std::move(shape),
                  std::vector<double>(values.begin(), values.end()), {});
    return {this, id};
  }

  Tensor constant(Shape shape, std::initializer_list<double> values) {
    return constant(std::move(shape), std::span<const double>(values.begin(), values.size()));
  }

  Tensor zeros(Shape shape) {
    std::size_t n = numel(shape);
    int id = push(Op::Const, std::move(shape), std::vector<double>(n, 0.0), {});
    return {this, id};
  }

  Tensor scalar_const(double v) { return constant({1}, {v}); }

  // --- elementwise ---

  Tensor add(Tensor a, Tensor b) { return binary(Op::Add, a, b); }
  Tensor sub(Tensor a, Tensor b) { return binary(Op::Sub, a, b); }
  Tensor mul(Tensor a, Tensor b) { return binary(Op::Mul, a, b); }

  Tensor scale(Tensor x, double c) {
    const Node& n = ref(x, "scale");
    std::vector<double> out(n.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * n.values[i];
    int id = push(Op::Scale, n.shape, std::move(out), {x.id});
    nodes_[std::size_t(id)].aux = c;
    return {this, id};
  }

  Tensor add_scalar(Tensor x, double c) {
    const Node& n = ref(x, "add_scalar");
    std::vector<double> out(n.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.values[i] + c;
    int id = push(Op::AddScalar, n.shape, std::move(out), {x.id});
    nodes_[std::size_t(id)].aux = c;
    return {this, id};
  }

  // x * s with s a 1-element tensor (trainable temperature, toll coefficient, ...).
  Tensor scale_by(Tensor x, Tensor s) {
    const Node& nx = ref(x, "scale_by");
    const Node& ns = ref(s, "scale_by");
    if (ns.values.size() != 1)
      throw std::invalid_argument("scale_by: scale tensor must have 1 element, got " +
                                  shape_str(ns.shape));
    double c = ns.values[0];
    std::vector<double> out(nx.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * nx.values[i];
    return {this, push(Op::ScaleBy, nx.shape, std::move(out), {x.id, s.id})};
  }

  Tensor square(Tensor x) {
    const Node& n = ref(x, "square");
    std::vector<double> out(n.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.values[i] * n.values[i];
    return {this, push(Op::Square, n.shape, std::move(out), {x.id})};
  }

  Tensor log(Tensor x) {
    const Node& n = ref(x, "log");
    std::vector<double> out(n.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!(n.values[i] > 0.0))
        throw std::domain_error("log: non-positive input " + std::to_string(n.values[i]));
      out[i] = std::log(n.values[i]);
    }
    return {this, push(Op::Log, n.shape, std::move(out), {x.id})};
  }

  Tensor exp(Tensor x) {
    const Node& n = ref(x, "exp");
    std::vector<double> out(n.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(n.values[i]);
    return {this, push(Op::Exp, n.shape, std::move(out), {x.id})};
  }

  Tensor tanh(Tensor x) {
    const Node& n = ref(x, "tanh");
    std::vector<double> out(n.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(n.values[i]);
    return {this, push(Op::Tanh, n.shape, std::move(out), {x.id})};
  }

  // --- reductions ---

  Tensor sum(Tensor x) {
    const Node& n = ref(x, "sum");
    double acc = 0.0;
    for (double v : n.values) acc += v;
    return {this, push(Op::Sum, {1}, {acc}, {x.id})};
  }

  Tensor mean(Tensor x) {
    const Node& n = ref(x, "mean");
    double acc = 0.0;
    for (double v : n.values) acc += v;
    return {this, push(Op::Mean, {1}, {acc / double(n.values.size())}, {x.id})};
  }

  // --- linear algebra ---

  // y = x W + b with x (m x p), W (p x q), b (q); b broadcast over rows.
  Tensor affine(Tensor x, Tensor w, Tensor b) {
    const Node& nx = ref(x, "affine");
    const Node& nw = ref(w, "affine");
    const Node& nb = ref(b, "affine");
    if (nx.shape.size() != 2 || nw.shape.size() != 2)
      throw std::invalid_argument("affine: need 2-D x and W, got " + shape_str(nx.shape) +
                                  " and " + shape_str(nw.shape));
    int m = nx.shape[0], p = nx.shape[1], q = nw.shape[1];
    if (nw.shape[0] != p)
      throw std::invalid_argument("affine: inner dimensions differ, x " + shape_str(nx.shape) +
                                  " vs W " + shape_str(nw.shape));
    if (int(numel(nb.shape)) != q)
      throw std::invalid_argument("affine: bias " + shape_str(nb.shape) + " does not match W " +
                                  shape_str(nw.shape));
    std::vector<double> out(std::size_t(m) * std::size_t(q));
    for (int r = 0; r < m; ++r) {
      double* orow = out.data() + std::size_t(r) * q;
      for (int c = 0; c < q; ++c) orow[c] = nb.values[std::size_t(c)];
      const double* xrow = nx.values.data() + std::size_t(r) * p;
      for (int j = 0; j < p; ++j) {
        double xv = xrow[j];
        const double* wrow = nw.values.data() + std::size_t(j) * q;
        for (int c = 0; c < q; ++c) orow[c] += xv * wrow[c];
      }
    }
    return {this, push(Op::Affine, {m, q}, std::move(out), {x.id, w.id, b.id})};
  }

  // Row-wise softmax with per-row max subtraction; rows sum to 1 within 1e-12
  // and inputs up to +-1e3 stay finite.
  Tensor softmax_rows(Tensor x) {
    const Node& n = ref(x, "softmax_rows");
    if (n.shape.size() != 2)
      throw std::invalid_argument("softmax_rows: need 2-D input, got " + shape_str(n.shape));
    int rows = n.shape[0], cols = n.shape[1];
    std::vector<double> out(n.values.size());
    for (int r = 0; r < rows; ++r) {
      const double* in = n.values.data() + std::size_t(r) * cols;
      double* o = out.data() + std::size_t(r) * cols;
      double mx = in[0];
      for (int c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
      double z = 0.0;
      for (int c = 0; c < cols; ++c) {
        o[c] = std::exp(in[c] - mx);
        z += o[c];
      }
      for (int c = 0; c < cols; ++c) o[c] /= z;
    }
    return {this, push(Op::SoftmaxRows, n.shape, std::move(out), {x.id})};
  }

  // Gather flat entries; backward scatter-adds (repeated indices accumulate).
  Tensor take(Tensor x, std::vector<int> indices) {
    const Node& n = ref(x, "take");
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      int idx = indices[i];
      if (idx < 0 || std::size_t(idx) >= n.values.size())
        throw std::out_of_range("take: index " + std::to_string(idx) + " out of range for " +
                                shape_str(n.shape));
      out[i] = n.values[std::size_t(idx)];
    }
    int id = push(Op::Take, {int(indices.size())}, std::move(out), {x.id});
    nodes_[std::size_t(id)].indices = std::move(indices);
    return {this, id};
  }

  Tensor reshape(Tensor x, Shape shape) {
    const Node& n = ref(x, "reshape");
    if (numel(shape) != n.values.size())
      throw std::invalid_argument("reshape: cannot view " + shape_str(n.shape) + " as " +
                                  shape_str(shape));
    return {this, push(Op::Reshape, std::move(shape), n.values, {x.id})};
  }

  // 1-D concatenation in argument order.
  Tensor concat(std::span<const Tensor> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    std::vector<double> out;
    std::vector<int> parents;
    for (const Tensor& t : parts) {
      const Node& n = ref(t, "concat");
      out.insert(out.end(), n.values.begin(), n.values.end());
      parents.push_back(t.id);
    }
    return {this, push(Op::Concat, {int(out.size())}, std::move(out), std::move(parents))};
  }

  // Value copy with no parent: gradient flow stops here (truncated BPTT).
  Tensor detach(Tensor x) {
    const Node& n = ref(x, "detach");
    return constant(n.shape, n.values);
  }

  // --- reverse sweep ---

  // Seeds d(root)/d(root) = 1 and accumulates adjoints down the tape.
  // Gradients from any previous backward() are cleared first.
  void backward(Tensor root) {
    const Node& r = ref(root, "backward");
    if (r.values.size() != 1)
      throw std::invalid_argument("backward: root must be scalar, got " + shape_str(r.shape));
    for (std::size_t i = 0; i <= std::size_t(root.id); ++i)
      nodes_[i].grad.assign(nodes_[i].values.size(), 0.0);
    for (std::size_t i = std::size_t(root.id) + 1; i < nodes_.size(); ++i)
      nodes_[i].grad.clear();
    nodes_[std::size_t(root.id)].grad[0] = 1.0;

    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[std::size_t(i)];
      switch (n.op) {
        case Op::Param:
        case Op::Const:
          break;
        case Op::Add: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          Node& b = nodes_[std::size_t(n.parents[1])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) {
            a.grad[j] += n.grad[j];
            b.grad[j] += n.grad[j];
          }
          break;
        }
        case Op::Sub: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          Node& b = nodes_[std::size_t(n.parents[1])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) {
            a.grad[j] += n.grad[j];
            b.grad[j] -= n.grad[j];
          }
          break;
        }
        case Op::Mul: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          Node& b = nodes_[std::size_t(n.parents[1])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) {
            a.grad[j] += n.grad[j] * b.values[j];
            b.grad[j] += n.grad[j] * a.values[j];
          }
          break;
        }
        case Op::Scale: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) a.grad[j] += n.aux * n.grad[j];
          break;
        }
        case Op::AddScalar: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) a.grad[j] += n.grad[j];
          break;
        }
        case Op::ScaleBy: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          Node& s = nodes_[std::size_t(n.parents[1])];
          double c = s.values[0];
          double sacc = 0.0;
          for (std::size_t j = 0; j < n.grad.size(); ++j) {
            a.grad[j] += c * n.grad[j];
            sacc += n.grad[j] * a.values[j];
          }
          s.grad[0] += sacc;
          break;
        }
        case Op::Square: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.grad.size(); ++j)
            a.grad[j] += 2.0 * a.values[j] * n.grad[j];
          break;
        }
        case Op::Log: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) a.grad[j] += n.grad[j] / a.values[j];
          break;
        }
        case Op::Exp: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) a.grad[j] += n.grad[j] * n.values[j];
          break;
        }
        case Op::Tanh: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.grad.size(); ++j)
            a.grad[j] += n.grad[j] * (1.0 - n.values[j] * n.values[j]);
          break;
        }
        case Op::Sum: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < a.grad.size(); ++j) a.grad[j] += n.grad[0];
          break;
        }
        case Op::Mean: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          double g = n.grad[0] / double(a.grad.size());
          for (std::size_t j = 0; j < a.grad.size(); ++j) a.grad[j] += g;
          break;
        }
        case Op::Affine: {
          Node& x = nodes_[std::size_t(n.parents[0])];
          Node& w = nodes_[std::size_t(n.parents[1])];
          Node& b = nodes_[std::size_t(n.parents[2])];
          int m = x.shape[0], p = x.shape[1], q = w.shape[1];
          for (int r = 0; r < m; ++r) {
            const double* grow = n.grad.data() + std::size_t(r) * q;
            const double* xrow = x.values.data() + std::size_t(r) * p;
            double* gxrow = x.grad.data() + std::size_t(r) * p;
            for (int c = 0; c < q; ++c) b.grad[std::size_t(c)] += grow[c];
            for (int j = 0; j < p; ++j) {
              const double* wrow = w.values.data() + std::size_t(j) * q;
              double* gwrow = w.grad.data() + std::size_t(j) * q;
              double acc = 0.0;
              double xv = xrow[j];
              for (int c = 0; c < q; ++c) {
                acc += grow[c] * wrow[c];
                gwrow[c] += grow[c] * xv;
              }
              gxrow[j] += acc;
            }
          }
          break;
        }
        case Op::SoftmaxRows: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          int rows = n.shape[0], cols = n.shape[1];
          for (int r = 0; r < rows; ++r) {
            const double* p = n.values.data() + std::size_t(r) * cols;
            const double* g = n.grad.data() + std::size_t(r) * cols;
            double* ga = a.grad.data() + std::size_t(r) * cols;
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) dot += g[c] * p[c];
            for (int c = 0; c < cols; ++c) ga[c] += p[c] * (g[c] - dot);
          }
          break;
        }
        case Op::Take: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.indices.size(); ++j)
            a.grad[std::size_t(n.indices[j])] += n.grad[j];
          break;
        }
        case Op::Reshape: {
          Node& a = nodes_[std::size_t(n.parents[0])];
          for (std::size_t j = 0; j < n.grad.size(); ++j) a.grad[j] += n.grad[j];
          break;
        }
        case Op::Concat: {
          std::size_t off = 0;
          for (int pid : n.parents) {
            Node& a = nodes_[std::size_t(pid)];
            for (std::size_t j = 0; j < a.grad.size(); ++j) a.grad[j] += n.grad[off + j];
            off += a.grad.size();
          }
          break;
        }
      }
    }
  }

  std::span<const double> grad(Tensor t) const {
    const Node& n = ref(t, "grad");
    if (n.grad.size() != n.values.size())
      throw std::logic_error("grad: backward() has not reached this node");
    return {n.grad.data(), n.grad.size()};
  }

 private:
  std::vector<Node> nodes_;
  std::vector<int> params_;

  static void check_extent(const Shape& shape, std::size_t n, const char* who) {
    if (numel(shape) != n)
      throw std::invalid_argument(std::string(who) + ": shape " + shape_str(shape) +
                                  " does not hold " + std::to_string(n) + " values");
  }

  const Node& ref(Tensor t, const char* who) const {
    if (t.tape != this)
      throw std::invalid_argument(std::string(who) + ": tensor belongs to another tape");
    return nodes_.at(std::size_t(t.id));
  }

  Tensor binary(Op op, Tensor a, Tensor b) {
    const Node& na = ref(a, "binary op");
    const Node& nb = ref(b, "binary op");
    if (na.shape != nb.shape)
      throw std::invalid_argument("shape mismatch: " + shape_str(na.shape) + " vs " +
                                  shape_str(nb.shape));
    std::vector<double> out(na.values.size());
    switch (op) {
      case Op::Add:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.values[i] + nb.values[i];
        break;
      case Op::Sub:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.values[i] - nb.values[i];
        break;
      case Op::Mul:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = na.values[i] * nb.values[i];
        break;
      default:
        throw std::logic_error("binary: bad op");
    }
    return {this, push(op, na.shape, std::move(out), {a.id, b.id})};
  }

  int push(Op op, Shape shape, std::vector<double> values, std::vector<int> parents) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    n.values = std::move(values);
    n.parents = std::move(parents);
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }
};

inline const Shape& Tensor::shape() const { return tape->node(id).shape; }
inline const std::vector<double>& Tensor::values() const { return tape->node(id).values; }
inline double Tensor::scalar() const {
  const auto& v = values();
  if (v.size() != 1)
    throw std::invalid_argument("scalar(): tensor has " + std::to_string(v.size()) + " elements");
  return v[0];
}

// --- finite-difference validation ---

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed(double tol) const { return max_rel_error <= tol; }
};

// Compares analytic gradients against central differences for a scalar-valued
// graph builder f(tape, params) -> Tensor. Relative error uses
// |a - fd| / max(|a|, |fd|, 1e-6); the floor absorbs finite-difference noise
// on near-zero coordinates.
template <typename BuildFn>
GradCheckResult grad_check(BuildFn&& build, std::vector<std::vector<double>> values, double h) {
  auto eval = [&](const std::vector<std::vector<double>>& vals) {
    Tape tape;
    std::vector<Tensor> params;
    params.reserve(vals.size());
    for (const auto& v : vals) params.push_back(tape.param({int(v.size())}, v));
    return build(tape, params).scalar();
  };

  Tape tape;
  std::vector<Tensor> params;
  params.reserve(values.size());
  for (const auto& v : values) params.push_back(tape.param({int(v.size())}, v));
  Tensor root = build(tape, params);
  tape.backward(root);

  GradCheckResult result;
  for (std::size_t p = 0; p < values.size(); ++p) {
    auto analytic = tape.grad(params[p]);
    for (std::size_t j = 0; j < values[p].size(); ++j) {
      auto perturbed = values;
      perturbed[p][j] += h;
      double fp = eval(perturbed);
      perturbed[p][j] -= 2.0 * h;
      double fm = eval(perturbed);
      double fd = (fp - fm) / (2.0 * h);
      double denom = std::max({std::abs(analytic[j]), std::abs(fd), 1e-6});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(analytic[j] - fd) / denom);
      ++result.coords_checked;
    }
  }
  return result;
}

}  // namespace diml
