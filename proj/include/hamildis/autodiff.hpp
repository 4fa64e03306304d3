#pragma once

// Reverse-mode computational graph on an append-only tape. Supports nested
// differentiation: grad() can either return plain values or emit the gradient
// as new graph nodes (create_graph), so gradients of gradients work with one
// engine. All arithmetic is double precision.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hamildis::ad {

enum class Op : std::uint8_t {
  Const,
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Tanh,
  Elu,
  EluGrad,   // d/dx elu(x); emitted by graph-mode backward
  EluGrad2,  // d/dx elu_grad(x); closed under further differentiation
  Square,
  Affine,  // bias + sum_i w_i * x_i over an argument-pool slice
};

struct Node {
  Op op{};
  std::uint32_t a = 0;  // lhs operand, or argument-pool offset for Affine
  std::uint32_t b = 0;  // rhs operand, or input count n for Affine
  double value = 0.0;
};

class Tape;

/// Handle to one scalar value on a tape.
class Var {
 public:
  Var() = default;
  double value() const;
  Tape* tape() const { return tape_; }
  std::uint32_t index() const { return idx_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::uint32_t i) : tape_(t), idx_(i) {}
  Tape* tape_ = nullptr;
  std::uint32_t idx_ = 0;
};

struct TapeMark {
  std::size_t nodes = 0;
  std::size_t args = 0;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1 << 12); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never accumulates gradient.
  Var constant(double v) { return push(Op::Const, 0, 0, finite(v, "const")); }

  /// Differentiable input.
  Var leaf(double v) { return push(Op::Leaf, 0, 0, finite(v, "leaf")); }

  std::size_t node_count() const { return nodes_.size(); }
  TapeMark mark() const { return {nodes_.size(), args_.size()}; }

  /// Drops every node recorded after the mark. Vars created since are
  /// invalidated; earlier Vars keep their values.
  void rewind(TapeMark m) {
    nodes_.resize(m.nodes);
    args_.resize(m.args);
  }

  void clear() {
    nodes_.clear();
    args_.clear();
  }

  void reserve(std::size_t n) { nodes_.reserve(n); }

  double value(Var v) const { return nodes_[v.idx_].value; }

  Var add(Var x, Var y) {
    same(x, y);
    return push(Op::Add, x.idx_, y.idx_, finite(x.value() + y.value(), "add"));
  }
  Var sub(Var x, Var y) {
    same(x, y);
    return push(Op::Sub, x.idx_, y.idx_, finite(x.value() - y.value(), "sub"));
  }
  Var mul(Var x, Var y) {
    same(x, y);
    return push(Op::Mul, x.idx_, y.idx_, finite(x.value() * y.value(), "mul"));
  }
  Var div(Var x, Var y) {
    same(x, y);
    if (y.value() == 0.0) throw std::domain_error("ad: division by zero");
    return push(Op::Div, x.idx_, y.idx_, finite(x.value() / y.value(), "div"));
  }
  Var neg(Var x) {
    same(x);
    return push(Op::Neg, x.idx_, 0, -x.value());
  }
  Var exp(Var x) {
    same(x);
    return push(Op::Exp, x.idx_, 0, finite(std::exp(x.value()), "exp"));
  }
  Var log(Var x) {
    same(x);
    if (x.value() <= 0.0) throw std::domain_error("ad: log of non-positive input");
    return push(Op::Log, x.idx_, 0, finite(std::log(x.value()), "log"));
  }
  Var tanh(Var x) {
    same(x);
    return push(Op::Tanh, x.idx_, 0, std::tanh(x.value()));
  }
  Var elu(Var x) {
    same(x);
    const double v = x.value();
    return push(Op::Elu, x.idx_, 0, v > 0.0 ? v : std::expm1(v));
  }
  Var elu_grad(Var x) {
    same(x);
    const double v = x.value();
    return push(Op::EluGrad, x.idx_, 0, v > 0.0 ? 1.0 : std::exp(v));
  }
  Var elu_grad2(Var x) {
    same(x);
    const double v = x.value();
    return push(Op::EluGrad2, x.idx_, 0, v > 0.0 ? 0.0 : std::exp(v));
  }
  Var square(Var x) {
    same(x);
    return push(Op::Square, x.idx_, 0, finite(x.value() * x.value(), "square"));
  }

  /// bias + dot(w, x). w and x must have equal length.
  Var affine(Var bias, std::span<const Var> w, std::span<const Var> x) {
    same(bias);
    if (w.size() != x.size()) throw std::invalid_argument("ad: affine size mismatch");
    double acc = bias.value();
    const auto offset = static_cast<std::uint32_t>(args_.size());
    args_.push_back(bias.idx_);
    for (const Var& wi : w) {
      same(wi);
      args_.push_back(wi.idx_);
    }
    for (const Var& xi : x) {
      same(xi);
      args_.push_back(xi.idx_);
    }
    const std::uint32_t n = static_cast<std::uint32_t>(w.size());
    for (std::uint32_t i = 0; i < n; ++i) {
      acc += nodes_[args_[offset + 1 + i]].value * nodes_[args_[offset + 1 + n + i]].value;
    }
    return push(Op::Affine, offset, n, finite(acc, "affine"));
  }

  /// Gradient of `output` with respect to each entry of `wrt`.
  ///
  /// With create_graph the returned gradients are nodes on this tape and can
  /// be differentiated again; otherwise they are detached constants.
  /// Entries unreachable from the output get an exact zero. Vars from another
  /// tape are an error.
  std::vector<Var> gradient(Var output, std::span<const Var> wrt, bool create_graph) {
    same(output);
    for (const Var& v : wrt) same(v);
    return create_graph ? gradient_graph(output, wrt) : gradient_values_vars(output, wrt);
  }

  /// Value-mode gradient accumulated into a caller buffer:
  /// acc[i] += d(output)/d(wrt[i]). No nodes are created.
  void gradient_accumulate(Var output, std::span<const Var> wrt, std::span<double> acc) {
    same(output);
    if (acc.size() != wrt.size()) throw std::invalid_argument("ad: accumulator size mismatch");
    backward_values(output.idx_);
    for (std::size_t i = 0; i < wrt.size(); ++i) {
      same(wrt[i]);
      const std::uint32_t j = wrt[i].idx_;
      if (j <= output.idx_ && nodes_[j].op != Op::Const) acc[i] += adj_[j];
    }
  }

 private:
  Var push(Op op, std::uint32_t a, std::uint32_t b, double value) {
    if (nodes_.size() >= 0xfffffff0u) throw std::length_error("ad: tape overflow");
    nodes_.push_back({op, a, b, value});
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  static double finite(double v, const char* what) {
    if (!std::isfinite(v)) {
      throw std::overflow_error(std::string("ad: non-finite result in ") + what);
    }
    return v;
  }

  void same(Var v) const {
    if (v.tape_ != this) throw std::invalid_argument("ad: variable from a different tape");
  }
  void same(Var x, Var y) const {
    same(x);
    same(y);
  }

  // Plain-double adjoint sweep from `out` down to the tape bottom.
  void backward_values(std::uint32_t out) {
    adj_.assign(out + 1, 0.0);
    adj_[out] = 1.0;
    for (std::uint32_t i = out + 1; i-- > 0;) {
      const double a = adj_[i];
      if (a == 0.0) continue;
      const Node& n = nodes_[i];
      switch (n.op) {
        case Op::Const:
        case Op::Leaf:
          break;
        case Op::Add:
          adj_[n.a] += a;
          adj_[n.b] += a;
          break;
        case Op::Sub:
          adj_[n.a] += a;
          adj_[n.b] -= a;
          break;
        case Op::Mul:
          adj_[n.a] += a * nodes_[n.b].value;
          adj_[n.b] += a * nodes_[n.a].value;
          break;
        case Op::Div:
          adj_[n.a] += a / nodes_[n.b].value;
          adj_[n.b] -= a * n.value / nodes_[n.b].value;
          break;
        case Op::Neg:
          adj_[n.a] -= a;
          break;
        case Op::Exp:
          adj_[n.a] += a * n.value;
          break;
        case Op::Log:
          adj_[n.a] += a / nodes_[n.a].value;
          break;
        case Op::Tanh:
          adj_[n.a] += a * (1.0 - n.value * n.value);
          break;
        case Op::Elu:
          // elu(x) = e^x - 1 for x <= 0, so e^x = value + 1
          adj_[n.a] += a * (nodes_[n.a].value > 0.0 ? 1.0 : n.value + 1.0);
          break;
        case Op::EluGrad:
        case Op::EluGrad2:
          adj_[n.a] += a * (nodes_[n.a].value > 0.0 ? 0.0 : std::exp(nodes_[n.a].value));
          break;
        case Op::Square:
          adj_[n.a] += a * 2.0 * nodes_[n.a].value;
          break;
        case Op::Affine: {
          const std::uint32_t off = n.a, cnt = n.b;
          adj_[args_[off]] += a;
          for (std::uint32_t k = 0; k < cnt; ++k) {
            const std::uint32_t wi = args_[off + 1 + k];
            const std::uint32_t xi = args_[off + 1 + cnt + k];
            adj_[wi] += a * nodes_[xi].value;
            adj_[xi] += a * nodes_[wi].value;
          }
          break;
        }
      }
    }
  }

  std::vector<Var> gradient_values_vars(Var output, std::span<const Var> wrt) {
    backward_values(output.idx_);
    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const Var& v : wrt) {
      const bool live = v.idx_ <= output.idx_ && nodes_[v.idx_].op != Op::Const;
      result.push_back(constant(live ? adj_[v.idx_] : 0.0));
    }
    return result;
  }

  std::vector<Var> gradient_graph(Var output, std::span<const Var> wrt) {
    const std::uint32_t out = output.idx_;
    // Forward dependency marks: nodes whose value depends on some wrt entry.
    dep_.assign(out + 1, 0);
    for (const Var& v : wrt) {
      if (v.idx_ <= out && nodes_[v.idx_].op != Op::Const) dep_[v.idx_] = 1;
    }
    for (std::uint32_t i = 0; i <= out; ++i) {
      const Node& n = nodes_[i];
      switch (n.op) {
        case Op::Const:
        case Op::Leaf:
          break;
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
          dep_[i] = dep_[i] | dep_[n.a] | dep_[n.b];
          break;
        case Op::Affine: {
          std::uint8_t d = dep_[i];
          const std::uint32_t off = n.a, total = 1 + 2 * n.b;
          for (std::uint32_t k = 0; k < total && !d; ++k) d = dep_[args_[off + k]];
          dep_[i] = d;
          break;
        }
        default:  // unary
          dep_[i] = dep_[i] | dep_[n.a];
          break;
      }
    }

    adj_node_.assign(out + 1, -1);
    adj_node_[out] = static_cast<std::int64_t>(constant(1.0).idx_);
    auto accumulate = [&](std::uint32_t target, Var contribution) {
      if (!dep_[target]) return;
      adj_node_[target] = adj_node_[target] < 0
                              ? static_cast<std::int64_t>(contribution.idx_)
                              : static_cast<std::int64_t>(
                                    add(at(static_cast<std::uint32_t>(adj_node_[target])),
                                        contribution)
                                        .idx_);
    };

    for (std::uint32_t i = out + 1; i-- > 0;) {
      if (adj_node_[i] < 0 || !dep_[i]) continue;
      const Node n = nodes_[i];  // copy: emission below reallocates nodes_
      const Var a = at(static_cast<std::uint32_t>(adj_node_[i]));
      switch (n.op) {
        case Op::Const:
        case Op::Leaf:
          break;
        case Op::Add:
          accumulate(n.a, a);
          accumulate(n.b, a);
          break;
        case Op::Sub:
          accumulate(n.a, a);
          accumulate(n.b, neg(a));
          break;
        case Op::Mul:
          if (dep_[n.a]) accumulate(n.a, mul(a, at(n.b)));
          if (dep_[n.b]) accumulate(n.b, mul(a, at(n.a)));
          break;
        case Op::Div:
          if (dep_[n.a]) accumulate(n.a, div(a, at(n.b)));
          if (dep_[n.b]) accumulate(n.b, neg(div(mul(a, at(i)), at(n.b))));
          break;
        case Op::Neg:
          accumulate(n.a, neg(a));
          break;
        case Op::Exp:
          accumulate(n.a, mul(a, at(i)));
          break;
        case Op::Log:
          accumulate(n.a, div(a, at(n.a)));
          break;
        case Op::Tanh:
          accumulate(n.a, mul(a, sub(constant(1.0), square(at(i)))));
          break;
        case Op::Elu:
          accumulate(n.a, mul(a, elu_grad(at(n.a))));
          break;
        case Op::EluGrad:
        case Op::EluGrad2:
          accumulate(n.a, mul(a, elu_grad2(at(n.a))));
          break;
        case Op::Square:
          accumulate(n.a, mul(a, mul(constant(2.0), at(n.a))));
          break;
        case Op::Affine: {
          const std::uint32_t off = n.a, cnt = n.b;
          accumulate(args_[off], a);
          for (std::uint32_t k = 0; k < cnt; ++k) {
            const std::uint32_t wi = args_[off + 1 + k];
            const std::uint32_t xi = args_[off + 1 + cnt + k];
            if (dep_[wi]) accumulate(wi, mul(a, at(xi)));
            if (dep_[xi]) accumulate(xi, mul(a, at(wi)));
          }
          break;
        }
      }
    }

    std::vector<Var> result;
    result.reserve(wrt.size());
    for (const Var& v : wrt) {
      const std::int64_t g = v.idx_ <= out ? adj_node_[v.idx_] : -1;
      result.push_back(g >= 0 ? at(static_cast<std::uint32_t>(g)) : constant(0.0));
    }
    return result;
  }

  Var at(std::uint32_t idx) { return Var(this, idx); }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> args_;
  // backward scratch, reused across calls
  std::vector<double> adj_;
  std::vector<std::int64_t> adj_node_;
  std::vector<std::uint8_t> dep_;
};

inline double Var::value() const { return tape_->value(*this); }

inline Var operator+(Var x, Var y) { return x.tape()->add(x, y); }
inline Var operator-(Var x, Var y) { return x.tape()->sub(x, y); }
inline Var operator*(Var x, Var y) { return x.tape()->mul(x, y); }
inline Var operator/(Var x, Var y) { return x.tape()->div(x, y); }
inline Var operator-(Var x) { return x.tape()->neg(x); }
inline Var operator+(Var x, double c) { return x + x.tape()->constant(c); }
inline Var operator+(double c, Var x) { return x.tape()->constant(c) + x; }
inline Var operator-(Var x, double c) { return x - x.tape()->constant(c); }
inline Var operator-(double c, Var x) { return x.tape()->constant(c) - x; }
inline Var operator*(Var x, double c) { return x * x.tape()->constant(c); }
inline Var operator*(double c, Var x) { return x.tape()->constant(c) * x; }
inline Var operator/(Var x, double c) { return x / x.tape()->constant(c); }
inline Var operator/(double c, Var x) { return x.tape()->constant(c) / x; }

inline Var exp(Var x) { return x.tape()->exp(x); }
inline Var log(Var x) { return x.tape()->log(x); }
inline Var tanh(Var x) { return x.tape()->tanh(x); }
inline Var elu(Var x) { return x.tape()->elu(x); }
inline Var square(Var x) { return x.tape()->square(x); }
inline Var affine(Var bias, std::span<const Var> w, std::span<const Var> x) {
  return bias.tape()->affine(bias, w, x);
}
inline Var dot(std::span<const Var> w, std::span<const Var> x) {
  if (w.empty()) throw std::invalid_argument("ad: empty dot");
  return affine(w.front().tape()->constant(0.0), w, x);
}

inline std::vector<Var> grad(Var output, std::span<const Var> wrt, bool create_graph = false) {
  if (!output.valid()) throw std::invalid_argument("ad: invalid output");
  return output.tape()->gradient(output, wrt, create_graph);
}

inline std::vector<Var> grad(Var output, std::initializer_list<Var> wrt,
                             bool create_graph = false) {
  return grad(output, std::span<const Var>(wrt.begin(), wrt.size()), create_graph);
}

/// Central-difference gradient estimate, (f(x+h) - f(x-h)) / 2h per
/// coordinate. Test oracle; independent of the tape machinery above.
inline std::vector<double> finite_difference_check(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> point, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be > 0");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + step;
    const double fp = f(x);
    x[i] = xi - step;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

}  // namespace hamildis::ad
