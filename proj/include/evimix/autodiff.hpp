#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "evimix/errors.hpp"
#include "evimix/special.hpp"
#include "evimix/tensor.hpp"

namespace evimix {

/// A named trainable tensor. Frozen parameters enter a tape as constants.
struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients produced by one backward pass: one tensor per registered
/// trainable parameter and per input variable created with Tape::variable.
class GradientMap {
 public:
  /// Gradient for `p`; an all-zero tensor when `p` took no part in the loss.
  Tensor operator[](const Parameter& p) const {
    auto it = params_.find(&p);
    return it == params_.end() ? Tensor::zeros_like(p.value) : it->second;
  }
  const Tensor& wrt(const Var& v) const {
    auto it = variables_.find(v.id());
    if (it == variables_.end()) throw ContractError("wrt: node was not created by Tape::variable");
    return it->second;
  }
  bool contains(const Parameter& p) const { return params_.count(&p) > 0; }
  std::size_t num_parameters() const { return params_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const Parameter*, Tensor> params_;
  std::unordered_map<std::size_t, Tensor> variables_;
};

/// Records primitive applications and replays them in reverse.
///
/// Single-threaded. Values are immutable once recorded; backward() may be
/// called repeatedly and always starts from zeroed gradients.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self, const Tensor& out_grad)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push("constant", std::move(value), false, {}); }

  /// Differentiable input whose gradient is reported by GradientMap::wrt.
  Var variable(Tensor value) {
    Var v = push("variable", std::move(value), true, {});
    variables_.push_back(v.id());
    return v;
  }

  /// Registers `p` (once per tape) and returns its node.
  Var param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    const bool trainable = !p.frozen && !params_constant_;
    Var v = push(trainable ? "param" : "frozen_param", p.value, trainable, {});
    param_nodes_.emplace(&p, v.id());
    if (trainable) registry_.emplace_back(&p, v.id());
    return v;
  }

  /// Treat every parameter registered from now on as frozen, e.g. when only
  /// input gradients are wanted.
  void treat_parameters_as_constants() { params_constant_ = true; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const char* op(std::size_t id) const { return nodes_[id].op; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Records a node. `backward` is only kept when some parent requires grad.
  Var push(const char* op, Tensor value, bool requires_grad, Backward backward) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  /// Adds `g` into the gradient of node `id` (no-op for constant nodes).
  void accumulate(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.values();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void accumulate(std::size_t id, Tensor&& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    auto dst = n.grad.values();
    auto src = g.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  /// Reverse-mode sweep from a scalar `loss`.
  GradientMap backward(const Var& loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
    const std::size_t root = loss.id();
    if (nodes_[root].value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " +
                          to_string(nodes_[root].value.shape()));
    }
    for (std::size_t i = 0; i <= root; ++i) {
      if (!nodes_[i].value.all_finite()) {
        throw NumericError("non-finite value at node " + std::to_string(i) + " (" + nodes_[i].op + ")", i);
      }
    }
    for (auto& n : nodes_) n.grad = Tensor();
    if (nodes_[root].requires_grad) nodes_[root].grad = Tensor(nodes_[root].value.shape(), 1.0);

    for (std::size_t i = root + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      if (!n.grad.all_finite()) {
        throw NumericError("non-finite gradient at node " + std::to_string(i) + " (" + n.op + ")", i);
      }
      n.backward(*this, i, n.grad);
    }

    GradientMap out;
    for (const auto& [p, id] : registry_) {
      const Tensor& g = nodes_[id].grad;
      out.params_[p] = g.empty() ? Tensor::zeros_like(p->value) : g;
    }
    for (std::size_t id : variables_) {
      const Tensor& g = nodes_[id].grad;
      out.variables_[id] = g.empty() ? Tensor::zeros_like(nodes_[id].value) : g;
    }
    return out;
  }

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::size_t> variables_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::vector<std::pair<const Parameter*, std::size_t>> registry_;
  bool params_constant_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
}

/// How the right operand of a binary op is stretched onto the left one.
enum class Broadcast { same, row, col, scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::same;
  if (b.size() == 1) return Broadcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::col;
  throw ContractError(std::string(op) + ": cannot broadcast " + to_string(b.shape()) + " onto " +
                      to_string(a.shape()));
}

inline std::size_t rhs_index(Broadcast k, std::size_t r, std::size_t c, std::size_t cols) {
  switch (k) {
    case Broadcast::same: return r * cols + c;
    case Broadcast::row: return c;
    case Broadcast::col: return r;
    case Broadcast::scalar: return 0;
  }
  return 0;
}

/// Folds a full-size gradient back onto the broadcast operand's shape.
inline Tensor reduce_to(Broadcast k, const Tensor& g, const Tensor& like) {
  if (k == Broadcast::same) return g;
  Tensor out = Tensor::zeros_like(like);
  const std::size_t R = g.rows(), C = g.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[rhs_index(k, r, c, C)] += g[r * C + c];
  return out;
}

/// Elementwise unary op with derivative expressed through input and output.
template <class F, class DF>
Var unary(const char* op, const Var& x, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tape& t = x.tape();
  const std::size_t xid = x.id();
  return t.push(op, std::move(out), t.requires_grad(xid), [xid, df](Tape& tp, std::size_t, const Tensor& g) {
    const Tensor& xv = tp.value(xid);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] * df(xv[i]);
    tp.accumulate(xid, std::move(gx));
  });
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary primitives. The right operand may be same-shape, a 1xC row, an Rx1
// column, or a scalar.

inline Var add(const Var& a, const Var& b) {
  detail::same_tape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto k = detail::broadcast_kind(av, bv, "add");
  Tensor out(av.shape());
  const std::size_t R = av.rows(), C = av.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = av[r * C + c] + bv[detail::rhs_index(k, r, c, C)];
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push("add", std::move(out), t.requires_grad(ai) || t.requires_grad(bi),
                [ai, bi, k](Tape& tp, std::size_t, const Tensor& g) {
                  tp.accumulate(ai, g);
                  if (tp.requires_grad(bi)) tp.accumulate(bi, detail::reduce_to(k, g, tp.value(bi)));
                });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_tape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto k = detail::broadcast_kind(av, bv, "sub");
  Tensor out(av.shape());
  const std::size_t R = av.rows(), C = av.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = av[r * C + c] - bv[detail::rhs_index(k, r, c, C)];
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push("sub", std::move(out), t.requires_grad(ai) || t.requires_grad(bi),
                [ai, bi, k](Tape& tp, std::size_t, const Tensor& g) {
                  tp.accumulate(ai, g);
                  if (tp.requires_grad(bi)) {
                    Tensor gb = detail::reduce_to(k, g, tp.value(bi));
                    for (auto& v : gb.values()) v = -v;
                    tp.accumulate(bi, std::move(gb));
                  }
                });
}

inline Var mul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto k = detail::broadcast_kind(av, bv, "mul");
  Tensor out(av.shape());
  const std::size_t R = av.rows(), C = av.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = av[r * C + c] * bv[detail::rhs_index(k, r, c, C)];
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push("mul", std::move(out), t.requires_grad(ai) || t.requires_grad(bi),
                [ai, bi, k](Tape& tp, std::size_t, const Tensor& g) {
                  const Tensor& av = tp.value(ai);
                  const Tensor& bv = tp.value(bi);
                  const std::size_t R = av.rows(), C = av.cols();
                  if (tp.requires_grad(ai)) {
                    Tensor ga(av.shape());
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t c = 0; c < C; ++c)
                        ga[r * C + c] = g[r * C + c] * bv[detail::rhs_index(k, r, c, C)];
                    tp.accumulate(ai, std::move(ga));
                  }
                  if (tp.requires_grad(bi)) {
                    Tensor full(av.shape());
                    for (std::size_t i = 0; i < av.size(); ++i) full[i] = g[i] * av[i];
                    tp.accumulate(bi, detail::reduce_to(k, full, bv));
                  }
                });
}

inline Var div(const Var& a, const Var& b) {
  detail::same_tape(a, b, "div");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const auto k = detail::broadcast_kind(av, bv, "div");
  Tensor out(av.shape());
  const std::size_t R = av.rows(), C = av.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = av[r * C + c] / bv[detail::rhs_index(k, r, c, C)];
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push("div", std::move(out), t.requires_grad(ai) || t.requires_grad(bi),
                [ai, bi, k](Tape& tp, std::size_t, const Tensor& g) {
                  const Tensor& av = tp.value(ai);
                  const Tensor& bv = tp.value(bi);
                  const std::size_t R = av.rows(), C = av.cols();
                  if (tp.requires_grad(ai)) {
                    Tensor ga(av.shape());
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t c = 0; c < C; ++c)
                        ga[r * C + c] = g[r * C + c] / bv[detail::rhs_index(k, r, c, C)];
                    tp.accumulate(ai, std::move(ga));
                  }
                  if (tp.requires_grad(bi)) {
                    Tensor full(av.shape());
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t c = 0; c < C; ++c) {
                        const double d = bv[detail::rhs_index(k, r, c, C)];
                        full[r * C + c] = -g[r * C + c] * av[r * C + c] / (d * d);
                      }
                    tp.accumulate(bi, detail::reduce_to(k, full, bv));
                  }
                });
}

/// (R x I) * (I x C).
inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t R = av.rows(), I = av.cols(), C = bv.cols();
  if (bv.rows() != I) {
    throw ContractError("matmul: inner dimensions differ, " + to_string(av.shape()) + " x " +
                        to_string(bv.shape()));
  }
  Tensor out = Tensor::matrix(R, C);
  for (std::size_t r = 0; r < R; ++r) {
    double* o = &out[r * C];
    for (std::size_t i = 0; i < I; ++i) {
      const double x = av[r * I + i];
      const double* w = &bv[i * C];
      for (std::size_t c = 0; c < C; ++c) o[c] += x * w[c];
    }
  }
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  return t.push("matmul", std::move(out), t.requires_grad(ai) || t.requires_grad(bi),
                [ai, bi](Tape& tp, std::size_t, const Tensor& g) {
                  const Tensor& av = tp.value(ai);
                  const Tensor& bv = tp.value(bi);
                  const std::size_t R = av.rows(), I = av.cols(), C = bv.cols();
                  if (tp.requires_grad(ai)) {
                    Tensor ga(av.shape());
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t i = 0; i < I; ++i) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < C; ++c) s += g[r * C + c] * bv[i * C + c];
                        ga[r * I + i] = s;
                      }
                    tp.accumulate(ai, std::move(ga));
                  }
                  if (tp.requires_grad(bi)) {
                    Tensor gb(bv.shape());
                    for (std::size_t r = 0; r < R; ++r)
                      for (std::size_t i = 0; i < I; ++i) {
                        const double x = av[r * I + i];
                        for (std::size_t c = 0; c < C; ++c) gb[i * C + c] += x * g[r * C + c];
                      }
                    tp.accumulate(bi, std::move(gb));
                  }
                });
}

// ---------------------------------------------------------------------------
// Elementwise unary primitives.

/// scale * x + shift with constant coefficients.
inline Var affine(const Var& x, double scale, double shift) {
  return detail::unary("affine", x, [=](double v) { return scale * v + shift; },
                       [=](double) { return scale; });
}

inline Var scale(const Var& x, double s) { return affine(x, s, 0.0); }
inline Var shift(const Var& x, double s) { return affine(x, 1.0, s); }
inline Var neg(const Var& x) { return affine(x, -1.0, 0.0); }

/// Subgradient 0 at 0.
inline Var relu(const Var& x) {
  return detail::unary("relu", x, [](double v) { return v > 0 ? v : 0.0; },
                       [](double v) { return v > 0 ? 1.0 : 0.0; });
}

inline Var softplus(const Var& x) {
  return detail::unary("softplus", x, detail::softplus, detail::sigmoid);
}

inline Var sigmoid(const Var& x) {
  return detail::unary("sigmoid", x, detail::sigmoid, [](double v) {
    const double s = detail::sigmoid(v);
    return s * (1.0 - s);
  });
}

inline Var log(const Var& x) {
  return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

inline Var exp(const Var& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

/// Subgradient 0 at 0.
inline Var abs(const Var& x) {
  return detail::unary("abs", x, [](double v) { return std::abs(v); },
                       [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

/// Gradient passes only strictly inside (lo, hi).
inline Var clamp(const Var& x, double lo, double hi) {
  return detail::unary("clamp", x, [=](double v) { return std::clamp(v, lo, hi); },
                       [=](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

inline Var digamma(const Var& x) {
  return detail::unary("digamma", x, [](double v) { return evimix::digamma(v); },
                       [](double v) { return evimix::trigamma(v); });
}

inline Var log_gamma(const Var& x) {
  return detail::unary("log_gamma", x, [](double v) { return evimix::log_gamma(v); },
                       [](double v) { return evimix::digamma(v); });
}

// ---------------------------------------------------------------------------
// Row-wise and reduction primitives.

/// Softmax over the last axis, max-subtracted.
inline Var softmax(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < R; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) m = std::max(m, xv[r * C + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += (out[r * C + c] = std::exp(xv[r * C + c] - m));
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= z;
  }
  Tape& t = x.tape();
  const std::size_t xi = x.id();
  return t.push("softmax", std::move(out), t.requires_grad(xi), [xi](Tape& tp, std::size_t self, const Tensor& g) {
    const Tensor& y = tp.value(self);
    const std::size_t R = y.rows(), C = y.cols();
    Tensor gx(y.shape());
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] = y[r * C + c] * (g[r * C + c] - dot);
    }
    tp.accumulate(xi, std::move(gx));
  });
}

/// Sum of all entries, as a 1x1 tensor.
inline Var sum(const Var& x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.values()) s += v;
  Tape& t = x.tape();
  const std::size_t xi = x.id();
  return t.push("sum", Tensor::scalar(s), t.requires_grad(xi), [xi](Tape& tp, std::size_t, const Tensor& g) {
    tp.accumulate(xi, Tensor(tp.value(xi).shape(), g[0]));
  });
}

/// Mean of all entries, as a 1x1 tensor.
inline Var mean(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.size() == 0) throw ContractError("mean of empty tensor");
  double s = 0.0;
  for (double v : xv.values()) s += v;
  const double n = static_cast<double>(xv.size());
  Tape& t = x.tape();
  const std::size_t xi = x.id();
  return t.push("mean", Tensor::scalar(s / n), t.requires_grad(xi), [xi, n](Tape& tp, std::size_t, const Tensor& g) {
    tp.accumulate(xi, Tensor(tp.value(xi).shape(), g[0] / n));
  });
}

/// Sum over the last axis: R x C -> R x 1.
inline Var row_sum(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor out = Tensor::matrix(R, 1);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r] += xv[r * C + c];
  Tape& t = x.tape();
  const std::size_t xi = x.id();
  return t.push("row_sum", std::move(out), t.requires_grad(xi), [xi](Tape& tp, std::size_t, const Tensor& g) {
    const Tensor& xv = tp.value(xi);
    const std::size_t R = xv.rows(), C = xv.cols();
    Tensor gx(xv.shape());
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] = g[r];
    tp.accumulate(xi, std::move(gx));
  });
}

/// Stacks matrices with equal column counts on top of each other.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t C = parts.front().cols();
  std::size_t R = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p, "concat_rows");
    if (p.cols() != C) throw ContractError("concat_rows: column counts differ");
    R += p.rows();
    rg = rg || t.requires_grad(p.id());
    ids.push_back(p.id());
  }
  Tensor out = Tensor::matrix(R, C);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto v = p.value().values();
    std::copy(v.begin(), v.end(), out.values().begin() + static_cast<std::ptrdiff_t>(off));
    off += v.size();
  }
  return t.push("concat_rows", std::move(out), rg, [ids](Tape& tp, std::size_t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t id : ids) {
      const Tensor& v = tp.value(id);
      if (tp.requires_grad(id)) {
        Tensor gp(v.shape());
        std::copy_n(g.values().begin() + static_cast<std::ptrdiff_t>(off), v.size(), gp.values().begin());
        tp.accumulate(id, std::move(gp));
      }
      off += v.size();
    }
  });
}

/// Places matrices with equal row counts side by side.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& t = parts.front().tape();
  const std::size_t R = parts.front().rows();
  std::size_t C = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p, "concat_cols");
    if (p.rows() != R) throw ContractError("concat_cols: row counts differ");
    C += p.cols();
    rg = rg || t.requires_grad(p.id());
    ids.push_back(p.id());
  }
  Tensor out = Tensor::matrix(R, C);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) out[r * C + c0 + c] = v(r, c);
    c0 += v.cols();
  }
  return t.push("concat_cols", std::move(out), rg, [ids](Tape& tp, std::size_t, const Tensor& g) {
    const std::size_t C = g.cols();
    std::size_t c0 = 0;
    for (std::size_t id : ids) {
      const Tensor& v = tp.value(id);
      if (tp.requires_grad(id)) {
        Tensor gp(v.shape());
        for (std::size_t r = 0; r < v.rows(); ++r)
          for (std::size_t c = 0; c < v.cols(); ++c) gp(r, c) = g[r * C + c0 + c];
        tp.accumulate(id, std::move(gp));
      }
      c0 += v.cols();
    }
  });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }

}  // namespace evimix
