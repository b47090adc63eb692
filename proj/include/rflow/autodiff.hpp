#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rflow/error.hpp"
#include "rflow/rng.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

/// Handle to a node on a Tape. Only meaningful together with the tape that made it.
struct Var {
  std::size_t id = 0;
};

enum class OpKind {
  leaf,
  affine,
  tanh,
  relu,
  concat,
  add,
  sub,
  mul,
  scale,
  scale_rows,
  add_scalar,
  sqrt,
  row_sq_norm,
  sum,
  mean,
  dropout,
};

/// Append-only record of tensor operations. Nodes are stored in creation
/// order, which is a topological order because an op can only consume nodes
/// that already exist.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  /// A differentiable input (parameter). Its gradient is kept after backward().
  Var leaf(Tensor value) { return push(std::move(value), OpKind::leaf, {}, nullptr, true); }

  /// A non-differentiable input. No gradient work is done for it.
  Var constant(Tensor value) { return push(std::move(value), OpKind::leaf, {}, nullptr, false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() target with respect to `v`. Zero-filled
  /// if `v` did not influence the target.
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  OpKind op(Var v) const { return nodes_.at(v.id).op; }
  const std::vector<std::size_t>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Node ids in the order the last backward() visited them.
  const std::vector<std::size_t>& last_backward_order() const noexcept { return visited_; }

  void backward(Var loss) {
    if (loss.id >= nodes_.size()) throw ContractError("backward: unknown node");
    if (nodes_[loss.id].value.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_str(nodes_[loss.id].value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    visited_.clear();
    grad_ref(loss.id)[0] = 1.0;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      visited_.push_back(id);
      if (n.backward) n.backward(*this, id);
    }
  }

  // Op-implementation interface.

  Var push(Tensor value, OpKind op, std::vector<std::size_t> inputs, BackwardFn backward,
           bool requires_grad) {
    for (std::size_t in : inputs) {
      if (in >= nodes_.size()) throw ContractError("tape: input node does not exist");
    }
    nodes_.push_back(Node{std::move(value), Tensor(), op, std::move(inputs), std::move(backward),
                          requires_grad});
    return Var{nodes_.size() - 1};
  }

  Var push_op(Tensor value, OpKind op, std::vector<std::size_t> inputs, BackwardFn backward) {
    bool rg = false;
    for (std::size_t in : inputs) rg = rg || nodes_.at(in).requires_grad;
    return push(std::move(value), op, std::move(inputs), rg ? std::move(backward) : nullptr, rg);
  }

  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_at(std::size_t id) const { return nodes_[id].grad; }
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  Tensor& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    OpKind op;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
  };

  std::vector<Node> nodes_;
  std::vector<std::size_t> visited_;
};

namespace detail {

inline void require_rows(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rows() != b.rows()) {
    throw ShapeError(std::string(what) + ": row count mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class Fwd, class Deriv>
Var unary(Tape& tape, Var a, OpKind op, Fwd fwd, Deriv deriv) {
  Tensor out = tape.value(a);
  for (double& v : out.storage()) v = fwd(v);
  return tape.push_op(std::move(out), op, {a.id}, [deriv](Tape& t, std::size_t self) {
    const std::size_t in = t.inputs(Var{self})[0];
    const Tensor& x = t.value_at(in);
    const Tensor& y = t.value_at(self);
    const Tensor& gy = t.grad_at(self);
    Tensor& gx = t.grad_ref(in);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(x[i], y[i]);
  });
}

}  // namespace detail

/// y = x W^T + b for x [n, in], W [out, in], b [out].
inline Var affine(Tape& tape, Var x, Var w, Var b) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  const Tensor& bv = tape.value(b);
  const std::size_t n = xv.rows(), in = xv.cols();
  if (wv.rank() != 2 || wv.shape()[1] != in) {
    throw ShapeError("affine: input width " + std::to_string(in) + " does not match weight " +
                     shape_str(wv.shape()));
  }
  const std::size_t out = wv.shape()[0];
  if (bv.size() != out) throw ShapeError("affine: bias length does not match weight rows");

  Tensor y({n, out});
  for (std::size_t i = 0; i < n; ++i) {
    const double* xr = xv.data().data() + i * in;
    double* yr = y.data().data() + i * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = wv.data().data() + o * in;
      double acc = bv[o];
      for (std::size_t k = 0; k < in; ++k) acc += xr[k] * wr[k];
      yr[o] = acc;
    }
  }
  return tape.push_op(std::move(y), OpKind::affine, {x.id, w.id, b.id}, [](Tape& t, std::size_t self) {
    const auto& ins = t.inputs(Var{self});
    const std::size_t xi = ins[0], wi = ins[1], bi = ins[2];
    const Tensor& xv = t.value_at(xi);
    const Tensor& wv = t.value_at(wi);
    const Tensor& gy = t.grad_at(self);
    const std::size_t n = xv.rows(), in = xv.cols(), out = wv.shape()[0];
    if (t.wants_grad(xi)) {
      Tensor& gx = t.grad_ref(xi);
      for (std::size_t i = 0; i < n; ++i) {
        double* gxr = gx.data().data() + i * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double g = gy[i * out + o];
          const double* wr = wv.data().data() + o * in;
          for (std::size_t k = 0; k < in; ++k) gxr[k] += g * wr[k];
        }
      }
    }
    if (t.wants_grad(wi)) {
      Tensor& gw = t.grad_ref(wi);
      for (std::size_t i = 0; i < n; ++i) {
        const double* xr = xv.data().data() + i * in;
        for (std::size_t o = 0; o < out; ++o) {
          const double g = gy[i * out + o];
          double* gwr = gw.data().data() + o * in;
          for (std::size_t k = 0; k < in; ++k) gwr[k] += g * xr[k];
        }
      }
    }
    if (t.wants_grad(bi)) {
      Tensor& gb = t.grad_ref(bi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < out; ++o) gb[o] += gy[i * out + o];
    }
  });
}

inline Var tanh(Tape& tape, Var a) {
  return detail::unary(
      tape, a, OpKind::tanh, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Tape& tape, Var a) {
  return detail::unary(
      tape, a, OpKind::relu, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sqrt(Tape& tape, Var a) {
  return detail::unary(
      tape, a, OpKind::sqrt,
      [](double x) {
        if (x < 0.0) throw DomainError("sqrt of a negative value");
        return std::sqrt(x);
      },
      [](double, double y) { return 0.5 / y; });
}

inline Var add_scalar(Tape& tape, Var a, double c) {
  return detail::unary(
      tape, a, OpKind::add_scalar, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var scale(Tape& tape, Var a, double s) {
  return detail::unary(
      tape, a, OpKind::scale, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

/// Column-wise concatenation of two batches with equal row counts.
inline Var concat_cols(Tape& tape, Var a, Var b) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  detail::require_rows(av, bv, "concat_cols");
  const std::size_t n = av.rows(), p = av.cols(), q = bv.cols();
  Tensor out({n, p + q});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(av.row(i).begin(), av.row(i).end(), out.row(i).begin());
    std::copy(bv.row(i).begin(), bv.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(p));
  }
  return tape.push_op(std::move(out), OpKind::concat, {a.id, b.id}, [p, q](Tape& t, std::size_t self) {
    const auto& ins = t.inputs(Var{self});
    const Tensor& g = t.grad_at(self);
    const std::size_t n = g.rows();
    if (t.wants_grad(ins[0])) {
      Tensor& ga = t.grad_ref(ins[0]);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < p; ++k) ga[i * p + k] += g[i * (p + q) + k];
    }
    if (t.wants_grad(ins[1])) {
      Tensor& gb = t.grad_ref(ins[1]);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < q; ++k) gb[i * q + k] += g[i * (p + q) + p + k];
    }
  });
}

namespace detail {

template <class Fwd, class DA, class DB>
Var binary(Tape& tape, Var a, Var b, OpKind op, Fwd fwd, DA da, DB db) {
  const Tensor& av = tape.value(a);
  const Tensor& bv = tape.value(b);
  if (av.size() != bv.size() || av.cols() != bv.cols()) {
    throw ShapeError("elementwise op: shape mismatch " + shape_str(av.shape()) + " vs " +
                     shape_str(bv.shape()));
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  return tape.push_op(std::move(out), op, {a.id, b.id}, [da, db](Tape& t, std::size_t self) {
    const auto& ins = t.inputs(Var{self});
    const Tensor& x = t.value_at(ins[0]);
    const Tensor& y = t.value_at(ins[1]);
    const Tensor& g = t.grad_at(self);
    if (t.wants_grad(ins[0])) {
      Tensor& gx = t.grad_ref(ins[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * da(x[i], y[i]);
    }
    if (t.wants_grad(ins[1])) {
      Tensor& gy = t.grad_ref(ins[1]);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * db(x[i], y[i]);
    }
  });
}

}  // namespace detail

inline Var add(Tape& tape, Var a, Var b) {
  return detail::binary(
      tape, a, b, OpKind::add, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Var sub(Tape& tape, Var a, Var b) {
  return detail::binary(
      tape, a, b, OpKind::sub, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Var mul(Tape& tape, Var a, Var b) {
  return detail::binary(
      tape, a, b, OpKind::mul, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

/// Multiplies row i of a [n, k] batch by the constant factors[i].
inline Var scale_rows(Tape& tape, Var a, std::vector<double> factors) {
  const Tensor& av = tape.value(a);
  if (factors.size() != av.rows()) throw ShapeError("scale_rows: one factor per row required");
  Tensor out = av;
  const std::size_t k = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] *= factors[i];
  return tape.push_op(std::move(out), OpKind::scale_rows, {a.id},
                      [f = std::move(factors), k](Tape& t, std::size_t self) {
                        const std::size_t in = t.inputs(Var{self})[0];
                        const Tensor& g = t.grad_at(self);
                        Tensor& ga = t.grad_ref(in);
                        for (std::size_t i = 0; i < f.size(); ++i)
                          for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += g[i * k + j] * f[i];
                      });
}

/// Per-row squared Euclidean norm: [n, k] -> [n, 1].
inline Var row_sq_norm(Tape& tape, Var a) {
  const Tensor& av = tape.value(a);
  const std::size_t n = av.rows();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i) out[i] = squared_norm(av.row(i));
  return tape.push_op(std::move(out), OpKind::row_sq_norm, {a.id}, [](Tape& t, std::size_t self) {
    const std::size_t in = t.inputs(Var{self})[0];
    const Tensor& x = t.value_at(in);
    const Tensor& g = t.grad_at(self);
    Tensor& gx = t.grad_ref(in);
    const std::size_t k = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < k; ++j) gx[i * k + j] += 2.0 * x[i * k + j] * g[i];
  });
}

inline Var sum(Tape& tape, Var a) {
  double s = 0.0;
  for (double v : tape.value(a).data()) s += v;
  return tape.push_op(Tensor::scalar(s), OpKind::sum, {a.id}, [](Tape& t, std::size_t self) {
    const std::size_t in = t.inputs(Var{self})[0];
    const double g = t.grad_at(self)[0];
    for (double& v : t.grad_ref(in).storage()) v += g;
  });
}

inline Var mean(Tape& tape, Var a) {
  const Tensor& av = tape.value(a);
  double s = 0.0;
  for (double v : av.data()) s += v;
  const double inv_n = 1.0 / static_cast<double>(av.size());
  return tape.push_op(Tensor::scalar(s * inv_n), OpKind::mean, {a.id},
                      [inv_n](Tape& t, std::size_t self) {
                        const std::size_t in = t.inputs(Var{self})[0];
                        const double g = t.grad_at(self)[0] * inv_n;
                        for (double& v : t.grad_ref(in).storage()) v += g;
                      });
}

/// Inverted dropout: zeroes each element with probability p and rescales the
/// survivors by 1/(1-p). p = 0 is the identity.
inline Var dropout(Tape& tape, Var a, double p, CounterRng& rng) {
  if (p < 0.0 || p >= 1.0) throw ShapeError("dropout: probability must be in [0, 1)");
  if (p == 0.0) return a;
  const Tensor& av = tape.value(a);
  std::vector<double> mask(av.size());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : 1.0 / (1.0 - p);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return tape.push_op(std::move(out), OpKind::dropout, {a.id},
                      [m = std::move(mask)](Tape& t, std::size_t self) {
                        const std::size_t in = t.inputs(Var{self})[0];
                        const Tensor& g = t.grad_at(self);
                        Tensor& ga = t.grad_ref(in);
                        for (std::size_t i = 0; i < m.size(); ++i) ga[i] += g[i] * m[i];
                      });
}

}  // namespace rflow
