// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense matrices.
//
// A Tape records every primitive application of one forward pass in creation
// order, which is a valid topological order, so backward() is a single reverse
// sweep.  Parameters live outside the tape; leaf(p) links a node to its Param and
// backward() adds the leaf gradient into Param::grad when the parameter is
// trainable.  Frozen parameters become constants and are never differentiated.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gara/errors.hpp"
#include "gara/linalg.hpp"

namespace gara::ad {

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Matrix v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  void zero_grad() { grad = Matrix(value.rows(), value.cols()); }
};

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const {
    if (!tape_) throw UsageError("Var: not attached to a tape");
    return *tape_;
  }
  std::size_t id() const noexcept { return id_; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Per-tape gradients of the trainable parameters reached by backward().
using GradientMap = std::unordered_map<const Param*, Matrix>;

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  // A tape with gradients disabled treats every parameter as a constant.
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var leaf(Param& p) {
    Node n;
    n.value = p.value;
    n.needs_grad = grad_enabled_ && p.trainable;
    n.param = n.needs_grad ? &p : nullptr;
    n.op = "leaf";
    return push(std::move(n));
  }

  Var constant(Matrix m) {
    Node n;
    n.value = std::move(m);
    n.op = "const";
    return push(std::move(n));
  }

  // Adds a node whose parents are `parents`; `fn` receives the node's output
  // gradient and must accumulate into the parents.  `fn` is dropped when no
  // parent needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn, const char* op) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    for (const Var& p : parents) {
      check_owner(p, op);
      n.needs_grad = n.needs_grad || nodes_[p.id_].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Matrix& value(const Var& v) const { return nodes_.at(v.id_).value; }
  bool needs_grad(const Var& v) const { return nodes_.at(v.id_).needs_grad; }
  const char* op(const Var& v) const { return nodes_.at(v.id_).op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of `v` after backward(); nullptr when nothing reached it.
  const Matrix* grad(const Var& v) const {
    const Node& n = nodes_.at(v.id_);
    return n.grad.empty() && !n.value.empty() ? nullptr : &n.grad;
  }

  // Runs `f(buffer)` on the zero-initialised gradient buffer of `v` if `v` needs one.
  template <class F>
  void accumulate_with(const Var& v, F&& f) {
    Node& n = nodes_[v.id_];
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    f(n.grad);
  }

  void accumulate(const Var& v, const Matrix& g) {
    accumulate_with(v, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    });
  }

  GradientMap backward(const Var& loss) {
    if (!loss.valid()) throw UsageError("backward: loss was never produced by a forward pass");
    check_owner(loss, "backward");
    if (backward_done_) throw UsageError("backward: tape was already differentiated");
    const Matrix& lv = nodes_[loss.id_].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw UsageError("backward: loss must be scalar, got " + lv.shape_str());
    }
    backward_done_ = true;
    GradientMap grads;
    if (!nodes_[loss.id_].needs_grad) return grads;
    nodes_[loss.id_].grad = Matrix(1, 1, 1.0);
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        Param& p = *n.param;
        if (p.grad.empty()) p.zero_grad();
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[i];
        auto [it, inserted] = grads.try_emplace(&p, n.grad);
        if (!inserted) {
          for (std::size_t i = 0; i < it->second.size(); ++i) it->second[i] += n.grad[i];
        }
      }
    }
    return grads;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Param* param = nullptr;
    BackwardFn backward;
    const char* op = "";
  };

  Var push(Node n) {
    if (backward_done_) throw UsageError("tape: cannot record after backward()");
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(const Var& v, const char* op) const {
    if (v.tape_ != this || v.id_ >= nodes_.size()) {
      throw UsageError(std::string(op) + ": operand belongs to a different tape");
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  bool grad_enabled_ = true;
};

inline const Matrix& Var::value() const { return tape().value(*this); }

inline double Var::scalar() const {
  const Matrix& m = value();
  if (m.size() != 1) throw ShapeError("Var::scalar: value is " + m.shape_str());
  return m[0];
}

namespace detail {

inline void require_same(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + a.value().shape_str() + ") vs (" +
                     b.value().shape_str() + ")");
  }
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---- elementwise arithmetic ----

inline Var add(const Var& a, const Var& b) {
  detail::require_same(a, b, "add");
  Matrix out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  }, "add");
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same(a, b, "sub");
  Matrix out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate_with(b, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] -= g[i];
    });
  }, "sub");
}

// Elementwise (Hadamard) product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same(a, b, "mul");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * bv[i];
    });
    t.accumulate_with(b, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i] * av[i];
    });
  }, "mul");
}

inline Var scalar_mul(const Var& a, double s) {
  Matrix out = s * a.value();
  return a.tape().record(std::move(out), {a}, [a, s](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += s * g[i];
    });
  }, "scalar_mul");
}

inline Var add_scalar(const Var& a, double s) {
  Matrix out = a.value();
  for (auto& v : out.data()) v += s;
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); },
                         "add_scalar");
}

// 1 - a.
inline Var one_minus(const Var& a) {
  Matrix out = a.value();
  for (auto& v : out.data()) v = 1.0 - v;
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] -= g[i];
    });
  }, "one_minus");
}

// a * s where s is a 1x1 node.
inline Var scale_by(const Var& a, const Var& s) {
  if (s.value().size() != 1) throw ShapeError("scale_by: scale must be 1x1, got " + s.value().shape_str());
  Matrix out = s.scalar() * a.value();
  return a.tape().record(std::move(out), {a, s}, [a, s](Tape& t, const Matrix& g) {
    const double sv = s.scalar();
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += sv * g[i];
    });
    t.accumulate_with(s, [&](Matrix& buf) {
      const Matrix& av = a.value();
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      buf[0] += acc;
    });
  }, "scale_by");
}

// a (n x m) + row (1 x m) broadcast over rows.
inline Var add_row(const Var& a, const Var& row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("add_row: (" + av.shape_str() + ") + row (" + rv.shape_str() + ")");
  }
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate_with(row, [&](Matrix& buf) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) buf[j] += g(i, j);
    });
  }, "add_row");
}

// a (n x m) scaled column-wise by row (1 x m).
inline Var mul_row(const Var& a, const Var& row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw ShapeError("mul_row: (" + av.shape_str() + ") * row (" + rv.shape_str() + ")");
  }
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= rv[j];
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    const Matrix& av = a.value();
    const Matrix& rv = row.value();
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) buf(i, j) += g(i, j) * rv[j];
    });
    t.accumulate_with(row, [&](Matrix& buf) {
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) buf[j] += g(i, j) * av(i, j);
    });
  }, "mul_row");
}

// ---- products ----

inline Var matmul(const Var& a, const Var& b) {
  Matrix out = gara::matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) { gara::detail::gemm_nt_acc(buf, g, b.value()); });
    t.accumulate_with(b, [&](Matrix& buf) { gara::detail::gemm_tn_acc(buf, a.value(), g); });
  }, "matmul");
}

// a * b^T; the natural form for token rows times a (out x in) weight.
inline Var matmul_nt(const Var& a, const Var& b) {
  Matrix out = gara::matmul_nt(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) { gara::detail::gemm_nn_acc(buf, g, b.value()); });
    t.accumulate_with(b, [&](Matrix& buf) { gara::detail::gemm_tn_acc(buf, g, a.value()); });
  }, "matmul_nt");
}

// m (n x k) times column vector v (k x 1).
inline Var matvec(const Var& m, const Var& v) {
  if (v.value().cols() != 1) throw ShapeError("matvec: vector must be a column, got " + v.value().shape_str());
  Matrix out = gara::matmul(m.value(), v.value());
  return m.tape().record(std::move(out), {m, v}, [m, v](Tape& t, const Matrix& g) {
    t.accumulate_with(m, [&](Matrix& buf) { gara::detail::gemm_nt_acc(buf, g, v.value()); });
    t.accumulate_with(v, [&](Matrix& buf) { gara::detail::gemm_tn_acc(buf, m.value(), g); });
  }, "matvec");
}

// u v^T for column vectors u (n x 1), v (m x 1).
inline Var outer(const Var& u, const Var& v) {
  if (u.value().cols() != 1 || v.value().cols() != 1 || u.value().empty() || v.value().empty()) {
    throw ShapeError("outer: expects non-empty column vectors, got (" + u.value().shape_str() +
                     ") and (" + v.value().shape_str() + ")");
  }
  Matrix out = gara::matmul_nt(u.value(), v.value());
  return u.tape().record(std::move(out), {u, v}, [u, v](Tape& t, const Matrix& g) {
    t.accumulate_with(u, [&](Matrix& buf) { gara::detail::gemm_nn_acc(buf, g, v.value()); });
    t.accumulate_with(v, [&](Matrix& buf) { gara::detail::gemm_tn_acc(buf, g, u.value()); });
  }, "outer");
}

// ---- activations ----

inline Var relu(const Var& a) {
  Matrix out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& av = a.value();
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i)
        if (av[i] > 0.0) buf[i] += g[i];
    });
  }, "relu");
}

inline Var sigmoid(const Var& a) {
  Matrix out = a.value();
  for (auto& v : out.data()) v = detail::sigmoid(v);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    const Matrix& av = a.value();
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i) {
        const double s = detail::sigmoid(av[i]);
        buf[i] += g[i] * s * (1.0 - s);
      }
    });
  }, "sigmoid");
}

// Row-wise softmax.
inline Var softmax_rows(const Var& a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const auto r = av.row(i);
    double mx = r[0];
    for (double v : r) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) z += (out(i, j) = std::exp(r[j] - mx));
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) /= z;
  }
  Matrix soft = out;
  return a.tape().record(std::move(out), {a}, [a, soft = std::move(soft)](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) gs += g(i, j) * soft(i, j);
        for (std::size_t j = 0; j < g.cols(); ++j) buf(i, j) += soft(i, j) * (g(i, j) - gs);
      }
    });
  }, "softmax_rows");
}

// ---- reductions ----

// Mean over rows: (n x m) -> (1 x m).
inline Var mean_pool(const Var& a) {
  const Matrix& av = a.value();
  if (av.rows() == 0) throw ShapeError("mean_pool: no rows to pool");
  Matrix out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out[j] += av(i, j);
  const double inv = 1.0 / static_cast<double>(av.rows());
  for (auto& v : out.data()) v *= inv;
  return a.tape().record(std::move(out), {a}, [a, inv](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.rows(); ++i)
        for (std::size_t j = 0; j < buf.cols(); ++j) buf(i, j) += g[j] * inv;
    });
  }, "mean_pool");
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record(Matrix(1, 1, s), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) {
      for (auto& v : buf.data()) v += g[0];
    });
  }, "sum");
}

inline Var mean(const Var& a) { return scalar_mul(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Single element as a 1x1 node.
inline Var element(const Var& a, std::size_t r, std::size_t c) {
  const Matrix& av = a.value();
  if (r >= av.rows() || c >= av.cols()) throw ShapeError("element: index out of range for " + av.shape_str());
  return a.tape().record(Matrix(1, 1, av(r, c)), {a}, [a, r, c](Tape& t, const Matrix& g) {
    t.accumulate_with(a, [&](Matrix& buf) { buf(r, c) += g[0]; });
  }, "element");
}

// ---- losses ----

// Mean binary cross-entropy on logits against a {0,1} target, computed stably.
inline Var bce_loss(const Var& logits, const Matrix& target) {
  const Matrix& x = logits.value();
  if (!x.same_shape(target)) {
    throw ShapeError("bce_loss: logits (" + x.shape_str() + ") vs target (" + target.shape_str() + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += std::max(x[i], 0.0) - x[i] * target[i] + std::log1p(std::exp(-std::abs(x[i])));
  }
  const double inv = 1.0 / static_cast<double>(x.size());
  return logits.tape().record(Matrix(1, 1, s * inv), {logits},
                              [logits, target, inv](Tape& t, const Matrix& g) {
    const Matrix& x = logits.value();
    t.accumulate_with(logits, [&](Matrix& buf) {
      for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] += g[0] * inv * (detail::sigmoid(x[i]) - target[i]);
    });
  }, "bce_loss");
}

inline constexpr double kDiceSmooth = 1.0;

// Soft Dice loss on probabilities: 1 - (2 sum(p t) + s) / (sum p + sum t + s).
inline Var dice_loss(const Var& probs, const Matrix& target) {
  const Matrix& p = probs.value();
  if (!p.same_shape(target)) {
    throw ShapeError("dice_loss: probs (" + p.shape_str() + ") vs target (" + target.shape_str() + ")");
  }
  double inter = 0.0, denom = kDiceSmooth;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * target[i];
    denom += p[i] + target[i];
  }
  const double numer = 2.0 * inter + kDiceSmooth;
  return probs.tape().record(Matrix(1, 1, 1.0 - numer / denom), {probs},
                             [probs, target, numer, denom](Tape& t, const Matrix& g) {
    t.accumulate_with(probs, [&](Matrix& buf) {
      const double d2 = denom * denom;
      for (std::size_t i = 0; i < buf.size(); ++i)
        buf[i] -= g[0] * (2.0 * target[i] * denom - numer) / d2;
    });
  }, "dice_loss");
}

// ---- straight-through estimators ----

/// Forward: indicator soft > threshold (strict).  Backward: identity onto `soft`.
inline Var hard_threshold_st(const Var& soft, double threshold = 0.5) {
  Matrix out = soft.value();
  for (auto& v : out.data()) v = v > threshold ? 1.0 : 0.0;
  return soft.tape().record(std::move(out), {soft}, [soft](Tape& t, const Matrix& g) {
    t.accumulate(soft, g);
  }, "hard_threshold_st");
}

/// Forward: one-hot of the row-wise argmax (first index on ties).  Backward: identity.
inline Var onehot_st(const Var& soft) {
  const Matrix& sv = soft.value();
  Matrix out(sv.rows(), sv.cols());
  for (std::size_t i = 0; i < sv.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < sv.cols(); ++j)
      if (sv(i, j) > sv(i, best)) best = j;
    out(i, best) = 1.0;
  }
  return soft.tape().record(std::move(out), {soft}, [soft](Tape& t, const Matrix& g) {
    t.accumulate(soft, g);
  }, "onehot_st");
}

}  // namespace gara::ad
