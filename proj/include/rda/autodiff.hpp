#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records matrix-valued nodes. Nodes built only from constants do not
// record a backward function, so evaluation without gradients costs one
// matrix op per node. Spatial derivatives of the networks are built as
// explicit forward-mode tangent nodes on the same tape, which is what makes
// parameter gradients of losses on gradients/Jacobians (second-order mixed
// terms) come out of an ordinary reverse sweep.

#include "rda/common.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

namespace rda::ad {

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr); }

  /// Record a node. The backward function is kept only when some parent
  /// requires a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || requires_grad(p);
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  Var record(Matrix value, const std::vector<Var>& parents, Backward backward) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || requires_grad(p);
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Matrix& value(const Var& v) const { return nodes_[check(v)].value; }
  bool requires_grad(const Var& v) const { return nodes_[check(v)].requires_grad; }

  /// Add `g` to the gradient of `v` (no-op for constants).
  template <class Derived>
  void accumulate(const Var& v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[check(v)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Add `g` into one column of the gradient of `v`.
  template <class Derived>
  void accumulate_col(const Var& v, Eigen::Index col, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[check(v)];
    if (!n.requires_grad) return;
    ensure_grad(n);
    n.grad.col(col) += g;
  }

  /// Add `g` into a block of the gradient of `v`.
  template <class Derived>
  void accumulate_block(const Var& v, Eigen::Index row, Eigen::Index col, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[check(v)];
    if (!n.requires_grad) return;
    ensure_grad(n);
    n.grad.block(row, col, g.rows(), g.cols()) += g;
  }

  /// Reverse sweep from `out`, seeded with `seed` (same shape as out).
  void backward(const Var& out, const Matrix& seed) {
    const int top = check(out);
    if (seed.rows() != nodes_[top].value.rows() || seed.cols() != nodes_[top].value.cols())
      throw InvalidArgument("backward seed shape does not match output");
    accumulate(out, seed);
    for (int i = top; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  /// Reverse sweep from a 1x1 output.
  void backward(const Var& out) { backward(out, Matrix::Ones(1, 1)); }

  /// Gradient accumulated into `v`; zeros if nothing reached it.
  Matrix grad(const Var& v) const {
    const Node& n = nodes_[check(v)];
    if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };

  static void ensure_grad(Node& n) {
    if (!n.has_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
  }

  int check(const Var& v) const {
    if (v.tape() != this || v.id() < 0 || v.id() >= static_cast<int>(nodes_.size()))
      throw InvalidArgument("variable does not belong to this tape");
    return v.id();
  }

  Var push(Matrix value, bool requires_grad, Backward backward) {
    // std::deque keeps references to existing values valid across growth.
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, false, std::move(backward)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

namespace detail {
inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidArgument(std::string("shape mismatch in ") + op);
}
inline Tape& tape_of(const Var& a) { return *a.tape(); }
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementary ops.

/// a * w^T for a (n x k) and w (m x k).
inline Var matmul_nt(const Var& a, const Var& w) {
  if (a.cols() != w.cols()) throw InvalidArgument("shape mismatch in matmul_nt");
  Tape& t = detail::tape_of(a);
  return t.record(a.value() * w.value().transpose(), {a, w}, [a, w](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g * w.value());
    if (tp.requires_grad(w)) tp.accumulate(w, g.transpose() * a.value());
  });
}

/// Adds the 1 x m row `r` to every row of `a`.
inline Var add_row(const Var& a, const Var& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw InvalidArgument("shape mismatch in add_row");
  Tape& t = detail::tape_of(a);
  Matrix out = a.value();
  out.rowwise() += r.value().row(0);
  return t.record(std::move(out), {a, r}, [a, r](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(r)) tp.accumulate(r, g.colwise().sum());
  });
}

/// Repeats the 1 x m row `r` n times.
inline Var broadcast_rows(const Var& r, Eigen::Index n) {
  if (r.rows() != 1) throw InvalidArgument("broadcast_rows expects a row");
  Tape& t = detail::tape_of(r);
  return t.record(r.value().replicate(n, 1), {r},
                  [r](Tape& tp, const Matrix& g) { tp.accumulate(r, g.colwise().sum()); });
}

inline Var add(const Var& a, const Var& b) {
  detail::same_shape(a, b, "add");
  Tape& t = detail::tape_of(a);
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::same_shape(a, b, "sub");
  Tape& t = detail::tape_of(a);
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, -g);
  });
}

inline Var scale(const Var& a, double c) {
  Tape& t = detail::tape_of(a);
  return t.record(a.value() * c, {a}, [a, c](Tape& tp, const Matrix& g) { tp.accumulate(a, g * c); });
}

inline Var add_const(const Var& a, double c) {
  Tape& t = detail::tape_of(a);
  return t.record((a.value().array() + c).matrix(), {a}, [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g); });
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  detail::same_shape(a, b, "mul");
  Tape& t = detail::tape_of(a);
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(b.value()));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(a.value()));
  });
}

/// Elementwise quotient.
inline Var div(const Var& a, const Var& b) {
  detail::same_shape(a, b, "div");
  Tape& t = detail::tape_of(a);
  return t.record(a.value().cwiseQuotient(b.value()), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseQuotient(b.value()));
    if (tp.requires_grad(b))
      tp.accumulate(b, (-g.array() * a.value().array() / b.value().array().square()).matrix());
  });
}

/// Scales row i of `a` (n x m) by s(i) for s (n x 1).
inline Var mul_col(const Var& a, const Var& s) {
  if (s.cols() != 1 || s.rows() != a.rows()) throw InvalidArgument("shape mismatch in mul_col");
  Tape& t = detail::tape_of(a);
  Matrix out = a.value().array().colwise() * s.value().col(0).array();
  return t.record(std::move(out), {a, s}, [a, s](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, (g.array().colwise() * s.value().col(0).array()).matrix());
    if (tp.requires_grad(s)) tp.accumulate(s, g.cwiseProduct(a.value()).rowwise().sum());
  });
}

/// Elementwise product with a constant mask.
inline Var mask(const Var& a, const Matrix& m) {
  Tape& t = detail::tape_of(a);
  return t.record(a.value().cwiseProduct(m), {a}, [a, m](Tape& tp, const Matrix& g) { tp.accumulate(a, g.cwiseProduct(m)); });
}

/// 1 where a > 0, else 0 (derivative of max(0, .) with value 0 at the kink).
inline Matrix relu_mask(const Var& a) { return (a.value().array() > 0.0).cast<double>().matrix(); }

inline Var relu(const Var& a) { return mask(a, relu_mask(a)); }

/// Clamp to [lo, hi]. The derivative is 1 strictly inside the interval and 0
/// on or beyond either bound.
inline Matrix clamp_mask(const Var& a, double lo, double hi) {
  return ((a.value().array() > lo) && (a.value().array() < hi)).cast<double>().matrix();
}

inline Var clamp(const Var& a, double lo, double hi) {
  Tape& t = detail::tape_of(a);
  Matrix m = clamp_mask(a, lo, hi);
  return t.record(a.value().cwiseMax(lo).cwiseMin(hi), {a},
                  [a, m = std::move(m)](Tape& tp, const Matrix& g) { tp.accumulate(a, g.cwiseProduct(m)); });
}

inline Var abs(const Var& a) {
  Tape& t = detail::tape_of(a);
  return t.record(a.value().cwiseAbs(), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double x) { return double((x > 0) - (x < 0)); })));
  });
}

inline Var exp(const Var& a) {
  Tape& t = detail::tape_of(a);
  Matrix e = a.value().array().exp().matrix();
  return t.record(e, {a}, [a, e](Tape& tp, const Matrix& g) { tp.accumulate(a, g.cwiseProduct(e)); });
}

inline Var log(const Var& a) {
  Tape& t = detail::tape_of(a);
  return t.record(a.value().array().log().matrix(), {a},
                  [a](Tape& tp, const Matrix& g) { tp.accumulate(a, g.cwiseQuotient(a.value())); });
}

inline Var square(const Var& a) { return mul(a, a); }

/// Elementwise max(a, c) with a constant; the gradient goes to `a` where a > c.
inline Var maximum(const Var& a, const Matrix& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw InvalidArgument("shape mismatch in maximum");
  Tape& t = detail::tape_of(a);
  Matrix m = (a.value().array() > c.array()).cast<double>().matrix();
  return t.record(a.value().cwiseMax(c), {a},
                  [a, m = std::move(m)](Tape& tp, const Matrix& g) { tp.accumulate(a, g.cwiseProduct(m)); });
}

/// Euclidean norm of every row, n x 1. Zero rows get a zero gradient.
inline Var row_norm(const Var& a) {
  Tape& t = detail::tape_of(a);
  Matrix n = a.value().rowwise().norm();
  return t.record(n, {a}, [a, n](Tape& tp, const Matrix& g) {
    Matrix out = a.value();
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) *= n(i, 0) > 0.0 ? g(i, 0) / n(i, 0) : 0.0;
    tp.accumulate(a, out);
  });
}

/// Row-wise inner products, n x 1.
inline Var row_dot(const Var& a, const Var& b) {
  detail::same_shape(a, b, "row_dot");
  Tape& t = detail::tape_of(a);
  return t.record(a.value().cwiseProduct(b.value()).rowwise().sum(), {a, b}, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, (b.value().array().colwise() * g.col(0).array()).matrix());
    if (tp.requires_grad(b)) tp.accumulate(b, (a.value().array().colwise() * g.col(0).array()).matrix());
  });
}

/// Sum of squares of every row, n x 1.
inline Var row_sumsq(const Var& a) { return row_dot(a, a); }

inline Var sum(const Var& a) {
  Tape& t = detail::tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a](Tape& tp, const Matrix& g) {
    tp.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.rows() * a.cols());
  return scale(sum(a), 1.0 / n);
}

/// Column j as an n x 1 node.
inline Var col(const Var& a, Eigen::Index j) {
  Tape& t = detail::tape_of(a);
  return t.record(a.value().col(j), {a}, [a, j](Tape& tp, const Matrix& g) { tp.accumulate_col(a, j, g.col(0)); });
}

/// Rows [begin, begin + count).
inline Var rows(const Var& a, Eigen::Index begin, Eigen::Index count) {
  Tape& t = detail::tape_of(a);
  return t.record(a.value().middleRows(begin, count), {a},
                  [a, begin](Tape& tp, const Matrix& g) { tp.accumulate_block(a, begin, 0, g); });
}

/// Concatenate columns.
inline Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("hcat of nothing");
  Tape& t = detail::tape_of(parts[0]);
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != parts[0].rows()) throw InvalidArgument("shape mismatch in hcat");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.record(std::move(out), parts, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index c0 = 0;
    for (const Var& p : parts) {
      tp.accumulate(p, g.middleCols(c0, p.cols()));
      c0 += p.cols();
    }
  });
}

/// Concatenate rows.
inline Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw InvalidArgument("vcat of nothing");
  Tape& t = detail::tape_of(parts[0]);
  Eigen::Index rows_total = 0;
  for (const Var& p : parts) {
    if (p.cols() != parts[0].cols()) throw InvalidArgument("shape mismatch in vcat");
    rows_total += p.rows();
  }
  Matrix out(rows_total, parts[0].cols());
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.record(std::move(out), parts, [parts](Tape& tp, const Matrix& g) {
    Eigen::Index r0 = 0;
    for (const Var& p : parts) {
      tp.accumulate(p, g.middleRows(r0, p.rows()));
      r0 += p.rows();
    }
  });
}

/// Same value, no gradient flow.
inline Var detach(const Var& a) { return detail::tape_of(a).constant(a.value()); }

/// Huber loss with threshold `delta` applied elementwise to non-negative
/// residuals: r^2/2 below delta, delta (r - delta/2) above.
inline Var huber(const Var& a, double delta) {
  Tape& t = detail::tape_of(a);
  Matrix out = a.value().unaryExpr([delta](double r) {
    const double m = std::abs(r);
    return m <= delta ? 0.5 * m * m : delta * (m - 0.5 * delta);
  });
  return t.record(std::move(out), {a}, [a, delta](Tape& tp, const Matrix& g) {
    Matrix d = a.value().unaryExpr([delta](double r) {
      return std::abs(r) <= delta ? r : delta * double((r > 0) - (r < 0));
    });
    tp.accumulate(a, g.cwiseProduct(d));
  });
}

/// Elementwise binary cross entropy between constant labels y and
/// sigmoid(logits), computed stably.
inline Var bce_with_logits(const Var& logits, const Matrix& labels) {
  if (labels.rows() != logits.rows() || labels.cols() != logits.cols())
    throw InvalidArgument("shape mismatch in bce_with_logits");
  Tape& t = detail::tape_of(logits);
  const Matrix& x = logits.value();
  Matrix out = (x.array().max(0.0) - x.array() * labels.array() + (1.0 + (-x.array().abs()).exp()).log()).matrix();
  return t.record(std::move(out), {logits}, [logits, labels](Tape& tp, const Matrix& g) {
    const Matrix sig = (1.0 / (1.0 + (-logits.value().array()).exp())).matrix();
    tp.accumulate(logits, g.cwiseProduct(sig - labels));
  });
}

}  // namespace rda::ad
