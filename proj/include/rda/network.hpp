#pragma once

#include "rda/autodiff.hpp"
#include "rda/common.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace rda::network {

using ad::Tape;
using ad::Var;

/// A flat list of weight/bias tensors. Gradients use the same type, so a
/// ParamGradient is always shape-congruent with its source.
struct Parameters {
  std::vector<Matrix> tensors;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
    return n;
  }

  Parameters zeros_like() const {
    Parameters out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(Matrix::Zero(t.rows(), t.cols()));
    return out;
  }

  bool congruent(const Parameters& other) const {
    if (tensors.size() != other.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].rows() != other.tensors[i].rows() || tensors[i].cols() != other.tensors[i].cols()) return false;
    return true;
  }

  /// Element by flat index (tensor order, then column-major within a tensor).
  double& at(std::size_t flat) {
    for (auto& t : tensors) {
      if (flat < static_cast<std::size_t>(t.size())) return t.data()[flat];
      flat -= static_cast<std::size_t>(t.size());
    }
    throw InvalidArgument("parameter index out of range");
  }
  double at(std::size_t flat) const { return const_cast<Parameters*>(this)->at(flat); }

  Parameters& operator+=(const Parameters& other) {
    if (!congruent(other)) throw InvalidArgument("parameter shapes differ");
    for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += other.tensors[i];
    return *this;
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& t : tensors) s += t.squaredNorm();
    return s;
  }

  bool all_finite() const {
    for (const auto& t : tensors)
      if (!t.allFinite()) return false;
    return true;
  }

  bool operator==(const Parameters& other) const {
    if (!congruent(other)) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i] != other.tensors[i]) return false;
    return true;
  }
};

using ParamGradient = Parameters;

/// Parameters placed on a tape, either as variables or as constants.
struct BoundParams {
  std::vector<Var> vars;
  const Var& operator[](std::size_t i) const { return vars[i]; }
};

inline BoundParams bind(Tape& tape, const Parameters& p, bool trainable) {
  BoundParams b;
  b.vars.reserve(p.tensors.size());
  for (const auto& t : p.tensors) b.vars.push_back(trainable ? tape.variable(t) : tape.constant(t));
  return b;
}

/// Gradients accumulated on the tape for bound parameters.
inline ParamGradient collect(const Tape& tape, const BoundParams& bound) {
  ParamGradient g;
  g.tensors.reserve(bound.vars.size());
  for (const Var& v : bound.vars) g.tensors.push_back(tape.grad(v));
  return g;
}

/// A value with its directional derivatives along a fixed set of spatial
/// directions (one tangent per input coordinate).
struct Jet {
  Var value;
  std::vector<Var> tangents;
};

/// Points with identity tangents: tangent j is the constant e_j on every row.
inline Jet seed_jet(Tape& tape, const Var& points, bool with_tangents) {
  Jet j{points, {}};
  if (!with_tangents) return j;
  const Eigen::Index n = points.rows(), d = points.cols();
  for (Eigen::Index a = 0; a < d; ++a) {
    Matrix e = Matrix::Zero(n, d);
    e.col(a).setOnes();
    j.tangents.push_back(tape.constant(std::move(e)));
  }
  return j;
}

inline Jet linear(const Jet& in, const Var& w, const Var& b) {
  Jet out;
  out.value = ad::add_row(ad::matmul_nt(in.value, w), b);
  for (const Var& t : in.tangents) out.tangents.push_back(ad::matmul_nt(t, w));
  return out;
}

inline Jet relu(const Jet& in) {
  const Matrix m = ad::relu_mask(in.value);
  Jet out;
  out.value = ad::mask(in.value, m);
  for (const Var& t : in.tangents) out.tangents.push_back(ad::mask(t, m));
  return out;
}

inline Jet hcat(const Jet& a, const Jet& b) {
  Jet out;
  out.value = ad::hcat({a.value, b.value});
  for (std::size_t i = 0; i < a.tangents.size(); ++i) out.tangents.push_back(ad::hcat({a.tangents[i], b.tangents[i]}));
  return out;
}

/// Spatial gradient (n x d) from the tangents of a scalar-valued jet.
inline Var gradient(const Jet& j) { return ad::hcat(j.tangents); }

// ---------------------------------------------------------------------------
// Boundary damping.

namespace detail {

struct Smoothstep {
  double s, ds, dds;  // value and first two derivatives in t
};

inline Smoothstep smoothstep(double t) {
  if (t <= 0.0) return {0.0, 0.0, 0.0};
  if (t >= 1.0) return {1.0, 0.0, 0.0};
  return {t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t), 6.0 - 12.0 * t};
}

/// Distance to the boundary of [-1,1]^d along the closest axis, and the index
/// and sign of that axis (first index wins ties).
inline double boundary_distance(const Eigen::Ref<const RowVector>& x, int& axis, double& sign) {
  axis = 0;
  for (int a = 1; a < x.size(); ++a)
    if (std::abs(x[a]) > std::abs(x[axis])) axis = a;
  sign = x[axis] >= 0.0 ? 1.0 : -1.0;
  return 1.0 - std::abs(x[axis]);
}

}  // namespace detail

/// Damping factor: smoothstep of (distance to the domain boundary) / eps.
/// 1 in the interior, 0 on and outside the boundary, C^1 in between.
inline double h_eps(const Eigen::Ref<const RowVector>& x, double eps) {
  if (!(eps > 0.0)) throw InvalidArgument("eps must be positive");
  int axis;
  double sign;
  return detail::smoothstep(detail::boundary_distance(x, axis, sign) / eps).s;
}

/// Gradient of h_eps with respect to x.
inline RowVector h_eps_gradient(const Eigen::Ref<const RowVector>& x, double eps) {
  int axis;
  double sign;
  const auto s = detail::smoothstep(detail::boundary_distance(x, axis, sign) / eps);
  RowVector g = RowVector::Zero(x.size());
  g[axis] = -sign * s.ds / eps;
  return g;
}

/// h_eps on every row, n x 1.
inline Var h_eps(const Var& x, double eps) {
  Matrix out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, 0) = h_eps(x.value().row(i), eps);
  return x.tape()->record(std::move(out), {x}, [x, eps](Tape& tp, const Matrix& g) {
    Matrix gx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) gx.row(i) = g(i, 0) * h_eps_gradient(x.value().row(i), eps);
    tp.accumulate(x, gx);
  });
}

/// Gradient of h_eps on every row, n x d. Its own derivative uses the
/// Hessian s''/eps^2 * grad(m) grad(m)^T (the distance m is piecewise linear).
inline Var h_eps_gradient(const Var& x, double eps) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = h_eps_gradient(x.value().row(i), eps);
  return x.tape()->record(std::move(out), {x}, [x, eps](Tape& tp, const Matrix& g) {
    Matrix gx = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      int axis;
      double sign;
      const auto s = detail::smoothstep(detail::boundary_distance(x.value().row(i), axis, sign) / eps);
      // grad(m) = -sign e_axis, so H g = s''/eps^2 * g[axis] * e_axis.
      gx(i, axis) = s.dds / (eps * eps) * g(i, axis);
    }
    tp.accumulate(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Template network.

/// ReLU MLP x -> f(x) with N_h + 2 linear layers of width d_mu, a skip
/// connection re-injecting x at the middle layer, and the output clamped to
/// [-0.5, 0.5].
struct TemplateNet {
  int dim = 2;
  int width = 64;
  int hidden = 5;  // N_h: linear layers between the first and the last
  double clamp = 0.5;
  Parameters params;

  int layer_count() const { return hidden + 2; }
  int skip_layer() const { return layer_count() / 2; }
  int fan_in(int layer) const {
    if (layer == 0) return dim;
    return layer == skip_layer() ? width + dim : width;
  }
  int fan_out(int layer) const { return layer + 1 == layer_count() ? 1 : width; }
  const Matrix& weight(int layer) const { return params.tensors[2 * layer]; }
  const Matrix& bias(int layer) const { return params.tensors[2 * layer + 1]; }

  static TemplateNet zeros(int dim, int width, int hidden) {
    if (dim != 2 && dim != 3) throw InvalidArgument("template dimension must be 2 or 3");
    if (width < 1 || hidden < 0) throw InvalidArgument("template widths must be positive");
    TemplateNet net;
    net.dim = dim;
    net.width = width;
    net.hidden = hidden;
    for (int l = 0; l < net.layer_count(); ++l) {
      net.params.tensors.push_back(Matrix::Zero(net.fan_out(l), net.fan_in(l)));
      net.params.tensors.push_back(Matrix::Zero(1, net.fan_out(l)));
    }
    return net;
  }
};

/// Evenly spread unit directions: uniform angles in 2D, a Fibonacci lattice
/// in 3D.
inline Matrix spread_directions(int dim, int count) {
  Matrix u(count, dim);
  if (dim == 2) {
    for (int i = 0; i < count; ++i) {
      const double theta = 2.0 * std::numbers::pi * (i + 0.5) / count;
      u(i, 0) = std::cos(theta);
      u(i, 1) = std::sin(theta);
    }
    return u;
  }
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / count;
    const double r = std::sqrt(1.0 - z * z);
    u(i, 0) = r * std::cos(golden * i);
    u(i, 1) = r * std::sin(golden * i);
    u(i, 2) = z;
  }
  return u;
}

/// Sphere-like initialization: f(x) ~= radius - |x| (positive inside).
///
/// The first layer computes relu(u_i . x) for spread unit directions u_i,
/// whose average is |x|/pi (2D) or |x|/4 (3D); hidden layers start at the
/// identity (skip inputs at zero) plus uniform noise of bound
/// noise/sqrt(fan_in); the last layer sums the features with the matching
/// negative weight and adds the radius as bias.
inline TemplateNet init_template(int dim, int width, int hidden, Rng& rng, double radius = 0.5, double noise = 1e-2) {
  TemplateNet net = TemplateNet::zeros(dim, width, hidden);
  auto jitter = [&](Matrix& m, int fan_in) {
    const double bound = noise / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += uniform(rng, -bound, bound);
  };
  for (int l = 0; l < net.layer_count(); ++l) {
    Matrix& w = net.params.tensors[2 * l];
    Matrix& b = net.params.tensors[2 * l + 1];
    if (l == 0) {
      w = spread_directions(dim, width);
    } else if (l + 1 == net.layer_count()) {
      const double average = dim == 2 ? 1.0 / std::numbers::pi : 0.25;
      w.setConstant(-1.0 / (average * width));
      b(0, 0) = radius;
    } else {
      w.leftCols(width).setIdentity();
    }
    jitter(w, net.fan_in(l));
    jitter(b, net.fan_in(l));
  }
  return net;
}

/// Template forward pass on a tape. Returns the clamped output (n x 1) with
/// tangents when the input jet carries them.
inline Jet template_forward(const TemplateNet& net, const BoundParams& p, const Jet& x) {
  Jet h = x;
  for (int l = 0; l < net.layer_count(); ++l) {
    if (l == net.skip_layer()) h = hcat(h, x);
    h = linear(h, p[2 * l], p[2 * l + 1]);
    if (l + 1 < net.layer_count()) h = relu(h);
  }
  const Matrix m = ad::clamp_mask(h.value, -net.clamp, net.clamp);
  Jet out;
  out.value = ad::clamp(h.value, -net.clamp, net.clamp);
  for (const Var& t : h.tangents) out.tangents.push_back(ad::mask(t, m));
  return out;
}

struct TemplateEval {
  Vector values;  // n
  Matrix grads;   // n x dim
};

/// Clamped template values and exact spatial gradients at every row of x.
inline TemplateEval template_eval(const TemplateNet& net, const Matrix& x) {
  if (x.cols() != net.dim) throw InvalidArgument("template input has wrong dimension");
  if (!x.allFinite()) throw InvalidArgument("template input is not finite");
  Tape tape;
  const BoundParams p = bind(tape, net.params, false);
  const Jet out = template_forward(net, p, seed_jet(tape, tape.constant(x), true));
  return {out.value.value().col(0), gradient(out).value()};
}

/// Reverse-mode parameter gradient of
///   sum_i value_cot[i] * f(x_i) + sum_i <grad_cot[i], grad f(x_i)>.
inline ParamGradient template_backprop(const TemplateNet& net, const Matrix& x, const Vector& value_cot,
                                       const Matrix& grad_cot) {
  if (x.cols() != net.dim || value_cot.size() != x.rows() || grad_cot.rows() != x.rows() || grad_cot.cols() != net.dim)
    throw InvalidArgument("cotangent shapes do not match the evaluated points");
  Tape tape;
  const BoundParams p = bind(tape, net.params, true);
  const Jet out = template_forward(net, p, seed_jet(tape, tape.constant(x), true));
  const Var loss = ad::add(ad::sum(ad::mul(out.value, tape.constant(value_cot))),
                           ad::sum(ad::mul(gradient(out), tape.constant(grad_cot))));
  tape.backward(loss);
  return collect(tape, p);
}

// ---------------------------------------------------------------------------
// Velocity networks.

/// K stationary velocity networks (x, z) -> R^dim, each damped by h_eps so
/// that the field vanishes on and outside the domain boundary.
///
/// Per network: first layer W_x x + W_z z + b (the latent enters as an
/// additive modulation of the first pre-activation), `hidden` further ReLU
/// layers of width d_vel, and a linear output layer.
struct VelocityNetStack {
  int dim = 2;
  int latent_dim = 32;
  int width = 128;
  int hidden = 2;
  int stages = 10;  // K
  double eps = 0.05;
  bool damping = true;
  Parameters params;

  int tensors_per_net() const { return 3 + 2 * hidden + 2; }
  std::size_t offset(int k) const { return static_cast<std::size_t>(k) * tensors_per_net(); }

  static VelocityNetStack zeros(int dim, int latent_dim, int width, int hidden, int stages, double eps) {
    if (dim != 2 && dim != 3) throw InvalidArgument("velocity dimension must be 2 or 3");
    if (stages < 1) throw InvalidArgument("need at least one velocity network");
    if (latent_dim < 1 || width < 1 || hidden < 0) throw InvalidArgument("velocity widths must be positive");
    if (!(eps > 0.0)) throw InvalidArgument("eps must be positive");
    VelocityNetStack s;
    s.dim = dim;
    s.latent_dim = latent_dim;
    s.width = width;
    s.hidden = hidden;
    s.stages = stages;
    s.eps = eps;
    for (int k = 0; k < stages; ++k) {
      s.params.tensors.push_back(Matrix::Zero(width, dim));
      s.params.tensors.push_back(Matrix::Zero(width, latent_dim));
      s.params.tensors.push_back(Matrix::Zero(1, width));
      for (int h = 0; h < hidden; ++h) {
        s.params.tensors.push_back(Matrix::Zero(width, width));
        s.params.tensors.push_back(Matrix::Zero(1, width));
      }
      s.params.tensors.push_back(Matrix::Zero(dim, width));
      s.params.tensors.push_back(Matrix::Zero(1, dim));
    }
    return s;
  }

  Matrix& output_weight(int k) { return params.tensors[offset(k) + tensors_per_net() - 2]; }
  Matrix& output_bias(int k) { return params.tensors[offset(k) + tensors_per_net() - 1]; }
};

/// Uniform fan-in initialization, bound 1/sqrt(fan_in) for every layer; the
/// output layer bound is further multiplied by `output_scale`.
inline VelocityNetStack init_velocity(int dim, int latent_dim, int width, int hidden, int stages, double eps, Rng& rng,
                                      double output_scale = 1.0) {
  VelocityNetStack s = VelocityNetStack::zeros(dim, latent_dim, width, hidden, stages, eps);
  auto fill = [&](Matrix& m, double bound) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -bound, bound);
  };
  for (int k = 0; k < stages; ++k) {
    const std::size_t o = s.offset(k);
    const double first = 1.0 / std::sqrt(static_cast<double>(dim + latent_dim));
    fill(s.params.tensors[o], first);
    fill(s.params.tensors[o + 1], first);
    fill(s.params.tensors[o + 2], first);
    const double inner = 1.0 / std::sqrt(static_cast<double>(width));
    for (int h = 0; h < hidden; ++h) {
      fill(s.params.tensors[o + 3 + 2 * h], inner);
      fill(s.params.tensors[o + 4 + 2 * h], inner);
    }
    fill(s.output_weight(k), inner * output_scale);
    fill(s.output_bias(k), inner * output_scale);
  }
  return s;
}

/// Stage k (0-based) velocity on a tape: v = h_eps(x) * net_k(x, z), with
/// tangents by the product rule when x carries them. z is 1 x latent_dim.
inline Jet velocity_forward(const VelocityNetStack& s, const BoundParams& p, int k, const Jet& x, const Var& z) {
  const std::size_t o = s.offset(k);
  const Var modulation = ad::add(ad::matmul_nt(z, p[o + 1]), p[o + 2]);
  Jet h;
  h.value = ad::add_row(ad::matmul_nt(x.value, p[o]), modulation);
  for (const Var& t : x.tangents) h.tangents.push_back(ad::matmul_nt(t, p[o]));
  h = relu(h);
  for (int l = 0; l < s.hidden; ++l) h = relu(linear(h, p[o + 3 + 2 * l], p[o + 4 + 2 * l]));
  const std::size_t out = o + s.tensors_per_net() - 2;
  Jet raw = linear(h, p[out], p[out + 1]);
  if (!s.damping) return raw;

  const Var damp = h_eps(x.value, s.eps);
  Jet v;
  v.value = ad::mul_col(raw.value, damp);
  if (!x.tangents.empty()) {
    const Var damp_grad = h_eps_gradient(x.value, s.eps);
    for (std::size_t j = 0; j < x.tangents.size(); ++j) {
      const Var directional = ad::row_dot(damp_grad, x.tangents[j]);
      v.tangents.push_back(ad::add(ad::mul_col(raw.value, directional), ad::mul_col(raw.tangents[j], damp)));
    }
  }
  return v;
}

/// Spatial Jacobian rows from a velocity jet seeded with identity tangents:
/// entry (a, b) = d v_a / d x_b is column a of tangent b.
inline Var jacobian_entry(const Jet& v, int a, int b) { return ad::col(v.tangents[b], a); }

struct VelocityEval {
  Matrix v;                  // n x dim
  std::vector<Matrix> jac;   // n matrices dim x dim, jac[i](a, b) = d v_a / d x_b
};

inline void check_stage(const VelocityNetStack& s, int k) {
  if (k < 0 || k >= s.stages) throw InvalidArgument("velocity stage index out of range");
}

inline Matrix latent_row(const VelocityNetStack& s, const Vector& z) {
  if (z.size() != s.latent_dim) throw InvalidArgument("latent code has wrong dimension");
  return z.transpose();
}

/// Damped velocity of stage k (0-based) and its exact spatial Jacobian.
inline VelocityEval velocity_eval(const VelocityNetStack& s, int k, const Matrix& x, const Vector& z) {
  check_stage(s, k);
  if (x.cols() != s.dim) throw InvalidArgument("velocity input has wrong dimension");
  Tape tape;
  const BoundParams p = bind(tape, s.params, false);
  const Jet v = velocity_forward(s, p, k, seed_jet(tape, tape.constant(x), true), tape.constant(latent_row(s, z)));
  VelocityEval out;
  out.v = v.value.value();
  out.jac.assign(static_cast<std::size_t>(x.rows()), Matrix(s.dim, s.dim));
  for (int b = 0; b < s.dim; ++b)
    for (Eigen::Index i = 0; i < x.rows(); ++i) out.jac[i].col(b) = v.tangents[b].value().row(i).transpose();
  return out;
}

/// Reverse-mode parameter gradient of
///   sum_i <v_cot[i], v(x_i)> + sum_i <jac_cot[i], J v(x_i)>_F
/// for stage k. Entries for other stages are zero.
inline ParamGradient velocity_backprop(const VelocityNetStack& s, int k, const Matrix& x, const Vector& z,
                                       const Matrix& v_cot, const std::vector<Matrix>& jac_cot) {
  check_stage(s, k);
  if (x.cols() != s.dim || v_cot.rows() != x.rows() || v_cot.cols() != s.dim ||
      jac_cot.size() != static_cast<std::size_t>(x.rows()))
    throw InvalidArgument("cotangent shapes do not match the evaluated points");
  for (const auto& j : jac_cot)
    if (j.rows() != s.dim || j.cols() != s.dim) throw InvalidArgument("Jacobian cotangent has wrong shape");
  Tape tape;
  const BoundParams p = bind(tape, s.params, true);
  const Jet v = velocity_forward(s, p, k, seed_jet(tape, tape.constant(x), true), tape.constant(latent_row(s, z)));
  Var loss = ad::sum(ad::mul(v.value, tape.constant(v_cot)));
  for (int b = 0; b < s.dim; ++b) {
    Matrix cot(x.rows(), s.dim);
    for (Eigen::Index i = 0; i < x.rows(); ++i) cot.row(i) = jac_cot[i].col(b).transpose();
    loss = ad::add(loss, ad::sum(ad::mul(v.tangents[b], tape.constant(cot))));
  }
  tape.backward(loss);
  return collect(tape, p);
}

/// A trained (or initialized) template and velocity stack.
struct Model {
  TemplateNet tpl;
  VelocityNetStack vel;
};

}  // namespace rda::network
