#pragma once

// Training objective: surface fidelity with normal alignment, off-surface
// penalty, eikonal penalty on the template, and one deformation regularizer
// (Killing + L2 velocity norm, or the pointwise Huber baseline). An occupancy
// fidelity with binary cross entropy is available as an alternative.
//
// Every term is built on a tape so the same code serves plain evaluation
// (parameters bound as constants) and training (parameters as variables).

#include "rda/flow.hpp"
#include "rda/geometry/mesh.hpp"

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace rda::loss {

using ad::Tape;
using ad::Var;
using network::BoundParams;
using network::Jet;
using network::ParamGradient;
using network::TemplateNet;
using network::VelocityNetStack;

struct LossWeights {
  double sigma2 = 0.025;
  double tau = 0.01;
  double lambda = 0.005;
  double beta = 1.5;
  double alpha = 100.0;
  double eta = 0.05;
  double c_pw = 0.1;
  double gamma = 1e-4;  // latent penalty, inference only

  void validate() const {
    for (double w : {sigma2, tau, lambda, beta, alpha, eta, c_pw, gamma})
      if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidArgument("loss weights must be finite and non-negative");
  }
};

enum class Mode { riemannian, pointwise };
enum class Fidelity { surface, occupancy };

inline std::string to_string(Mode m) { return m == Mode::riemannian ? "riemannian" : "pointwise"; }
inline std::string to_string(Fidelity f) { return f == Fidelity::surface ? "surface" : "occupancy"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "riemannian") return Mode::riemannian;
  if (s == "pointwise") return Mode::pointwise;
  throw InvalidArgument("unknown regularization mode '" + s + "'");
}

inline Fidelity parse_fidelity(const std::string& s) {
  if (s == "surface") return Fidelity::surface;
  if (s == "occupancy") return Fidelity::occupancy;
  throw InvalidArgument("unknown fidelity '" + s + "'");
}

/// Logit scale applied to the clamped implicit value in the occupancy loss.
inline constexpr double kOccupancyLogitScale = 10.0;
inline constexpr double kHuberDelta = 0.25;

/// Unweighted loss terms. Terms whose weight is zero (and the regularizer not
/// selected by the mode) are not evaluated and stay 0.
struct LossBreakdown {
  double on_surface = 0.0;
  double normal_term = 0.0;
  double off_surface = 0.0;
  double eikonal = 0.0;
  double riemannian = 0.0;
  double pointwise = 0.0;
  double bce = 0.0;
  double total = 0.0;

  static constexpr std::array<const char*, 8> kNames = {"on_surface", "normal_term", "off_surface", "eikonal",
                                                        "riemannian", "pointwise",   "bce",         "total"};

  std::array<double, 8> values() const {
    return {on_surface, normal_term, off_surface, eikonal, riemannian, pointwise, bce, total};
  }

  double weighted_sum(const LossWeights& w, Mode mode) const {
    double t = on_surface + w.tau * normal_term + w.beta * off_surface + w.lambda * eikonal + bce;
    t += mode == Mode::riemannian ? w.sigma2 * riemannian : w.c_pw * pointwise;
    return t;
  }

  /// this += scale * other, field by field.
  void accumulate(const LossBreakdown& o, double scale) {
    on_surface += scale * o.on_surface;
    normal_term += scale * o.normal_term;
    off_surface += scale * o.off_surface;
    eikonal += scale * o.eikonal;
    riemannian += scale * o.riemannian;
    pointwise += scale * o.pointwise;
    bce += scale * o.bce;
    total += scale * o.total;
  }

  /// Name of the first non-finite field, or empty.
  std::string first_non_finite() const {
    const auto v = values();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!std::isfinite(v[i])) return kNames[i];
    return {};
  }
};

// ---------------------------------------------------------------------------
// Pointwise formulas.

/// <a, b> / max(|a|, |b|, 1e-8). Not the classical cosine: bounded by the
/// smaller of the two norms.
inline double f_cos(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
  return a.dot(b) / std::max({a.norm(), b.norm(), 1e-8});
}

/// Row-wise f_cos on a tape; `b` is constant.
inline Var f_cos(const Var& a, const Matrix& b) {
  Tape& t = *a.tape();
  const Var na = ad::row_norm(a);
  const Matrix nb = b.rowwise().norm();
  const Matrix pick_a = (na.value().array() >= nb.array()).cast<double>().matrix();
  Var denom = ad::add(ad::mask(na, pick_a), t.constant(nb.cwiseProduct((1.0 - pick_a.array()).matrix())));
  denom = ad::maximum(denom, Matrix::Constant(denom.rows(), 1, 1e-8));
  return ad::div(ad::row_dot(a, t.constant(b)), denom);
}

inline double huber(double r, double delta = kHuberDelta) {
  r = std::abs(r);
  return r <= delta ? 0.5 * r * r : delta * (r - 0.5 * delta);
}

/// Stage indices {floor(K/4) * i : 1 <= i <= K / floor(K/4)} at which the
/// pointwise loss compares displacements.
inline std::vector<int> pointwise_stages(int stages) {
  if (stages < 4) throw InvalidArgument("the pointwise loss needs K >= 4");
  const int q = stages / 4;
  std::vector<int> t;
  for (int i = 1; i <= stages / q; ++i) t.push_back(q * i);
  return t;
}

// ---------------------------------------------------------------------------
// Tape terms.

/// Points for one shape's loss evaluation, already drawn by the caller.
struct ShapeInputs {
  Matrix surface_points;   // n_s x dim, on the target shape
  Matrix surface_normals;  // n_s x dim, unit
  Matrix domain_points;    // n_d x dim, uniform in the domain
  Matrix occ_points;       // occupancy fidelity only
  Matrix occ_labels;       // n_o x 1, in {0, 1}
};

struct BoundNets {
  BoundParams tpl;
  BoundParams vel;
};

struct TermVars {
  Var on_surface, normal_term, off_surface, eikonal, riemannian, pointwise, bce;
};

/// sum_{a,b} (J_ab + J_ba)^2 per row, from a velocity jet with identity
/// tangents.
inline Var killing_rows(const Jet& v) {
  const int d = static_cast<int>(v.tangents.size());
  Var acc;
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      const Var s = a == b ? ad::scale(network::jacobian_entry(v, a, a), 2.0)
                           : ad::add(network::jacobian_entry(v, a, b), network::jacobian_entry(v, b, a));
      const Var sq = a == b ? ad::square(s) : ad::scale(ad::square(s), 2.0);
      acc = acc.valid() ? ad::add(acc, sq) : sq;
    }
  }
  return acc;
}

/// Killing + eta L2 norm of every stage field at `points`, times the domain
/// volume, averaged over stages.
inline Var riemannian_term(const VelocityNetStack& s, const BoundParams& vp, const Var& z, const Matrix& points,
                           double eta) {
  Tape& t = *z.tape();
  Var acc;
  for (int k = 0; k < s.stages; ++k) {
    const Jet v = network::velocity_forward(s, vp, k, network::seed_jet(t, t.constant(points), true), z);
    Var rows = killing_rows(v);
    if (eta != 0.0) rows = ad::add(rows, ad::scale(ad::row_sumsq(v.value), eta));
    const Var m = ad::mean(rows);
    acc = acc.valid() ? ad::add(acc, m) : m;
  }
  return ad::scale(acc, std::pow(2.0, s.dim) / s.stages);
}

/// sum_{t in T} mean_j huber(|x_j(t) - x_j(0)|) over one or more flowed
/// point sets (their rows are pooled).
inline Var pointwise_term(const std::vector<const std::vector<Jet>*>& flows, int stages) {
  Var acc;
  for (int t : pointwise_stages(stages)) {
    std::vector<Var> disp;
    for (const auto* f : flows) disp.push_back(ad::row_norm(ad::sub((*f)[t].value, (*f)[0].value)));
    const Var m = ad::mean(ad::huber(disp.size() == 1 ? disp[0] : ad::vcat(disp), kHuberDelta));
    acc = acc.valid() ? ad::add(acc, m) : m;
  }
  return acc;
}

/// Mean | |grad f| - 1 | of the template over `points`; the points are
/// constants, so nothing flows back into the velocity networks or latents.
inline Var eikonal_term(const TemplateNet& tpl, const BoundParams& tp, Tape& t, const Matrix& points) {
  const Jet f = network::template_forward(tpl, tp, network::seed_jet(t, t.constant(points), true));
  return ad::mean(ad::abs(ad::add_const(ad::row_norm(network::gradient(f)), -1.0)));
}

/// All active terms for one shape (unweighted).
inline TermVars shape_terms(const TemplateNet& tpl, const VelocityNetStack& vel, const BoundNets& b, const Var& z,
                            const ShapeInputs& in, const LossWeights& w, Mode mode, Fidelity fid) {
  Tape& t = *z.tape();
  TermVars out;
  std::vector<std::vector<Jet>> flows;
  flows.reserve(3);

  if (fid == Fidelity::surface) {
    if (in.surface_points.rows() == 0) throw InvalidArgument("empty surface sample");
    if (in.surface_normals.rows() != in.surface_points.rows() || in.surface_points.cols() != vel.dim)
      throw InvalidArgument("surface points and normals do not match");
    const bool tangents = w.tau != 0.0;
    flows.push_back(flow::flow_forward(vel, b.vel, network::seed_jet(t, t.constant(in.surface_points), tangents), z));
    const Jet f = network::template_forward(tpl, b.tpl, flows.back().back());
    out.on_surface = ad::mean(ad::abs(f.value));
    if (tangents)
      out.normal_term = ad::add_const(ad::scale(ad::mean(f_cos(network::gradient(f), in.surface_normals)), -1.0), 1.0);

    const bool need_domain_flow = w.beta != 0.0 || (mode == Mode::pointwise && w.c_pw != 0.0);
    if (need_domain_flow && in.domain_points.rows() > 0) {
      flows.push_back(flow::flow_forward(vel, b.vel, Jet{t.constant(in.domain_points), {}}, z));
      if (w.beta != 0.0) {
        const Jet g = network::template_forward(tpl, b.tpl, flows.back().back());
        out.off_surface = ad::mean(ad::exp(ad::scale(ad::abs(g.value), -w.alpha)));
      }
    }
    if (w.lambda != 0.0) {
      Matrix pts(in.domain_points.rows() + in.surface_points.rows(), vel.dim);
      pts << in.domain_points, flows.front().back().value.value();
      out.eikonal = eikonal_term(tpl, b.tpl, t, pts);
    }
  } else {
    if (in.occ_points.rows() == 0 || in.occ_labels.rows() != in.occ_points.rows())
      throw InvalidArgument("occupancy points and labels do not match");
    flows.push_back(flow::flow_forward(vel, b.vel, Jet{t.constant(in.occ_points), {}}, z));
    const Jet f = network::template_forward(tpl, b.tpl, flows.back().back());
    out.bce = ad::mean(ad::bce_with_logits(ad::scale(f.value, kOccupancyLogitScale), in.occ_labels));
  }

  if (mode == Mode::riemannian && w.sigma2 != 0.0) {
    if (in.domain_points.rows() == 0) throw InvalidArgument("the velocity norm needs domain points");
    out.riemannian = riemannian_term(vel, b.vel, z, in.domain_points, w.eta);
  }
  if (mode == Mode::pointwise && w.c_pw != 0.0) {
    std::vector<const std::vector<Jet>*> pf;
    for (const auto& f : flows) pf.push_back(&f);
    out.pointwise = pointwise_term(pf, vel.stages);
  }
  return out;
}

inline double value_or_zero(const Var& v) { return v.valid() ? v.scalar() : 0.0; }

/// Weighted sum on the tape, in the same order as LossBreakdown::weighted_sum.
inline Var weighted_total(const TermVars& tv, const LossWeights& w, Mode mode, Tape& t) {
  Var acc = t.constant(Matrix::Zero(1, 1));
  auto add = [&](const Var& v, double weight) {
    if (v.valid()) acc = ad::add(acc, weight == 1.0 ? v : ad::scale(v, weight));
  };
  add(tv.on_surface, 1.0);
  add(tv.normal_term, w.tau);
  add(tv.off_surface, w.beta);
  add(tv.eikonal, w.lambda);
  add(tv.bce, 1.0);
  if (mode == Mode::riemannian)
    add(tv.riemannian, w.sigma2);
  else
    add(tv.pointwise, w.c_pw);
  return acc;
}

inline LossBreakdown breakdown_of(const TermVars& tv, const Var& total) {
  LossBreakdown b;
  b.on_surface = value_or_zero(tv.on_surface);
  b.normal_term = value_or_zero(tv.normal_term);
  b.off_surface = value_or_zero(tv.off_surface);
  b.eikonal = value_or_zero(tv.eikonal);
  b.riemannian = value_or_zero(tv.riemannian);
  b.pointwise = value_or_zero(tv.pointwise);
  b.bce = value_or_zero(tv.bce);
  b.total = total.scalar();
  return b;
}

// ---------------------------------------------------------------------------
// Per-shape loss and gradient.

struct Trainable {
  bool tpl = true;
  bool vel = true;
  bool z = true;
};

struct ShapeGradient {
  LossBreakdown terms;
  ParamGradient tpl;  // empty tensors when not trainable
  ParamGradient vel;
  Vector z;
};

/// Loss terms for one shape and the gradients of `scale * total`.
inline ShapeGradient shape_loss_gradient(const TemplateNet& tpl, const VelocityNetStack& vel, const Vector& z,
                                         const ShapeInputs& in, const LossWeights& w, Mode mode, Fidelity fid,
                                         double scale = 1.0, Trainable train = {}) {
  Tape t;
  BoundNets b{network::bind(t, tpl.params, train.tpl), network::bind(t, vel.params, train.vel)};
  const Matrix zr = network::latent_row(vel, z);
  const Var zv = train.z ? t.variable(zr) : t.constant(zr);
  const TermVars tv = shape_terms(tpl, vel, b, zv, in, w, mode, fid);
  const Var total = weighted_total(tv, w, mode, t);
  ShapeGradient out;
  out.terms = breakdown_of(tv, total);
  if (train.tpl || train.vel || train.z) {
    t.backward(total, Matrix::Constant(1, 1, scale));
    if (train.tpl) out.tpl = network::collect(t, b.tpl);
    if (train.vel) out.vel = network::collect(t, b.vel);
    if (train.z) out.z = t.grad(zv).row(0).transpose();
  }
  return out;
}

/// Loss terms for one shape without gradients.
inline LossBreakdown shape_loss(const TemplateNet& tpl, const VelocityNetStack& vel, const Vector& z,
                                const ShapeInputs& in, const LossWeights& w, Mode mode,
                                Fidelity fid = Fidelity::surface) {
  return shape_loss_gradient(tpl, vel, z, in, w, mode, fid, 1.0, {false, false, false}).terms;
}

/// Batch objective: the mean of per-shape losses. The eikonal term is the
/// mean over the pooled points of the batch, which equals the mean of the
/// per-shape eikonal terms because every shape contributes the same counts.
inline LossBreakdown total_training_loss(const TemplateNet& tpl, const VelocityNetStack& vel,
                                         const std::vector<Vector>& latents, const std::vector<ShapeInputs>& batch,
                                         const LossWeights& w, Mode mode, Fidelity fid = Fidelity::surface) {
  if (batch.empty() || latents.size() != batch.size()) throw InvalidArgument("batch and latents do not match");
  for (const auto& in : batch)
    if (in.surface_points.rows() != batch[0].surface_points.rows() ||
        in.domain_points.rows() != batch[0].domain_points.rows())
      throw InvalidArgument("inconsistent batch shapes");
  LossBreakdown out;
  for (std::size_t i = 0; i < batch.size(); ++i)
    out.accumulate(shape_loss(tpl, vel, latents[i], batch[i], w, mode, fid), 1.0 / batch.size());
  return out;
}

// ---------------------------------------------------------------------------
// Individual terms as plain functions.

namespace detail {
struct Constants {
  Tape tape;
  BoundNets nets;
  Var z;
  Constants(const TemplateNet* tpl, const VelocityNetStack& vel, const Vector& zv) {
    if (tpl) nets.tpl = network::bind(tape, tpl->params, false);
    nets.vel = network::bind(tape, vel.params, false);
    z = tape.constant(network::latent_row(vel, zv));
  }
};
}  // namespace detail

/// Per-point values |I| + tau (1 - f_cos(grad I, n)) at time 1.
inline Vector on_surface_values(const TemplateNet& tpl, const VelocityNetStack& vel, const Vector& z,
                                const geometry::SurfaceSample& sample, double tau) {
  if (sample.size() == 0) throw InvalidArgument("empty surface sample");
  const auto e = flow::deformed_implicit(tpl, vel, sample.points, z, 1.0);
  Vector out(e.values.size());
  for (Eigen::Index i = 0; i < out.size(); ++i)
    out[i] = std::abs(e.values[i]) + tau * (1.0 - f_cos(e.grads.row(i), sample.normals.row(i)));
  return out;
}

inline double on_surface_fidelity(const TemplateNet& tpl, const VelocityNetStack& vel, const Vector& z,
                                  const geometry::SurfaceSample& sample, double tau) {
  return on_surface_values(tpl, vel, z, sample, tau).mean();
}

inline double off_surface_penalty(const TemplateNet& tpl, const VelocityNetStack& vel, const Vector& z,
                                  const Matrix& domain_points, double alpha) {
  if (!(alpha > 0.0)) throw InvalidArgument("alpha must be positive");
  const auto e = flow::deformed_implicit(tpl, vel, domain_points, z, 1.0);
  return (-alpha * e.values.array().abs()).exp().mean();
}

inline double eikonal_loss(const TemplateNet& tpl, const Matrix& uniform_points, const Matrix& warped_points) {
  Matrix pts(uniform_points.rows() + warped_points.rows(), tpl.dim);
  pts << uniform_points, warped_points;
  if (pts.rows() == 0) throw InvalidArgument("eikonal loss needs points");
  const auto e = network::template_eval(tpl, pts);
  return (e.grads.rowwise().norm().array() - 1.0).abs().mean();
}

/// Killing integrand |J + J^T|_F^2 of stage k at every point.
inline Vector killing_integrand(const VelocityNetStack& vel, int k, const Vector& z, const Matrix& points) {
  network::check_stage(vel, k);
  detail::Constants c(nullptr, vel, z);
  const Jet v = network::velocity_forward(vel, c.nets.vel, k, network::seed_jet(c.tape, c.tape.constant(points), true),
                                          c.z);
  return killing_rows(v).value().col(0);
}

inline double riemannian_regularizer(const VelocityNetStack& vel, const Vector& z, const Matrix& domain_points,
                                     double eta) {
  if (!(eta >= 0.0)) throw InvalidArgument("eta must be non-negative");
  if (domain_points.rows() == 0) throw InvalidArgument("the velocity norm needs domain points");
  detail::Constants c(nullptr, vel, z);
  return riemannian_term(vel, c.nets.vel, c.z, domain_points, eta).scalar();
}

inline double pointwise_baseline_loss(const VelocityNetStack& vel, const Vector& z, const Matrix& points) {
  detail::Constants c(nullptr, vel, z);
  const auto f = flow::flow_forward(vel, c.nets.vel, Jet{c.tape.constant(points), {}}, c.z);
  return pointwise_term({&f}, vel.stages).scalar();
}

inline double occupancy_bce_fidelity(const TemplateNet& tpl, const VelocityNetStack& vel, const Vector& z,
                                     const Matrix& points, const Matrix& labels) {
  detail::Constants c(&tpl, vel, z);
  const auto f = flow::flow_forward(vel, c.nets.vel, Jet{c.tape.constant(points), {}}, c.z);
  const Jet out = network::template_forward(tpl, c.nets.tpl, f.back());
  return ad::mean(ad::bce_with_logits(ad::scale(out.value, kOccupancyLogitScale), labels)).scalar();
}

}  // namespace rda::loss
