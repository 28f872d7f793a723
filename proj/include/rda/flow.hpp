#pragma once

#include "rda/network.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace rda::flow {

using network::BoundParams;
using network::Jet;
using network::TemplateNet;
using network::VelocityNetStack;

/// Positions of points at the stage times {0, 1/K, ..., 1}.
struct FlowTrajectory {
  std::vector<double> times;
  std::vector<Matrix> positions;  // K+1 entries, each n x dim
  /// Largest |coordinate| reached at any stage.
  double max_abs_coordinate = 0.0;

  const Matrix& end() const { return positions.back(); }
};

struct FlowOptions {
  /// Throw if any position leaves the closed domain by more than 1e-12.
  bool enforce_domain = false;
};

// ---------------------------------------------------------------------------
// Tape versions, used by the losses.

inline Jet euler_step(const Jet& x, const Jet& v, double step) {
  Jet out;
  out.value = ad::add(x.value, ad::scale(v.value, step));
  for (std::size_t j = 0; j < x.tangents.size(); ++j)
    out.tangents.push_back(ad::add(x.tangents[j], ad::scale(v.tangents[j], step)));
  return out;
}

/// Forward Euler with one step per stationary network:
/// x_k = x_{k-1} + v_k(x_{k-1}, z) / K. Starting from stage `first`, returns
/// stages first..last. Tangents, when present, track d x_k / d x_first.
inline std::vector<Jet> flow_forward(const VelocityNetStack& s, const BoundParams& p, const Jet& x0, const ad::Var& z,
                                     int last = -1, int first = 0) {
  if (last < 0) last = s.stages;
  if (first < 0 || first > last || last > s.stages) throw InvalidArgument("flow stage range out of bounds");
  std::vector<Jet> out{x0};
  const double step = 1.0 / s.stages;
  for (int k = first; k < last; ++k)
    out.push_back(euler_step(out.back(), network::velocity_forward(s, p, k, out.back(), z), step));
  return out;
}

/// Euler integration of the negated field with the stages in reverse order:
/// y_k = y_{k-1} - v_{K+1-k}(y_{k-1}, z) / K.
inline std::vector<Jet> flow_reverse(const VelocityNetStack& s, const BoundParams& p, const Jet& y0, const ad::Var& z) {
  std::vector<Jet> out{y0};
  const double step = -1.0 / s.stages;
  for (int k = s.stages - 1; k >= 0; --k)
    out.push_back(euler_step(out.back(), network::velocity_forward(s, p, k, out.back(), z), step));
  return out;
}

// ---------------------------------------------------------------------------
// Plain evaluation.

namespace detail {

inline void check_points(const VelocityNetStack& s, const Matrix& points) {
  if (points.cols() != s.dim) throw InvalidArgument("points have wrong dimension");
  if (!points.allFinite()) throw NonFiniteError("non-finite input points", "flow");
}

inline FlowTrajectory collect(const std::vector<Jet>& stages, const VelocityNetStack& s, const FlowOptions& opt,
                              const char* direction, int first = 0) {
  FlowTrajectory traj;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    const Matrix& x = stages[k].value.value();
    if (!x.allFinite())
      throw NonFiniteError(std::string("non-finite position in ") + direction + " flow at stage " + std::to_string(k),
                           "flow");
    const double m = x.size() ? x.cwiseAbs().maxCoeff() : 0.0;
    traj.max_abs_coordinate = std::max(traj.max_abs_coordinate, m);
    if (opt.enforce_domain && m > 1.0 + 1e-12)
      throw Error(std::string(direction) + " flow left the domain at stage " + std::to_string(k) +
                  " (max |x| = " + std::to_string(m) + ")");
    traj.times.push_back(static_cast<double>(first + k) / s.stages);
    traj.positions.push_back(x);
  }
  return traj;
}

}  // namespace detail

inline FlowTrajectory integrate_forward(const VelocityNetStack& s, const Matrix& points, const Vector& z,
                                        FlowOptions opt = {}) {
  detail::check_points(s, points);
  ad::Tape tape;
  const BoundParams p = network::bind(tape, s.params, false);
  const auto stages = flow_forward(s, p, Jet{tape.constant(points), {}}, tape.constant(network::latent_row(s, z)));
  return detail::collect(stages, s, opt, "forward");
}

/// Forward integration over the stage range [first, last]; positions[0] is
/// the input at stage `first`.
inline FlowTrajectory integrate_range(const VelocityNetStack& s, const Matrix& points, const Vector& z, int first,
                                      int last, FlowOptions opt = {}) {
  detail::check_points(s, points);
  ad::Tape tape;
  const BoundParams p = network::bind(tape, s.params, false);
  const auto stages =
      flow_forward(s, p, Jet{tape.constant(points), {}}, tape.constant(network::latent_row(s, z)), last, first);
  return detail::collect(stages, s, opt, "forward", first);
}

/// Reverse-time integration; inverts integrate_forward only up to the Euler
/// discretization error, which is O(1/K).
inline FlowTrajectory integrate_reverse(const VelocityNetStack& s, const Matrix& points, const Vector& z,
                                        FlowOptions opt = {}) {
  detail::check_points(s, points);
  ad::Tape tape;
  const BoundParams p = network::bind(tape, s.params, false);
  const auto stages = flow_reverse(s, p, Jet{tape.constant(points), {}}, tape.constant(network::latent_row(s, z)));
  return detail::collect(stages, s, opt, "reverse");
}

/// Stage index for a grid time t in {0, 1/K, ..., 1}.
inline int stage_of_time(const VelocityNetStack& s, double t) {
  const double scaled = t * s.stages;
  const double rounded = std::round(scaled);
  if (std::abs(scaled - rounded) > 1e-9 || rounded < 0 || rounded > s.stages)
    throw InvalidArgument("time is not on the stage grid");
  return static_cast<int>(rounded);
}

/// I(x, z, t) = f(phi_t(x)) and its spatial gradient, where phi_t is the
/// forward flow truncated at stage t*K. The gradient is the chain rule
/// through the Euler steps.
inline network::TemplateEval deformed_implicit(const TemplateNet& tpl, const VelocityNetStack& s, const Matrix& x,
                                               const Vector& z, double t) {
  const int stage = stage_of_time(s, t);
  detail::check_points(s, x);
  ad::Tape tape;
  const BoundParams tp = network::bind(tape, tpl.params, false);
  const BoundParams vp = network::bind(tape, s.params, false);
  const Jet x0 = network::seed_jet(tape, tape.constant(x), true);
  const auto stages = flow_forward(s, vp, x0, tape.constant(network::latent_row(s, z)), stage);
  const Jet f = network::template_forward(tpl, tp, stages.back());
  return {f.value.value().col(0), network::gradient(f).value()};
}

}  // namespace rda::flow
