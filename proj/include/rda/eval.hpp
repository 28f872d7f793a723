#pragma once

// Evaluation protocol: reconstruction metrics on a split, robustness to
// vertex noise, the isometry defect of the learned fields, and a numerical
// check that the Killing norm equals <(eta - Laplacian - grad div) v, v>.

#include "rda/infer.hpp"

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace rda::eval {

using geometry::ShapeMesh;
using geometry::SurfaceSample;
using network::Model;

// ---------------------------------------------------------------------------
// Reconstruction metrics.

struct EvalShape {
  int id = 0;
  ShapeMesh mesh;                // clean surface
  SurfaceSample ground_truth;   // dense clean sample used for the metrics
};

struct EvalOptions {
  infer::EncodeConfig encode;
  int resolution = 0;        // template extraction grid, 0 = default
  int input_points = 2048;   // sample handed to the encoder
  int recon_points = 2048;   // sample of the reconstruction used for the metrics
  int em_points = 256;       // subsample size of the exact assignment
  int threads = 1;
  std::uint64_t seed = 0;
};

struct MetricRow {
  int shape_id = 0;
  double cd = 0.0;
  double em = 0.0;
  std::string status = "ok";
  Vector z;

  bool ok() const { return status == "ok"; }
};

struct MetricReport {
  std::vector<MetricRow> rows;
  double mean_cd = 0.0, median_cd = 0.0, mean_em = 0.0, median_em = 0.0;
  int failed = 0;

  /// Aggregates over the rows whose status is "ok".
  void aggregate() {
    std::vector<double> cd, em;
    failed = 0;
    for (const auto& r : rows) {
      if (!r.ok()) {
        ++failed;
        continue;
      }
      cd.push_back(r.cd);
      em.push_back(r.em);
    }
    mean_cd = mean(cd);
    median_cd = median(cd);
    mean_em = mean(em);
    median_em = median(em);
  }

  static double mean(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }

  static double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

/// CD and EM between two point sets with the report's conventions.
inline MetricRow compare_points(const Matrix& reconstruction, const Matrix& truth, int em_points, std::uint64_t seed) {
  MetricRow r;
  r.cd = geometry::chamfer_distance(reconstruction, truth);
  const int n = static_cast<int>(std::min<Eigen::Index>({em_points, reconstruction.rows(), truth.rows()}));
  r.em = geometry::earth_mover_distance(reconstruction, truth, n, seed);
  return r;
}

namespace detail {

inline std::uint64_t shape_seed(std::uint64_t seed, int id, double stddev) {
  // Noise level enters the key so different levels draw independent noise.
  return make_rng({seed, tag(Stream::eval), static_cast<std::uint64_t>(id),
                   static_cast<std::uint64_t>(std::llround(stddev * 1e9))})();
}

inline MetricRow evaluate_shape(const Model& m, const EvalShape& s, double stddev, const EvalOptions& opt) {
  const std::uint64_t seed = shape_seed(opt.seed, s.id, stddev);
  const ShapeMesh noisy = geometry::add_vertex_noise(s.mesh, stddev, seed);
  const SurfaceSample input = geometry::sample_surface(noisy, opt.input_points, seed, s.id);
  infer::EncodeConfig ec = opt.encode;
  ec.seed = seed;
  const infer::EncodeResult enc = infer::encode_shape(m, input, ec);
  const ShapeMesh rec = infer::reconstruct(m, enc.z, opt.resolution);
  const SurfaceSample rec_sample = geometry::sample_surface(rec, opt.recon_points, seed + 1, s.id);
  MetricRow r = compare_points(rec_sample.points, s.ground_truth.points, opt.em_points, seed);
  r.shape_id = s.id;
  r.z = enc.z;
  return r;
}

}  // namespace detail

/// Encodes each shape from a noise-perturbed resample of its mesh,
/// reconstructs it and compares against the clean ground truth. Failures are
/// recorded per shape and do not abort the split.
inline MetricReport noise_level_report(const Model& m, const std::vector<EvalShape>& shapes, double stddev,
                                       const EvalOptions& opt) {
  if (!(stddev >= 0.0)) throw InvalidArgument("noise stddev must be non-negative");
  MetricReport rep;
  rep.rows.resize(shapes.size());
  train::parallel_for(static_cast<int>(shapes.size()), opt.threads, [&](int i) {
    try {
      rep.rows[i] = detail::evaluate_shape(m, shapes[i], stddev, opt);
    } catch (const std::exception& e) {
      MetricRow r;
      r.shape_id = shapes[i].id;
      r.cd = r.em = std::numeric_limits<double>::quiet_NaN();
      r.status = std::string("failed: ") + e.what();
      rep.rows[i] = r;
    }
  });
  rep.aggregate();
  return rep;
}

inline MetricReport evaluate_split(const Model& m, const std::vector<EvalShape>& shapes, const EvalOptions& opt) {
  return noise_level_report(m, shapes, 0.0, opt);
}

inline std::vector<std::pair<double, MetricReport>> noise_experiment(const Model& m,
                                                                     const std::vector<EvalShape>& shapes,
                                                                     const std::vector<double>& stddevs,
                                                                     const EvalOptions& opt) {
  std::vector<std::pair<double, MetricReport>> out;
  for (double s : stddevs) out.emplace_back(s, noise_level_report(m, shapes, s, opt));
  return out;
}

/// Evaluation shapes from box specifications: a fine mesh and a dense
/// ground-truth sample for each.
inline std::vector<EvalShape> shapes_from(const std::vector<geometry::DatasetEntry>& entries, int gt_points = 4096,
                                          std::uint64_t seed = 0) {
  std::vector<EvalShape> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    EvalShape s;
    s.id = entries[i].sample.shape_id;
    s.mesh = geometry::box_mesh(entries[i].spec);
    Rng rng = make_rng({seed, tag(Stream::eval), 1u << 20, static_cast<std::uint64_t>(s.id)});
    s.ground_truth = geometry::sample_box_surface(entries[i].spec, gt_points, rng, s.id);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string report_csv(const MetricReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "shape_id,cd,em,status\n";
  for (const auto& row : r.rows) {
    std::string status = row.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    os << row.shape_id << ',' << row.cd << ',' << row.em << ',' << status << '\n';
  }
  return os.str();
}

inline nlohmann::json report_summary(const MetricReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"shapes", r.rows.size()},
          {"failed", r.failed},
          {"cd", {{"mean", num(r.mean_cd)}, {"median", num(r.median_cd)}}},
          {"em", {{"mean", num(r.mean_em)}, {"median", num(r.median_em)}}}};
}

// ---------------------------------------------------------------------------
// Isometry defect.

/// Mean over stages, latents (rows) and points of |J v + J v^T|_F^2.
inline double isometry_defect(const network::VelocityNetStack& vel, const Matrix& latents, const Matrix& points) {
  if (latents.rows() == 0 || points.rows() == 0) throw InvalidArgument("isometry defect needs latents and points");
  double total = 0.0;
  for (Eigen::Index i = 0; i < latents.rows(); ++i)
    for (int k = 0; k < vel.stages; ++k)
      total += loss::killing_integrand(vel, k, latents.row(i).transpose(), points).mean();
  return total / (static_cast<double>(latents.rows()) * vel.stages);
}

// ---------------------------------------------------------------------------
// Killing norm identity on [-1, 1]^2.

/// A planar vector field. Derivatives are optional; when both are given they
/// replace the finite-difference stencils.
struct FieldSpec {
  std::function<Eigen::Vector2d(double, double)> value;
  /// jacobian(x, y)(a, b) = d v_a / d x_b
  std::function<Eigen::Matrix2d(double, double)> jacobian;
  /// second(x, y)[a](b, c) = d^2 v_a / d x_b d x_c
  std::function<std::array<Eigen::Matrix2d, 2>(double, double)> second;

  bool analytic() const { return static_cast<bool>(jacobian) && static_cast<bool>(second); }

  /// v = sin(pi x) sin(pi y) (1, 1), which vanishes on the boundary.
  static FieldSpec sine() {
    FieldSpec f;
    f.value = [](double x, double y) {
      const double s = std::sin(M_PI * x) * std::sin(M_PI * y);
      return Eigen::Vector2d(s, s);
    };
    return f;
  }

  static FieldSpec sine_analytic() {
    FieldSpec f = sine();
    f.jacobian = [](double x, double y) {
      const double gx = M_PI * std::cos(M_PI * x) * std::sin(M_PI * y);
      const double gy = M_PI * std::sin(M_PI * x) * std::cos(M_PI * y);
      Eigen::Matrix2d j;
      j << gx, gy, gx, gy;
      return j;
    };
    f.second = [](double x, double y) {
      const double p2 = M_PI * M_PI;
      const double s = std::sin(M_PI * x) * std::sin(M_PI * y);
      const double c = std::cos(M_PI * x) * std::cos(M_PI * y);
      Eigen::Matrix2d h;
      h << -p2 * s, p2 * c, p2 * c, -p2 * s;
      return std::array<Eigen::Matrix2d, 2>{h, h};
    };
    return f;
  }

  static FieldSpec zero() {
    FieldSpec f;
    f.value = [](double, double) { return Eigen::Vector2d::Zero(); };
    return f;
  }
};

struct IdentityCheck {
  double lhs = 0.0;  // integral of 1/2 |J + J^T|_F^2 + eta |v|^2
  double rhs = 0.0;  // integral of <(eta - Laplacian - grad div) v, v>
  double rel_err = 0.0;
};

namespace detail {

/// Fourth-order first and second derivative weights along one axis at node
/// i of n, central in the interior and one-sided near the ends. Weights are
/// returned for nodes start..start+size-1 (unscaled by the spacing).
struct Stencil {
  int start = 0;
  std::vector<double> w;
};

inline Stencil first_derivative(int i, int n) {
  if (i >= 2 && i <= n - 3) return {i - 2, {1.0 / 12, -8.0 / 12, 0.0, 8.0 / 12, -1.0 / 12}};
  const bool left = i < 2;
  Stencil s;
  s.w = (i == 0 || i == n - 1) ? std::vector<double>{-25.0 / 12, 48.0 / 12, -36.0 / 12, 16.0 / 12, -3.0 / 12}
                               : std::vector<double>{-3.0 / 12, -10.0 / 12, 18.0 / 12, -6.0 / 12, 1.0 / 12};
  if (left) {
    s.start = 0;
  } else {
    // Mirror: reverse the nodes and flip the sign of an odd derivative.
    std::reverse(s.w.begin(), s.w.end());
    for (double& v : s.w) v = -v;
    s.start = n - 5;
  }
  return s;
}

inline Stencil second_derivative(int i, int n) {
  if (i >= 2 && i <= n - 3) return {i - 2, {-1.0 / 12, 16.0 / 12, -30.0 / 12, 16.0 / 12, -1.0 / 12}};
  Stencil s;
  s.w = (i == 0 || i == n - 1)
            ? std::vector<double>{45.0 / 12, -154.0 / 12, 214.0 / 12, -156.0 / 12, 61.0 / 12, -10.0 / 12}
            : std::vector<double>{10.0 / 12, -15.0 / 12, -4.0 / 12, 14.0 / 12, -6.0 / 12, 1.0 / 12};
  if (i < 2) {
    s.start = 0;
  } else {
    std::reverse(s.w.begin(), s.w.end());
    s.start = n - 6;
  }
  return s;
}

/// Composite trapezoid weight of node i on a grid of n nodes.
inline double trapezoid(int i, int n) { return (i == 0 || i == n - 1) ? 0.5 : 1.0; }

}  // namespace detail

/// Both sides of the Killing norm identity by tensor-grid quadrature with n
/// nodes per axis. Throws if the field does not vanish on the boundary.
inline IdentityCheck verify_appendix_c(const FieldSpec& field, int n = 256, double eta = 1.0,
                                       double boundary_tol = 1e-9) {
  if (n < 8) throw InvalidArgument("the quadrature grid needs at least 8 nodes per axis");
  if (!field.value) throw InvalidArgument("field has no value function");
  const double h = 2.0 / (n - 1);
  auto coord = [&](int i) { return -1.0 + h * i; };

  // Values on the grid: v[a](i, j) with x = coord(i), y = coord(j).
  std::array<Matrix, 2> v{Matrix(n, n), Matrix(n, n)};
  double vmax = 0.0, bmax = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Eigen::Vector2d val = field.value(coord(i), coord(j));
      if (!val.allFinite()) throw InvalidArgument("field is not finite on the quadrature grid");
      v[0](i, j) = val[0];
      v[1](i, j) = val[1];
      vmax = std::max(vmax, val.cwiseAbs().maxCoeff());
      if (i == 0 || j == 0 || i == n - 1 || j == n - 1) bmax = std::max(bmax, val.cwiseAbs().maxCoeff());
    }
  if (bmax > boundary_tol * std::max(1.0, vmax))
    throw InvalidArgument("field does not vanish on the boundary (max |v| = " + std::to_string(bmax) + ")");

  // Axis derivatives of a grid function; axis 0 is x (index i).
  auto d1 = [&](const Matrix& f, int axis) {
    Matrix out = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const detail::Stencil s = detail::first_derivative(axis == 0 ? i : j, n);
        double acc = 0.0;
        for (std::size_t q = 0; q < s.w.size(); ++q)
          acc += s.w[q] * (axis == 0 ? f(s.start + q, j) : f(i, s.start + q));
        out(i, j) = acc / h;
      }
    return out;
  };
  auto d2 = [&](const Matrix& f, int axis) {
    Matrix out = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const detail::Stencil s = detail::second_derivative(axis == 0 ? i : j, n);
        double acc = 0.0;
        for (std::size_t q = 0; q < s.w.size(); ++q)
          acc += s.w[q] * (axis == 0 ? f(s.start + q, j) : f(i, s.start + q));
        out(i, j) = acc / (h * h);
      }
    return out;
  };

  // jac[a][b] = d v_a / d x_b, hess[a][b][c] = d^2 v_a / d x_b d x_c.
  std::array<std::array<Matrix, 2>, 2> jac;
  std::array<std::array<std::array<Matrix, 2>, 2>, 2> hess;
  if (field.analytic()) {
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) {
        jac[a][b] = Matrix(n, n);
        for (int c = 0; c < 2; ++c) hess[a][b][c] = Matrix(n, n);
      }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const Eigen::Matrix2d J = field.jacobian(coord(i), coord(j));
        const auto H = field.second(coord(i), coord(j));
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b) {
            jac[a][b](i, j) = J(a, b);
            for (int c = 0; c < 2; ++c) hess[a][b][c](i, j) = H[a](b, c);
          }
      }
  } else {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) jac[a][b] = d1(v[a], b);
      hess[a][0][0] = d2(v[a], 0);
      hess[a][1][1] = d2(v[a], 1);
      hess[a][0][1] = hess[a][1][0] = d1(jac[a][0], 1);
    }
  }

  IdentityCheck out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double w = detail::trapezoid(i, n) * detail::trapezoid(j, n) * h * h;
      double sym = 0.0, sq = 0.0, op = 0.0;
      for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
          const double s = jac[a][b](i, j) + jac[b][a](i, j);
          sym += s * s;
        }
        sq += v[a](i, j) * v[a](i, j);
        // (Laplacian v)_a + (grad div v)_a
        const double lap = hess[a][0][0](i, j) + hess[a][1][1](i, j);
        const double graddiv = hess[0][0][a](i, j) + hess[1][1][a](i, j);
        op += (eta * v[a](i, j) - lap - graddiv) * v[a](i, j);
      }
      out.lhs += w * (0.5 * sym + eta * sq);
      out.rhs += w * op;
    }
  const double scale = std::max(std::abs(out.lhs), std::abs(out.rhs));
  out.rel_err = scale == 0.0 ? 0.0 : std::abs(out.lhs - out.rhs) / scale;
  return out;
}

}  // namespace rda::eval
