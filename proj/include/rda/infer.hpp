#pragma once

// Inference with a trained model: latent codes for unseen shapes, template
// extraction, reconstructions and per-stage deformation trajectories.

#include "rda/geometry/io.hpp"
#include "rda/geometry/marching.hpp"
#include "rda/geometry/metrics.hpp"
#include "rda/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace rda::infer {

using geometry::ShapeMesh;
using geometry::SurfaceSample;
using network::Model;

struct EncodeConfig {
  int iterations = 800;
  double lr = 5e-2;
  int lr_drop_at = 400;
  double lr_drop_factor = 0.1;
  double gamma = 1e-4;
  double init_stddev = 0.1;
  int mc_points = 512;
  loss::Fidelity fidelity = loss::Fidelity::surface;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations < 1) throw InvalidArgument("encode iterations must be >= 1");
    if (!(lr > 0.0) || !(lr_drop_factor > 0.0)) throw InvalidArgument("encode learning rate must be positive");
    if (!(gamma >= 0.0) || !(init_stddev >= 0.0)) throw InvalidArgument("encode gamma and init stddev must be >= 0");
    if (mc_points < 1) throw InvalidArgument("encode mc_points must be >= 1");
  }
};

struct EncodeResult {
  Vector z;
  std::vector<double> history;  // fidelity + gamma |z|^2 per iteration, before the step
  double fidelity = 0.0;        // fidelity at the returned z over all sample points
};

/// Mean |I(x, z, 1)| over every point of the sample (no subsampling).
inline double reconstruction_fidelity(const Model& m, const Vector& z, const SurfaceSample& sample) {
  return loss::on_surface_values(m.tpl, m.vel, z, sample, 0.0).mean();
}

namespace detail {

inline loss::LossWeights fidelity_only() {
  loss::LossWeights w;
  w.sigma2 = w.tau = w.lambda = w.beta = w.c_pw = 0.0;
  return w;
}

}  // namespace detail

/// Fits a latent code to `sample` with every network parameter frozen.
/// Occupancy encoding needs `spec` to label its query points.
inline EncodeResult encode_shape(const Model& m, const SurfaceSample& sample, const EncodeConfig& c,
                                 const geometry::ShapeSpec* spec = nullptr) {
  c.validate();
  if (sample.size() == 0) throw InvalidArgument("cannot encode an empty sample");
  if (sample.dim() != m.vel.dim) throw InvalidArgument("sample dimension does not match the model");
  if (c.fidelity == loss::Fidelity::occupancy && spec == nullptr)
    throw InvalidArgument("occupancy encoding needs the shape specification");

  const loss::LossWeights w = detail::fidelity_only();
  Rng init = make_rng({c.seed, tag(Stream::encode), 0});
  EncodeResult r;
  r.z = Vector(m.vel.latent_dim);
  for (Eigen::Index i = 0; i < r.z.size(); ++i) r.z[i] = gaussian(init, c.init_stddev);

  network::Parameters zp;
  zp.tensors = {r.z.transpose()};
  train::AdamState adam = train::AdamState::for_params(zp);
  const bool subsample = sample.size() > c.mc_points;
  Matrix both(sample.size(), 2 * sample.dim());
  both << sample.points, sample.normals;
  r.history.reserve(c.iterations);

  for (int it = 0; it < c.iterations; ++it) {
    Rng rng = make_rng({c.seed, tag(Stream::encode), 1, static_cast<std::uint64_t>(it)});
    loss::ShapeInputs in;
    if (c.fidelity == loss::Fidelity::surface) {
      const Matrix pick = subsample ? geometry::subsample_rows(both, c.mc_points, rng) : both;
      in.surface_points = pick.leftCols(sample.dim());
      in.surface_normals = pick.rightCols(sample.dim());
    } else {
      train::balanced_occupancy(*spec, c.mc_points, rng, in.occ_points, in.occ_labels);
    }
    const Vector z = zp.tensors[0].row(0).transpose();
    const loss::ShapeGradient g =
        loss::shape_loss_gradient(m.tpl, m.vel, z, in, w, loss::Mode::riemannian, c.fidelity, 1.0, {false, false, true});
    const double value = g.terms.total + c.gamma * z.squaredNorm();
    if (!std::isfinite(value)) {
      const std::string bad = g.terms.first_non_finite();
      throw NonFiniteError("non-finite encoding loss at iteration " + std::to_string(it), bad.empty() ? "latent" : bad);
    }
    r.history.push_back(value);
    network::ParamGradient grad;
    grad.tensors = {(g.z + 2.0 * c.gamma * z).transpose()};
    const double lr = it >= c.lr_drop_at ? c.lr * c.lr_drop_factor : c.lr;
    adam.update(zp, grad, lr);
  }
  r.z = zp.tensors[0].row(0).transpose();
  r.fidelity = c.fidelity == loss::Fidelity::surface ? reconstruction_fidelity(m, r.z, sample) : r.history.back();
  return r;
}

// ---------------------------------------------------------------------------
// Meshes.

inline int default_resolution(int dim) { return dim == 2 ? 128 : 64; }

/// Template values (no gradients) on the node grid, evaluated in chunks.
inline geometry::ScalarGrid template_grid(const network::TemplateNet& tpl, int resolution) {
  constexpr Eigen::Index kChunk = 8192;
  return geometry::sample_grid(tpl.dim, resolution, [&](const Matrix& x) {
    Vector out(x.rows());
    for (Eigen::Index s = 0; s < x.rows(); s += kChunk) {
      const Eigen::Index n = std::min(kChunk, x.rows() - s);
      ad::Tape tape;
      const network::BoundParams p = network::bind(tape, tpl.params, false);
      const network::Jet f = network::template_forward(tpl, p, network::Jet{tape.constant(x.middleRows(s, n)), {}});
      out.segment(s, n) = f.value.value().col(0);
    }
    return out;
  });
}

/// Zero level set of the template.
inline ShapeMesh export_template(const Model& m, int resolution = 0) {
  if (resolution == 0) resolution = default_resolution(m.tpl.dim);
  const geometry::ScalarGrid g = template_grid(m.tpl, resolution);
  const auto [lo, hi] = std::minmax_element(g.values.begin(), g.values.end());
  if (!(*lo < 0.0 && *hi > 0.0)) throw Error("template level set is empty on the extraction grid");
  ShapeMesh mesh = geometry::marching_extract(g, 0.0);
  if (mesh.empty()) throw Error("template level set is empty on the extraction grid");
  return mesh;
}

/// Template vertices flowed through every reverse stage. positions[k] is the
/// mesh after k reverse steps; positions[K] is the reconstruction.
struct Trajectory {
  ShapeMesh tpl;
  flow::FlowTrajectory flow;
  /// speeds(i, k) = |v| of the field applied in reverse step k+1 at vertex i,
  /// evaluated where the vertex sits before that step.
  Matrix speeds;

  ShapeMesh stage_mesh(int k) const {
    ShapeMesh out = tpl;
    out.vertices = flow.positions.at(k);
    return out;
  }
};

inline Trajectory trajectory(const Model& m, const Vector& z, int resolution = 0) {
  Trajectory t;
  t.tpl = export_template(m, resolution);
  t.flow = flow::integrate_reverse(m.vel, t.tpl.vertices, z);
  const int K = m.vel.stages;
  t.speeds.resize(t.tpl.vertices.rows(), K);
  for (int j = 1; j <= K; ++j) {
    ad::Tape tape;
    const network::BoundParams p = network::bind(tape, m.vel.params, false);
    const network::Jet v = network::velocity_forward(m.vel, p, K - j, network::Jet{tape.constant(t.flow.positions[j - 1]), {}},
                                                     tape.constant(network::latent_row(m.vel, z)));
    t.speeds.col(j - 1) = v.value.value().rowwise().norm();
  }
  return t;
}

/// Inverse flow of the template mesh; vertex i is the image of template
/// vertex i.
inline ShapeMesh reconstruct(const Model& m, const Vector& z, int resolution = 0) {
  ShapeMesh mesh = export_template(m, resolution);
  mesh.vertices = flow::integrate_reverse(m.vel, mesh.vertices, z).end();
  return mesh;
}

/// Mean over vertices of the variance over stages of the speed: how much the
/// field seen by a vertex changes from stage to stage.
inline double stage_speed_variance(const Matrix& speeds) {
  if (speeds.rows() == 0 || speeds.cols() == 0) return 0.0;
  const Vector mean = speeds.rowwise().mean();
  return (speeds.colwise() - mean).array().square().rowwise().mean().mean();
}

/// Writes stage_<k>.obj for k = 0..K, manifest.csv (stage, time, file) and
/// speeds.csv (stage, vertex, speed) into `dir`.
inline void export_trajectory(const Trajectory& t, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto manifest = geometry::detail::open_out(dir / "manifest.csv");
  manifest << "stage,time,file\n";
  manifest.precision(17);
  for (std::size_t k = 0; k < t.flow.positions.size(); ++k) {
    const std::string name = "stage_" + std::to_string(k) + ".obj";
    geometry::write_obj(t.stage_mesh(static_cast<int>(k)), dir / name);
    manifest << k << ',' << t.flow.times[k] << ',' << name << '\n';
  }
  auto speeds = geometry::detail::open_out(dir / "speeds.csv");
  speeds << "stage,vertex,speed\n";
  speeds.precision(17);
  for (Eigen::Index k = 0; k < t.speeds.cols(); ++k)
    for (Eigen::Index i = 0; i < t.speeds.rows(); ++i) speeds << k + 1 << ',' << i << ',' << t.speeds(i, k) << '\n';
  if (!manifest || !speeds) throw Error("failed writing trajectory files in " + dir.string());
}

}  // namespace rda::infer
