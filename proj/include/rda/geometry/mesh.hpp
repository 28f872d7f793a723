#pragma once

#include "rda/common.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace rda::geometry {

/// Points on a shape with unit normals.
struct SurfaceSample {
  Matrix points;   // n x dim
  Matrix normals;  // n x dim, unit length
  int shape_id = 0;

  Eigen::Index size() const { return points.rows(); }
  int dim() const { return static_cast<int>(points.cols()); }
};

/// Triangle mesh (dim 3) or closed polyline (dim 2). In 2D only the first two
/// face indices are used. Faces are wound so that the geometric normal points
/// outward: counter-clockwise polylines, outward-facing triangles.
struct ShapeMesh {
  int dim = 2;
  Matrix vertices;  // m x dim
  std::vector<std::array<int, 3>> faces;

  bool empty() const { return faces.empty(); }
  int corners_per_face() const { return dim == 2 ? 2 : 3; }
};

/// Length (2D) or area (3D) of one face.
inline double face_measure(const ShapeMesh& mesh, const std::array<int, 3>& f) {
  if (mesh.dim == 2) return (mesh.vertices.row(f[1]) - mesh.vertices.row(f[0])).norm();
  const Eigen::Vector3d a = mesh.vertices.row(f[0]).transpose();
  const Eigen::Vector3d b = mesh.vertices.row(f[1]).transpose();
  const Eigen::Vector3d c = mesh.vertices.row(f[2]).transpose();
  return 0.5 * (b - a).cross(c - a).norm();
}

inline void validate(const ShapeMesh& mesh) {
  if (mesh.dim != 2 && mesh.dim != 3) throw InvalidArgument("mesh dimension must be 2 or 3");
  if (mesh.vertices.cols() != mesh.dim) throw InvalidArgument("mesh vertex width does not match dimension");
  const int m = static_cast<int>(mesh.vertices.rows());
  for (const auto& f : mesh.faces) {
    for (int c = 0; c < mesh.corners_per_face(); ++c)
      if (f[c] < 0 || f[c] >= m) throw InvalidArgument("mesh face index out of range");
    if (face_measure(mesh, f) < 1e-12) throw InvalidArgument("mesh has a degenerate face");
  }
}

/// Assign n samples to bins in proportion to `weights` using one uniform
/// offset (systematic sampling). Every bin gets floor or ceil of its share.
inline std::vector<int> systematic_allocation(const std::vector<double>& weights, int n, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) throw InvalidArgument("sampling weights must have positive sum");
  std::vector<int> out(n);
  const double step = total / n;
  double u = uniform(rng, 0.0, step);
  std::size_t bin = 0;
  double cumulative = weights[0];
  for (int i = 0; i < n; ++i) {
    while (u >= cumulative && bin + 1 < weights.size()) cumulative += weights[++bin];
    out[i] = static_cast<int>(bin);
    u += step;
  }
  return out;
}

/// Uniform surface sampling weighted by face length/area. Normals come from
/// face geometry and point inward for outward-wound meshes, matching the
/// gradient of an inside-positive signed distance.
inline SurfaceSample sample_surface(const ShapeMesh& mesh, int n, std::uint64_t seed, int shape_id = 0) {
  if (mesh.empty()) throw InvalidArgument("cannot sample an empty mesh");
  if (n < 1) throw InvalidArgument("sample count must be >= 1");
  std::vector<double> weights;
  weights.reserve(mesh.faces.size());
  for (const auto& f : mesh.faces) weights.push_back(face_measure(mesh, f));

  Rng rng = make_rng({seed, tag(Stream::surface)});
  const std::vector<int> face_of = systematic_allocation(weights, n, rng);
  const int d = mesh.dim;
  SurfaceSample out;
  out.shape_id = shape_id;
  out.points.resize(n, d);
  out.normals.resize(n, d);
  for (int i = 0; i < n; ++i) {
    const auto& f = mesh.faces[face_of[i]];
    if (d == 2) {
      const Eigen::Vector2d a = mesh.vertices.row(f[0]).transpose();
      const Eigen::Vector2d b = mesh.vertices.row(f[1]).transpose();
      const double t = uniform(rng, 0.0, 1.0);
      const Eigen::Vector2d dir = b - a;
      out.points.row(i) = (a + t * dir).transpose();
      out.normals.row(i) = Eigen::Vector2d(-dir.y(), dir.x()).normalized().transpose();
    } else {
      const Eigen::Vector3d a = mesh.vertices.row(f[0]).transpose();
      const Eigen::Vector3d b = mesh.vertices.row(f[1]).transpose();
      const Eigen::Vector3d c = mesh.vertices.row(f[2]).transpose();
      const double r1 = std::sqrt(uniform(rng, 0.0, 1.0));
      const double r2 = uniform(rng, 0.0, 1.0);
      const Eigen::Vector3d p = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c;
      out.points.row(i) = p.transpose();
      out.normals.row(i) = (-(b - a).cross(c - a)).normalized().transpose();
    }
  }
  return out;
}

/// I.i.d. zero-mean Gaussian noise on every vertex coordinate.
inline ShapeMesh add_vertex_noise(const ShapeMesh& mesh, double stddev, std::uint64_t seed) {
  if (stddev < 0.0) throw InvalidArgument("noise stddev must be non-negative");
  ShapeMesh out = mesh;
  if (stddev == 0.0) return out;
  Rng rng = make_rng({seed, tag(Stream::noise)});
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index i = 0; i < out.vertices.rows(); ++i)
    for (Eigen::Index j = 0; j < out.vertices.cols(); ++j) out.vertices(i, j) += normal(rng);
  return out;
}

}  // namespace rda::geometry
