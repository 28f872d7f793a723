#pragma once

#include "rda/common.hpp"
#include "rda/geometry/mesh.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <vector>

namespace rda::geometry {

/// The shape domain [-1,1]^dim.
struct Domain {
  int dim = 2;

  explicit Domain(int d = 2) : dim(d) {
    if (d != 2 && d != 3) throw InvalidArgument("domain dimension must be 2 or 3");
  }
  double volume() const { return std::pow(2.0, dim); }
  bool contains(const Eigen::Ref<const Vector>& x) const {
    return x.size() == dim && x.cwiseAbs().maxCoeff() <= 1.0;
  }
};

enum class ShapeKind { sphere, box };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::sphere;
  Vector center;
  /// Sphere: radius in the first entry. Box: half edge lengths.
  Vector extents;
  Matrix rotation;

  int dim() const { return static_cast<int>(center.size()); }

  static ShapeSpec sphere(const Vector& center, double radius) {
    ShapeSpec s;
    s.kind = ShapeKind::sphere;
    s.center = center;
    s.extents = Vector::Constant(center.size(), radius);
    s.rotation = Matrix::Identity(center.size(), center.size());
    return s;
  }

  static ShapeSpec box(const Vector& center, const Vector& half_edges, const Matrix& rotation) {
    ShapeSpec s;
    s.kind = ShapeKind::box;
    s.center = center;
    s.extents = half_edges;
    s.rotation = rotation;
    return s;
  }
};

/// Sign convention of signed distances. The library default is positive
/// inside the shape; the flag exists for exchanging data with tools that use
/// the opposite convention.
inline std::atomic<bool>& outside_positive_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline void set_outside_positive(bool on) { outside_positive_flag().store(on); }

/// Corners of a box in world coordinates, 2^dim rows.
inline Matrix box_corners(const ShapeSpec& spec) {
  const int d = spec.dim();
  const int count = 1 << d;
  Matrix corners(count, d);
  for (int c = 0; c < count; ++c) {
    Vector local(d);
    for (int a = 0; a < d; ++a) local[a] = ((c >> a) & 1) ? spec.extents[a] : -spec.extents[a];
    corners.row(c) = (spec.center + spec.rotation * local).transpose();
  }
  return corners;
}

/// Throws if the spec is malformed or not strictly inside the domain.
inline void validate(const ShapeSpec& spec) {
  const int d = spec.dim();
  if (d != 2 && d != 3) throw InvalidArgument("shape dimension must be 2 or 3");
  if (spec.extents.size() != d || spec.rotation.rows() != d || spec.rotation.cols() != d)
    throw InvalidArgument("shape spec has inconsistent sizes");
  if ((spec.extents.array() <= 0.0).any()) throw InvalidArgument("shape extents must be positive");
  const Matrix gram = spec.rotation.transpose() * spec.rotation;
  if ((gram - Matrix::Identity(d, d)).norm() >= 1e-10 || spec.rotation.determinant() <= 0.0)
    throw InvalidArgument("shape rotation is not a proper rotation");
  if (spec.kind == ShapeKind::sphere) {
    const double r = spec.extents[0];
    if ((spec.center.array().abs() + r).maxCoeff() >= 1.0)
      throw InvalidArgument("sphere is not contained in the domain");
  } else if (box_corners(spec).cwiseAbs().maxCoeff() >= 1.0) {
    throw InvalidArgument("box is not contained in the domain");
  }
}

/// Signed distance, positive inside and negative outside (unless the global
/// convention flag is set). Exact for spheres and rotated boxes.
inline double sdf_primitive(const ShapeSpec& spec, const Eigen::Ref<const Vector>& x) {
  double inside_positive = 0.0;
  if (spec.kind == ShapeKind::sphere) {
    inside_positive = spec.extents[0] - (x - spec.center).norm();
  } else {
    const Vector q = spec.rotation.transpose() * (x - spec.center);
    const Vector d = q.cwiseAbs() - spec.extents;
    const double outside = d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
    inside_positive = -outside;
  }
  return outside_positive_flag().load() ? -inside_positive : inside_positive;
}

/// 1 inside, 0 outside, 0.5 on the surface.
inline double occupancy_primitive(const ShapeSpec& spec, const Eigen::Ref<const Vector>& x) {
  double s = sdf_primitive(spec, x);
  if (outside_positive_flag().load()) s = -s;
  if (std::abs(s) <= 1e-12) return 0.5;
  return s > 0.0 ? 1.0 : 0.0;
}

/// Uniform rotation: uniform angle in 2D, uniform unit quaternion in 3D.
inline Matrix random_rotation(int dim, Rng& rng) {
  if (dim == 2) {
    const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    Matrix r(2, 2);
    r << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
    return r;
  }
  Eigen::Vector4d q;
  do {
    for (int i = 0; i < 4; ++i) q[i] = gaussian(rng);
  } while (q.norm() < 1e-12);
  q.normalize();
  const Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
  return quat.toRotationMatrix();
}

/// Watertight, outward-wound surface mesh of a box. Each edge is split into
/// `subdivisions` segments so that vertex perturbations act on the whole
/// surface and not just on the corners.
inline ShapeMesh box_mesh(const ShapeSpec& spec, int subdivisions = 16) {
  if (spec.kind != ShapeKind::box) throw InvalidArgument("box_mesh requires a box spec");
  if (subdivisions < 1) throw InvalidArgument("subdivisions must be >= 1");
  const int d = spec.dim();
  const int s = subdivisions;
  ShapeMesh mesh;
  mesh.dim = d;
  auto to_world = [&](const Vector& unit) {
    Vector local = unit.cwiseProduct(spec.extents);
    return Vector(spec.center + spec.rotation * local);
  };

  if (d == 2) {
    const double corners[4][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
    mesh.vertices.resize(4 * s, 2);
    int v = 0;
    for (int c = 0; c < 4; ++c) {
      const auto& a = corners[c];
      const auto& b = corners[(c + 1) % 4];
      for (int i = 0; i < s; ++i) {
        const double t = static_cast<double>(i) / s;
        Vector unit(2);
        unit << a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]);
        mesh.vertices.row(v++) = to_world(unit).transpose();
      }
    }
    for (int i = 0; i < 4 * s; ++i) mesh.faces.push_back({i, (i + 1) % (4 * s), 0});
    return mesh;
  }

  // Lattice points with at least one coordinate on the boundary of [0,s]^3.
  std::vector<int> index((s + 1) * (s + 1) * (s + 1), -1);
  auto key = [s](int i, int j, int k) { return (i * (s + 1) + j) * (s + 1) + k; };
  std::vector<Vector> verts;
  auto vertex = [&](int i, int j, int k) {
    int& slot = index[key(i, j, k)];
    if (slot < 0) {
      Vector unit(3);
      unit << -1.0 + 2.0 * i / s, -1.0 + 2.0 * j / s, -1.0 + 2.0 * k / s;
      slot = static_cast<int>(verts.size());
      verts.push_back(to_world(unit));
    }
    return slot;
  };
  for (int axis = 0; axis < 3; ++axis) {
    for (int side = 0; side < 2; ++side) {
      // (u, v) chosen so that u x v = +axis; swapped on the negative side.
      int u = (axis + 1) % 3;
      int w = (axis + 2) % 3;
      if (side == 0) std::swap(u, w);
      for (int a = 0; a < s; ++a) {
        for (int b = 0; b < s; ++b) {
          auto at = [&](int da, int db) {
            int c[3];
            c[axis] = side == 0 ? 0 : s;
            c[u] = a + da;
            c[w] = b + db;
            return vertex(c[0], c[1], c[2]);
          };
          const int p00 = at(0, 0), p10 = at(1, 0), p11 = at(1, 1), p01 = at(0, 1);
          mesh.faces.push_back({p00, p10, p11});
          mesh.faces.push_back({p00, p11, p01});
        }
      }
    }
  }
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].transpose();
  return mesh;
}

/// Points on the faces of a box, allocated to faces in proportion to their
/// area (systematic allocation) and uniform within each face. Normals follow
/// the gradient of the inside-positive distance, i.e. they point inward.
inline SurfaceSample sample_box_surface(const ShapeSpec& spec, int n, Rng& rng, int shape_id = 0) {
  if (n < 1) throw InvalidArgument("sample count must be >= 1");
  const int d = spec.dim();
  std::vector<double> areas;
  for (int axis = 0; axis < d; ++axis) {
    double area = 1.0;
    for (int b = 0; b < d; ++b)
      if (b != axis) area *= 2.0 * spec.extents[b];
    areas.push_back(area);
    areas.push_back(area);
  }
  const std::vector<int> face_of = systematic_allocation(areas, n, rng);
  SurfaceSample out;
  out.shape_id = shape_id;
  out.points.resize(n, d);
  out.normals.resize(n, d);
  for (int i = 0; i < n; ++i) {
    const int face = face_of[i];
    const int axis = face / 2;
    const double sign = (face % 2 == 0) ? -1.0 : 1.0;
    Vector q(d);
    for (int b = 0; b < d; ++b) q[b] = uniform(rng, -spec.extents[b], spec.extents[b]);
    q[axis] = sign * spec.extents[axis];
    Vector normal_local = Vector::Zero(d);
    normal_local[axis] = -sign;
    out.points.row(i) = (spec.center + spec.rotation * q).transpose();
    out.normals.row(i) = (spec.rotation * normal_local).transpose();
  }
  return out;
}

struct DatasetEntry {
  ShapeSpec spec;
  SurfaceSample sample;
};

/// Random rotated boxes with full edge lengths uniform in [0.15, 0.85],
/// centred at the origin. A pure function of its arguments.
inline std::vector<DatasetEntry> generate_box_dataset(int count, int dim, std::uint64_t seed,
                                                      int points_per_shape = 4096) {
  if (count < 1) throw InvalidArgument("count must be >= 1");
  if (dim != 2 && dim != 3) throw InvalidArgument("dim must be 2 or 3");
  std::vector<DatasetEntry> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng({seed, tag(Stream::dataset), static_cast<std::uint64_t>(i)});
    ShapeSpec spec;
    for (;;) {
      Vector half(dim);
      for (int a = 0; a < dim; ++a) half[a] = 0.5 * uniform(rng, 0.15, 0.85);
      spec = ShapeSpec::box(Vector::Zero(dim), half, random_rotation(dim, rng));
      if (box_corners(spec).cwiseAbs().maxCoeff() < 1.0) break;
    }
    Rng srng = make_rng({seed, tag(Stream::surface), static_cast<std::uint64_t>(i)});
    out.push_back({spec, sample_box_surface(spec, points_per_shape, srng, i)});
  }
  return out;
}

}  // namespace rda::geometry
