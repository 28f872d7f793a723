#pragma once

#include "rda/common.hpp"
#include "rda/geometry/mc_tables.hpp"
#include "rda/geometry/mesh.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

namespace rda::geometry {

/// Samples of a scalar field on the regular node grid of [-1,1]^dim.
/// Values are row-major with axis 0 slowest.
struct ScalarGrid {
  int dim = 2;
  std::array<int, 3> resolution{0, 0, 1};
  std::vector<double> values;

  ScalarGrid() = default;
  ScalarGrid(int d, std::array<int, 3> res) : dim(d), resolution(res) {
    if (d != 2 && d != 3) throw InvalidArgument("grid dimension must be 2 or 3");
    if (d == 2) resolution[2] = 1;
    for (int a = 0; a < d; ++a)
      if (resolution[a] < 2) throw InvalidArgument("grid resolution must be >= 2 per axis");
    values.assign(node_count(), 0.0);
  }

  static ScalarGrid cube(int d, int res) { return ScalarGrid(d, {res, res, d == 3 ? res : 1}); }

  std::size_t node_count() const {
    std::size_t n = 1;
    for (int a = 0; a < dim; ++a) n *= static_cast<std::size_t>(resolution[a]);
    return n;
  }
  double spacing(int axis) const { return 2.0 / (resolution[axis] - 1); }
  std::size_t index(int i, int j, int k = 0) const {
    return (static_cast<std::size_t>(i) * resolution[1] + j) * resolution[2] + k;
  }
  double coordinate(int axis, int i) const { return -1.0 + spacing(axis) * i; }

  /// All node coordinates in storage order, one per row.
  Matrix nodes() const {
    Matrix out(static_cast<Eigen::Index>(node_count()), dim);
    Eigen::Index r = 0;
    for (int i = 0; i < resolution[0]; ++i)
      for (int j = 0; j < resolution[1]; ++j)
        for (int k = 0; k < resolution[2]; ++k) {
          out(r, 0) = coordinate(0, i);
          out(r, 1) = coordinate(1, j);
          if (dim == 3) out(r, 2) = coordinate(2, k);
          ++r;
        }
    return out;
  }

  void check() const {
    if (dim != 2 && dim != 3) throw InvalidArgument("grid dimension must be 2 or 3");
    for (int a = 0; a < dim; ++a)
      if (resolution[a] < 2) throw InvalidArgument("grid resolution must be >= 2 per axis");
    if (values.size() != node_count()) throw InvalidArgument("grid value count does not match resolution");
  }
};

/// Fill a grid by evaluating `f` on all nodes at once (one point per row).
inline ScalarGrid sample_grid(int dim, int res, const std::function<Vector(const Matrix&)>& f) {
  ScalarGrid grid = ScalarGrid::cube(dim, res);
  const Vector v = f(grid.nodes());
  grid.values.assign(v.data(), v.data() + v.size());
  return grid;
}

namespace detail {

/// One vertex per crossed grid edge, shared by all cells touching that edge.
/// The interpolation always runs from the lower to the higher node index so
/// that a vertex is bitwise identical no matter which cell created it.
class EdgeVertices {
 public:
  EdgeVertices(const ScalarGrid& g, double level) : grid_(g), level_(level) {}

  int vertex(std::size_t a, std::size_t b) {
    if (a > b) std::swap(a, b);
    const std::uint64_t key = static_cast<std::uint64_t>(a) * grid_.node_count() + b;
    auto it = map_.find(key);
    if (it != map_.end()) return it->second;
    const double va = grid_.values[a];
    const double vb = grid_.values[b];
    const double t = (level_ - va) / (vb - va);
    const Vector pa = position(a), pb = position(b);
    points_.push_back(pa + t * (pb - pa));
    const int id = static_cast<int>(points_.size()) - 1;
    map_.emplace(key, id);
    return id;
  }

  Matrix take() const {
    Matrix out(static_cast<Eigen::Index>(points_.size()), grid_.dim);
    for (std::size_t i = 0; i < points_.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = points_[i].transpose();
    return out;
  }

 private:
  Vector position(std::size_t node) const {
    const int r1 = grid_.resolution[1], r2 = grid_.resolution[2];
    const int k = static_cast<int>(node % r2);
    const int j = static_cast<int>((node / r2) % r1);
    const int i = static_cast<int>(node / (static_cast<std::size_t>(r1) * r2));
    Vector p(grid_.dim);
    p[0] = grid_.coordinate(0, i);
    p[1] = grid_.coordinate(1, j);
    if (grid_.dim == 3) p[2] = grid_.coordinate(2, k);
    return p;
  }

  const ScalarGrid& grid_;
  double level_;
  std::unordered_map<std::uint64_t, int> map_;
  std::vector<Vector> points_;
};

inline void drop_degenerate(ShapeMesh& mesh) {
  std::vector<std::array<int, 3>> kept;
  kept.reserve(mesh.faces.size());
  for (const auto& f : mesh.faces)
    if (face_measure(mesh, f) >= 1e-12) kept.push_back(f);
  mesh.faces = std::move(kept);
}

inline ShapeMesh march_squares(const ScalarGrid& g, double level) {
  struct Pending {
    std::size_t face;
    Eigen::Vector2d witness;
    bool witness_inside;
  };
  static constexpr int kCorner[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};

  ShapeMesh mesh;
  mesh.dim = 2;
  EdgeVertices edges(g, level);
  std::vector<Pending> pending;
  for (int i = 0; i + 1 < g.resolution[0]; ++i) {
    for (int j = 0; j + 1 < g.resolution[1]; ++j) {
      std::array<std::size_t, 4> id{};
      std::array<Eigen::Vector2d, 4> p;
      std::array<bool, 4> inside{};
      int mask = 0;
      for (int c = 0; c < 4; ++c) {
        const int ci = i + kCorner[c][0], cj = j + kCorner[c][1];
        id[c] = g.index(ci, cj);
        p[c] = Eigen::Vector2d(g.coordinate(0, ci), g.coordinate(1, cj));
        inside[c] = g.values[id[c]] > level;
        mask |= inside[c] ? (1 << c) : 0;
      }
      if (mask == 0 || mask == 15) continue;
      // Edge e joins corners e and e+1.
      auto emit = [&](int ea, int eb, const Eigen::Vector2d& witness, bool witness_inside) {
        const int a = edges.vertex(id[ea], id[(ea + 1) % 4]);
        const int b = edges.vertex(id[eb], id[(eb + 1) % 4]);
        mesh.faces.push_back({a, b, 0});
        pending.push_back({mesh.faces.size() - 1, witness, witness_inside});
      };
      std::array<int, 4> crossing{};
      int n_cross = 0;
      for (int e = 0; e < 4; ++e)
        if (inside[e] != inside[(e + 1) % 4]) crossing[n_cross++] = e;
      if (n_cross == 2) {
        int witness = 0;
        while (!inside[witness]) ++witness;
        emit(crossing[0], crossing[1], p[witness], true);
      } else {
        // Saddle: the cell centre decides which pair of corners is joined.
        double center = 0.0;
        for (int c = 0; c < 4; ++c) center += g.values[id[c]];
        const bool center_inside = 0.25 * center > level;
        // Corner c lies between edges c-1 and c; cut off the ones that
        // disagree with the centre.
        for (int c = 0; c < 4; ++c)
          if (inside[c] != center_inside) emit((c + 3) % 4, c, p[c], inside[c]);
      }
    }
  }
  mesh.vertices = edges.take();
  // Counter-clockwise around the inside: the inside lies left of a->b.
  for (const auto& pend : pending) {
    auto& f = mesh.faces[pend.face];
    const Eigen::Vector2d a = mesh.vertices.row(f[0]).transpose();
    const Eigen::Vector2d b = mesh.vertices.row(f[1]).transpose();
    const Eigen::Vector2d ab = b - a, aw = pend.witness - a;
    const double side = ab.x() * aw.y() - ab.y() * aw.x();
    if ((side > 0.0) != pend.witness_inside) std::swap(f[0], f[1]);
  }
  drop_degenerate(mesh);
  return mesh;
}

inline ShapeMesh march_cubes(const ScalarGrid& g, double level) {
  static constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                        {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  static constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                       {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
  ShapeMesh mesh;
  mesh.dim = 3;
  EdgeVertices edges(g, level);
  for (int i = 0; i + 1 < g.resolution[0]; ++i) {
    for (int j = 0; j + 1 < g.resolution[1]; ++j) {
      for (int k = 0; k + 1 < g.resolution[2]; ++k) {
        std::array<std::size_t, 8> id{};
        int cube = 0;
        for (int c = 0; c < 8; ++c) {
          id[c] = g.index(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2]);
          // Table convention: bit set for corners below the level (outside).
          if (!(g.values[id[c]] > level)) cube |= 1 << c;
        }
        const int* row = kTriTable[cube];
        for (int t = 0; row[t] != -1; t += 3) {
          std::array<int, 3> f{};
          for (int v = 0; v < 3; ++v) {
            const int e = row[t + v];
            f[v] = edges.vertex(id[kEdge[e][0]], id[kEdge[e][1]]);
          }
          // With set bits marking outside corners the table winding gives
          // outward-facing triangles.
          mesh.faces.push_back(f);
        }
      }
    }
  }
  mesh.vertices = edges.take();
  drop_degenerate(mesh);
  return mesh;
}

}  // namespace detail

/// Marching squares (2D) or marching cubes (3D) at `level`, treating values
/// above the level as inside. Vertices are linearly interpolated along grid
/// edges and shared between neighbouring cells. Returns an empty mesh when the
/// level is never crossed.
inline ShapeMesh marching_extract(const ScalarGrid& grid, double level) {
  grid.check();
  return grid.dim == 2 ? detail::march_squares(grid, level) : detail::march_cubes(grid, level);
}

}  // namespace rda::geometry
