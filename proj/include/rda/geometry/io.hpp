#pragma once

#include "rda/common.hpp"
#include "rda/geometry/marching.hpp"
#include "rda/geometry/mesh.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

namespace rda::geometry {

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << std::setprecision(17);
  return out;
}

inline std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return in;
}

}  // namespace detail

/// ASCII OBJ. 3D meshes use `v x y z` and `f a b c`; 2D polylines use
/// `v x y 0` and `l a b`. Indices are 1-based.
inline void write_obj(const ShapeMesh& mesh, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  for (Eigen::Index i = 0; i < mesh.vertices.rows(); ++i) {
    out << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' '
        << (mesh.dim == 3 ? mesh.vertices(i, 2) : 0.0) << '\n';
  }
  for (const auto& f : mesh.faces) {
    if (mesh.dim == 2)
      out << "l " << f[0] + 1 << ' ' << f[1] + 1 << '\n';
    else
      out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

/// Reads OBJ files written by write_obj. A file with `l` records is 2D.
inline ShapeMesh read_obj(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::vector<Eigen::Vector3d> verts;
  ShapeMesh mesh;
  bool lines = false, tris = false;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "v") {
      Eigen::Vector3d v;
      if (!(ls >> v[0] >> v[1] >> v[2])) throw FormatError("bad vertex record in " + path.string());
      verts.push_back(v);
    } else if (kind == "l") {
      int a, b;
      if (!(ls >> a >> b)) throw FormatError("bad line record in " + path.string());
      mesh.faces.push_back({a - 1, b - 1, 0});
      lines = true;
    } else if (kind == "f") {
      std::array<int, 3> f{};
      for (int& idx : f) {
        std::string tok;
        if (!(ls >> tok)) throw FormatError("bad face record in " + path.string());
        idx = std::stoi(tok.substr(0, tok.find('/'))) - 1;
      }
      mesh.faces.push_back(f);
      tris = true;
    }
  }
  if (lines && tris) throw FormatError("mixed line and face records in " + path.string());
  mesh.dim = lines ? 2 : 3;
  mesh.vertices.resize(static_cast<Eigen::Index>(verts.size()), mesh.dim);
  for (std::size_t i = 0; i < verts.size(); ++i)
    mesh.vertices.row(static_cast<Eigen::Index>(i)) = verts[i].head(mesh.dim).transpose();
  validate(mesh);
  return mesh;
}

/// Whitespace separated `x y [z] nx ny [nz]`, one point per line.
inline void write_points(const SurfaceSample& s, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  for (Eigen::Index i = 0; i < s.points.rows(); ++i) {
    for (int a = 0; a < s.dim(); ++a) out << s.points(i, a) << ' ';
    for (int a = 0; a < s.dim(); ++a) out << s.normals(i, a) << (a + 1 == s.dim() ? '\n' : ' ');
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline SurfaceSample read_points(const std::filesystem::path& path, int dim, int shape_id = 0) {
  auto in = detail::open_in(path);
  std::vector<double> values;
  double v;
  while (in >> v) values.push_back(v);
  if (!in.eof()) throw FormatError("non-numeric token in " + path.string());
  const std::size_t width = 2 * static_cast<std::size_t>(dim);
  if (values.empty() || values.size() % width != 0) throw FormatError("point file has wrong column count: " + path.string());
  const Eigen::Index n = static_cast<Eigen::Index>(values.size() / width);
  SurfaceSample s;
  s.shape_id = shape_id;
  s.points.resize(n, dim);
  s.normals.resize(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int a = 0; a < dim; ++a) {
      s.points(i, a) = values[i * width + a];
      s.normals(i, a) = values[i * width + dim + a];
    }
  return s;
}

/// Header line `dims: r1 r2 [r3]` followed by raw little-endian doubles.
inline void write_grid(const ScalarGrid& grid, const std::filesystem::path& path) {
  grid.check();
  auto out = detail::open_out(path, std::ios::out | std::ios::binary);
  out << "dims:";
  for (int a = 0; a < grid.dim; ++a) out << ' ' << grid.resolution[a];
  out << '\n';
  static_assert(std::endian::native == std::endian::little, "grid files assume a little-endian host");
  out.write(reinterpret_cast<const char*>(grid.values.data()),
            static_cast<std::streamsize>(grid.values.size() * sizeof(double)));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline ScalarGrid read_grid(const std::filesystem::path& path) {
  auto in = detail::open_in(path, std::ios::in | std::ios::binary);
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string label;
  hs >> label;
  if (label != "dims:") throw FormatError("grid file lacks 'dims:' header: " + path.string());
  std::vector<int> dims;
  int r;
  while (hs >> r) dims.push_back(r);
  if (dims.size() != 2 && dims.size() != 3) throw FormatError("grid file must have 2 or 3 dims");
  ScalarGrid grid(static_cast<int>(dims.size()), {dims[0], dims[1], dims.size() == 3 ? dims[2] : 1});
  in.read(reinterpret_cast<char*>(grid.values.data()), static_cast<std::streamsize>(grid.values.size() * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(grid.values.size() * sizeof(double)))
    throw FormatError("grid file truncated: " + path.string());
  return grid;
}

}  // namespace rda::geometry
