#pragma once

// Marching-cubes extraction of the zero level set and area-weighted surface
// sampling of triangle meshes.

#include "dif/pointcloud.hpp"

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <unordered_map>

namespace dif {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;

  bool empty() const { return triangles.empty(); }

  double triangle_area(std::size_t t) const {
    const auto& f = triangles[t];
    return 0.5 * (vertices[f[1]] - vertices[f[0]]).cross(vertices[f[2]] - vertices[f[0]]).norm();
  }

  double area() const {
    double a = 0;
    for (std::size_t t = 0; t < triangles.size(); ++t) a += triangle_area(t);
    return a;
  }
};

namespace mc {

// Corner c of a cell sits at offset (c & 1, (c >> 1) & 1, (c >> 2) & 1).
inline constexpr std::array<std::array<int, 2>, 12> kEdgeCorners{{{0, 1}, {2, 3}, {4, 5}, {6, 7},   // along x
                                                                  {0, 2}, {1, 3}, {4, 6}, {5, 7},   // along y
                                                                  {0, 4}, {1, 5}, {2, 6}, {3, 7}}};  // along z

inline int edge_between(int a, int b) {
  for (int e = 0; e < 12; ++e)
    if ((kEdgeCorners[e][0] == a && kEdgeCorners[e][1] == b) || (kEdgeCorners[e][0] == b && kEdgeCorners[e][1] == a))
      return e;
  return -1;
}

/// Triangle table for all 256 corner configurations, generated from face
/// walks. Bit c of the case index is set when corner c is inside (value < 0).
/// On ambiguous faces the outside corners are kept apart, a rule that depends
/// only on the face, so neighbouring cells always agree.
struct CaseTable {
  std::array<std::vector<std::array<int, 3>>, 256> triangles;

  CaseTable() {
    // Faces as corner cycles, counter-clockwise seen from outside the cell.
    std::array<std::array<int, 4>, 6> faces{};
    int fi = 0;
    for (int axis = 0; axis < 3; ++axis) {
      for (int side = 0; side < 2; ++side) {
        std::vector<int> corners;
        for (int c = 0; c < 8; ++c)
          if (((c >> axis) & 1) == side) corners.push_back(c);
        const Vec3 normal = Vec3::Unit(axis) * (side ? 1.0 : -1.0);
        auto pos = [](int c) { return Vec3(c & 1, (c >> 1) & 1, (c >> 2) & 1); };
        Vec3 center = Vec3::Zero();
        for (int c : corners) center += pos(c) / 4.0;
        // Order by angle around the outward normal.
        const Vec3 u = (pos(corners[0]) - center).normalized();
        const Vec3 v = normal.cross(u);
        std::sort(corners.begin(), corners.end(), [&](int a, int b) {
          const Vec3 da = pos(a) - center, db = pos(b) - center;
          return std::atan2(da.dot(v), da.dot(u)) < std::atan2(db.dot(v), db.dot(u));
        });
        for (int k = 0; k < 4; ++k) faces[fi][k] = corners[k];
        ++fi;
      }
    }
    for (int cfg = 0; cfg < 256; ++cfg) {
      auto inside = [&](int c) { return ((cfg >> c) & 1) != 0; };
      std::array<int, 12> next;
      next.fill(-1);
      for (const auto& f : faces) {
        // Crossings in walk order: (edge, entering_outside).
        std::vector<std::pair<int, bool>> cross;
        for (int k = 0; k < 4; ++k) {
          const int a = f[k], b = f[(k + 1) % 4];
          if (inside(a) != inside(b)) cross.emplace_back(edge_between(a, b), inside(a));
        }
        for (std::size_t k = 0; k < cross.size(); ++k) {
          if (!cross[k].second) continue;
          // Segment from an inside->outside crossing to the following outside->inside one.
          const auto& to = cross[(k + 1) % cross.size()];
          next[cross[k].first] = to.first;
        }
      }
      std::array<bool, 12> used{};
      for (int e0 = 0; e0 < 12; ++e0) {
        if (next[e0] < 0 || used[e0]) continue;
        std::vector<int> loop;
        for (int e = e0; !used[e]; e = next[e]) {
          used[e] = true;
          loop.push_back(e);
        }
        for (std::size_t k = 1; k + 1 < loop.size(); ++k) triangles[cfg].push_back({loop[0], loop[k + 1], loop[k]});
      }
    }
  }
};

inline const CaseTable& case_table() {
  static const CaseTable table;
  return table;
}

}  // namespace mc

/// Batch field: writes values for the 3 x n points into out (size n).
using BatchField = std::function<void(const Eigen::Matrix3Xd&, Eigen::Ref<Eigen::RowVectorXd>)>;

struct GridBounds {
  Vec3 lo = Vec3::Constant(-1.0);
  Vec3 hi = Vec3::Constant(1.0);
};

/// Extracts the zero level set over `bounds` using `resolution` cells per
/// axis (cell size = extent / resolution). Vertices are linearly
/// interpolated along sign-changing edges; corners with value exactly 0
/// count as outside.
inline TriangleMesh marching_cubes_batch(const BatchField& field, int resolution, const GridBounds& bounds = {}) {
  if (resolution < 8) throw StructuralError("marching cubes resolution must be >= 8");
  const int n = resolution + 1;
  const Vec3 step = (bounds.hi - bounds.lo) / resolution;
  auto node = [&](int i, int j, int k) {
    return Vec3(bounds.lo.x() + step.x() * i, bounds.lo.y() + step.y() * j, bounds.lo.z() + step.z() * k);
  };
  const auto n2 = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
  std::vector<double> grid(n2 * static_cast<std::size_t>(n));
  Eigen::Matrix3Xd slab(3, static_cast<Eigen::Index>(n2));
  Eigen::RowVectorXd vals(static_cast<Eigen::Index>(n2));
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) slab.col(static_cast<Eigen::Index>(j) * n + i) = node(i, j, k);
    field(slab, vals);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const double v = vals[static_cast<Eigen::Index>(j) * n + i];
        if (!std::isfinite(v))
          throw NumericError("non-finite field value at grid (" + std::to_string(i) + ", " + std::to_string(j) + ", " +
                             std::to_string(k) + ")");
        grid[static_cast<std::size_t>(k) * n2 + static_cast<std::size_t>(j) * n + static_cast<std::size_t>(i)] = v;
      }
  }
  auto at = [&](int i, int j, int k) {
    return grid[static_cast<std::size_t>(k) * n2 + static_cast<std::size_t>(j) * n + static_cast<std::size_t>(i)];
  };

  TriangleMesh mesh;
  std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
  auto vertex_on_edge = [&](int i, int j, int k, int e) -> std::uint32_t {
    const int ca = mc::kEdgeCorners[e][0], cb = mc::kEdgeCorners[e][1];
    const int ai = i + (ca & 1), aj = j + ((ca >> 1) & 1), ak = k + ((ca >> 2) & 1);
    const int axis = e / 4;
    const std::uint64_t key =
        ((static_cast<std::uint64_t>(ak) * n + aj) * static_cast<std::uint64_t>(n) + ai) * 3 + axis;
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const int bi = i + (cb & 1), bj = j + ((cb >> 1) & 1), bk = k + ((cb >> 2) & 1);
    const double fa = at(ai, aj, ak), fb = at(bi, bj, bk);
    const double t = fa / (fa - fb);
    const Vec3 pa = node(ai, aj, ak), pb = node(bi, bj, bk);
    const auto idx = static_cast<std::uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(pa + t * (pb - pa));
    edge_vertex.emplace(key, idx);
    return idx;
  };

  const auto& table = mc::case_table();
  for (int k = 0; k < resolution; ++k)
    for (int j = 0; j < resolution; ++j)
      for (int i = 0; i < resolution; ++i) {
        int cfg = 0;
        for (int c = 0; c < 8; ++c)
          if (at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1)) < 0.0) cfg |= 1 << c;
        if (cfg == 0 || cfg == 255) continue;
        for (const auto& tri : table.triangles[static_cast<std::size_t>(cfg)])
          mesh.triangles.push_back(
              {vertex_on_edge(i, j, k, tri[0]), vertex_on_edge(i, j, k, tri[1]), vertex_on_edge(i, j, k, tri[2])});
      }

  // Weld vertices that coincide within 1e-7 cells (zero-valued corners), then
  // drop degenerate triangles.
  const double eps = 1e-7 * step.minCoeff();
  std::map<std::array<long long, 3>, std::uint32_t> welded;
  std::vector<std::uint32_t> remap(mesh.vertices.size());
  std::vector<Vec3> verts;
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
    const Vec3& p = mesh.vertices[v];
    const std::array<long long, 3> key{std::llround(p.x() / eps), std::llround(p.y() / eps), std::llround(p.z() / eps)};
    auto [it, inserted] = welded.emplace(key, static_cast<std::uint32_t>(verts.size()));
    if (inserted) verts.push_back(p);
    remap[v] = it->second;
  }
  std::vector<std::array<std::uint32_t, 3>> tris;
  for (auto t : mesh.triangles) {
    for (auto& idx : t) idx = remap[idx];
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) continue;
    const double area = 0.5 * (verts[t[1]] - verts[t[0]]).cross(verts[t[2]] - verts[t[0]]).norm();
    if (area > 1e-12) tris.push_back(t);
  }
  // Compact away vertices only referenced by dropped triangles.
  std::vector<std::int64_t> keep(verts.size(), -1);
  TriangleMesh out;
  for (auto& t : tris)
    for (auto& idx : t) {
      if (keep[idx] < 0) {
        keep[idx] = static_cast<std::int64_t>(out.vertices.size());
        out.vertices.push_back(verts[idx]);
      }
      idx = static_cast<std::uint32_t>(keep[idx]);
    }
  out.triangles = std::move(tris);
  return out;
}

/// Point-wise convenience overload.
inline TriangleMesh marching_cubes(const std::function<double(const Vec3&)>& field, int resolution,
                                   const GridBounds& bounds = {}) {
  return marching_cubes_batch(
      [&](const Eigen::Matrix3Xd& x, Eigen::Ref<Eigen::RowVectorXd> out) {
        for (Eigen::Index i = 0; i < x.cols(); ++i) out[i] = field(x.col(i));
      },
      resolution, bounds);
}

/// Area-weighted uniform samples on the mesh surface.
inline PointCloud sample_mesh_surface(const TriangleMesh& mesh, std::size_t n, std::uint64_t seed) {
  if (mesh.empty()) throw StructuralError("cannot sample an empty mesh");
  if (n == 0) throw StructuralError("sample count must be positive");
  std::vector<double> cdf(mesh.triangles.size());
  double acc = 0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) cdf[t] = acc += mesh.triangle_area(t);
  auto rng = make_rng(seed, "mesh-sample");
  PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double r = uniform01(rng) * acc;
    const auto t = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    const auto& f = mesh.triangles[std::min(t, cdf.size() - 1)];
    const double su = std::sqrt(uniform01(rng)), v = uniform01(rng);
    const double b0 = 1.0 - su, b1 = su * (1.0 - v), b2 = su * v;
    pc.points.push_back(b0 * mesh.vertices[f[0]] + b1 * mesh.vertices[f[1]] + b2 * mesh.vertices[f[2]]);
  }
  return pc;
}

inline void write_obj(const std::filesystem::path& path, const TriangleMesh& mesh) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    os << buf;
  }
  for (const auto& t : mesh.triangles) os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  if (!os) throw DataError("write to '" + path.string() + "' failed");
}

/// Reads v/f records (polygons are fan-triangulated; texture/normal indices ignored).
inline TriangleMesh read_obj(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  TriangleMesh m;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "v") {
      Vec3 v;
      ls >> v.x() >> v.y() >> v.z();
      m.vertices.push_back(v);
    } else if (kw == "f") {
      std::vector<std::uint32_t> idx;
      std::string tok;
      while (ls >> tok) {
        const long i = std::stol(tok.substr(0, tok.find('/')));
        const long resolved = i < 0 ? static_cast<long>(m.vertices.size()) + i : i - 1;
        if (resolved < 0 || resolved >= static_cast<long>(m.vertices.size()))
          throw DataError(path.string() + ": face index out of range");
        idx.push_back(static_cast<std::uint32_t>(resolved));
      }
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.triangles.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  return m;
}

/// Binary PLY with a vertex element readable by read_ply and a face list.
inline void write_mesh_ply(const std::filesystem::path& path, const TriangleMesh& mesh) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << "ply\nformat binary_little_endian 1.0\nelement vertex " << mesh.vertices.size()
     << "\nproperty float x\nproperty float y\nproperty float z\nelement face " << mesh.triangles.size()
     << "\nproperty list uchar int vertex_indices\nend_header\n";
  for (const auto& v : mesh.vertices) {
    const float f[3] = {static_cast<float>(v.x()), static_cast<float>(v.y()), static_cast<float>(v.z())};
    os.write(reinterpret_cast<const char*>(f), sizeof f);
  }
  for (const auto& t : mesh.triangles) {
    const unsigned char c = 3;
    const std::int32_t idx[3] = {static_cast<std::int32_t>(t[0]), static_cast<std::int32_t>(t[1]),
                                 static_cast<std::int32_t>(t[2])};
    os.write(reinterpret_cast<const char*>(&c), 1);
    os.write(reinterpret_cast<const char*>(idx), sizeof idx);
  }
}

}  // namespace dif
