#pragma once

// Procedural shape families with exact signed-distance oracles, supervision
// sampling, a sphere-traced depth renderer and rectangular occlusion.

#include "dif/meshing.hpp"
#include "dif/rotation.hpp"
#include "dif/samples.hpp"

#include <json.hpp>

#include <optional>

namespace dif {

enum class NodeKind { Sphere, Box, Cylinder, Capsule, Union, Intersection };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Sphere: return "sphere";
    case NodeKind::Box: return "box";
    case NodeKind::Cylinder: return "cylinder";
    case NodeKind::Capsule: return "capsule";
    case NodeKind::Union: return "union";
    case NodeKind::Intersection: return "intersection";
  }
  return "?";
}

inline NodeKind node_kind_from_string(const std::string& s) {
  for (auto k : {NodeKind::Sphere, NodeKind::Box, NodeKind::Cylinder, NodeKind::Capsule, NodeKind::Union,
                 NodeKind::Intersection})
    if (s == to_string(k)) return k;
  throw DataError("unknown shape node kind '" + s + "'");
}

/// One node of a primitive tree. Leaves are evaluated in the node's local
/// frame x_local = (x - offset) / scale; distances are multiplied back by
/// scale, which keeps them exact under uniform scaling.
///
///   sphere    center, radius
///   box       center, size = half extents, radius = edge rounding
///   cylinder  center, radius, size[0] = half height, axis
///   capsule   center = end a, end_b, radius
struct ShapeNode {
  NodeKind kind = NodeKind::Sphere;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Zero();
  Vec3 end_b = Vec3::Zero();
  double radius = 0.0;
  int axis = 1;
  double scale = 1.0;
  Vec3 offset = Vec3::Zero();
  std::vector<ShapeNode> children;

  static ShapeNode sphere(const Vec3& c, double r) {
    ShapeNode n;
    n.kind = NodeKind::Sphere;
    n.center = c;
    n.radius = r;
    return n;
  }
  static ShapeNode box(const Vec3& c, const Vec3& half, double rounding = 0.0) {
    ShapeNode n;
    n.kind = NodeKind::Box;
    n.center = c;
    n.size = half;
    n.radius = rounding;
    return n;
  }
  static ShapeNode cylinder(const Vec3& c, double r, double half_height, int axis) {
    ShapeNode n;
    n.kind = NodeKind::Cylinder;
    n.center = c;
    n.radius = r;
    n.size = Vec3(half_height, 0, 0);
    n.axis = axis;
    return n;
  }
  static ShapeNode capsule(const Vec3& a, const Vec3& b, double r) {
    ShapeNode n;
    n.kind = NodeKind::Capsule;
    n.center = a;
    n.end_b = b;
    n.radius = r;
    return n;
  }
  static ShapeNode join(std::vector<ShapeNode> kids, NodeKind k = NodeKind::Union) {
    ShapeNode n;
    n.kind = k;
    n.children = std::move(kids);
    return n;
  }
};

struct AnalyticShape {
  std::string category;
  ShapeNode root;
};

struct Aabb {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());
  void grow(const Aabb& o) {
    lo = lo.cwiseMin(o.lo);
    hi = hi.cwiseMax(o.hi);
  }
};

/// Distance, unit gradient and the margin by which the active branch of
/// every min/max on the evaluation path won.
struct SdfSample {
  double d = 0.0;
  Vec3 grad = Vec3::UnitX();
  double gap = std::numeric_limits<double>::infinity();
};

namespace detail {

inline double sgn(double v) { return v < 0.0 ? -1.0 : 1.0; }

inline SdfSample leaf_sdf(const ShapeNode& n, const Vec3& x) {
  SdfSample s;
  switch (n.kind) {
    case NodeKind::Sphere: {
      const Vec3 p = x - n.center;
      const double r = p.norm();
      s.d = r - n.radius;
      s.grad = r > 0 ? Vec3(p / r) : Vec3::UnitX();
      break;
    }
    case NodeKind::Box: {
      const Vec3 p = x - n.center;
      const Vec3 q = p.cwiseAbs() - (n.size - Vec3::Constant(n.radius));
      const Vec3 qp = q.cwiseMax(0.0);
      Eigen::Index k;
      const double qmax = q.maxCoeff(&k);
      s.d = qp.norm() + std::min(qmax, 0.0) - n.radius;
      if (qmax > 0.0) {
        const Vec3 w = qp / qp.norm();
        s.grad = Vec3(sgn(p.x()) * w.x(), sgn(p.y()) * w.y(), sgn(p.z()) * w.z());
      } else {
        s.grad = Vec3::Zero();
        s.grad[k] = sgn(p[k]);
      }
      break;
    }
    case NodeKind::Cylinder: {
      const Vec3 p = x - n.center;
      const int a = n.axis;
      Vec3 radial = p;
      radial[a] = 0.0;
      const double rho = radial.norm();
      Vec3 u;
      if (rho > 0) {
        u = radial / rho;
      } else {
        u = Vec3::Zero();
        u[(a + 1) % 3] = 1.0;
      }
      Vec3 axial = Vec3::Zero();
      axial[a] = sgn(p[a]);
      const double dr = rho - n.radius, dh = std::abs(p[a]) - n.size[0];
      const double mr = std::max(dr, 0.0), mh = std::max(dh, 0.0);
      const double outside = std::hypot(mr, mh);
      s.d = std::min(std::max(dr, dh), 0.0) + outside;
      if (outside > 0)
        s.grad = (mr * u + mh * axial) / outside;
      else
        s.grad = dr > dh ? u : axial;
      break;
    }
    case NodeKind::Capsule: {
      const Vec3 ab = n.end_b - n.center;
      const double len2 = ab.squaredNorm();
      const double h = len2 > 0 ? std::clamp((x - n.center).dot(ab) / len2, 0.0, 1.0) : 0.0;
      const Vec3 p = x - (n.center + h * ab);
      const double r = p.norm();
      s.d = r - n.radius;
      s.grad = r > 0 ? Vec3(p / r) : Vec3::UnitX();
      break;
    }
    default: throw StructuralError("leaf_sdf called on a combinator node");
  }
  return s;
}

inline SdfSample node_sdf(const ShapeNode& n, const Vec3& x) {
  const Vec3 xl = (x - n.offset) / n.scale;
  SdfSample s;
  if (n.kind == NodeKind::Union || n.kind == NodeKind::Intersection) {
    if (n.children.empty()) throw StructuralError("combinator node without children");
    const bool is_union = n.kind == NodeKind::Union;
    double runner_up = std::numeric_limits<double>::infinity();
    bool first = true;
    for (const auto& c : n.children) {
      const SdfSample cs = node_sdf(c, xl);
      const double key = is_union ? cs.d : -cs.d;
      const double best = is_union ? s.d : -s.d;
      if (first || key < best) {
        if (!first) runner_up = best;
        s = cs;
        first = false;
      } else {
        runner_up = std::min(runner_up, key);
      }
    }
    const double best = is_union ? s.d : -s.d;
    s.gap = std::min(s.gap, runner_up - best);
  } else {
    s = leaf_sdf(n, xl);
  }
  s.d *= n.scale;
  s.gap *= n.scale;
  return s;
}

inline Aabb node_bounds(const ShapeNode& n) {
  Aabb b;
  switch (n.kind) {
    case NodeKind::Sphere:
      b.lo = n.center.array() - n.radius;
      b.hi = n.center.array() + n.radius;
      break;
    case NodeKind::Box:
      b.lo = n.center - n.size;
      b.hi = n.center + n.size;
      break;
    case NodeKind::Cylinder: {
      Vec3 e = Vec3::Constant(n.radius);
      e[n.axis] = n.size[0];
      b.lo = n.center - e;
      b.hi = n.center + e;
      break;
    }
    case NodeKind::Capsule:
      b.lo = n.center.cwiseMin(n.end_b).array() - n.radius;
      b.hi = n.center.cwiseMax(n.end_b).array() + n.radius;
      break;
    case NodeKind::Union:
      for (const auto& c : n.children) b.grow(node_bounds(c));
      break;
    case NodeKind::Intersection: {
      bool first = true;
      for (const auto& c : n.children) {
        const Aabb cb = node_bounds(c);
        if (first) b = cb;
        b.lo = b.lo.cwiseMax(cb.lo);
        b.hi = b.hi.cwiseMin(cb.hi);
        first = false;
      }
      break;
    }
  }
  b.lo = n.offset + n.scale * b.lo;
  b.hi = n.offset + n.scale * b.hi;
  return b;
}

}  // namespace detail

inline SdfSample analytic_sdf_grad(const AnalyticShape& shape, const Vec3& x) {
  return detail::node_sdf(shape.root, x);
}

inline double analytic_sdf(const AnalyticShape& shape, const Vec3& x) { return detail::node_sdf(shape.root, x).d; }

inline Aabb bounds(const AnalyticShape& shape) { return detail::node_bounds(shape.root); }

// --- JSON -----------------------------------------------------------------

inline nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

inline Vec3 json_vec(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline nlohmann::json to_json(const ShapeNode& n) {
  nlohmann::json j;
  j["kind"] = to_string(n.kind);
  switch (n.kind) {
    case NodeKind::Sphere:
      j["center"] = vec_json(n.center);
      j["radius"] = n.radius;
      break;
    case NodeKind::Box:
      j["center"] = vec_json(n.center);
      j["half_extents"] = vec_json(n.size);
      j["rounding"] = n.radius;
      break;
    case NodeKind::Cylinder:
      j["center"] = vec_json(n.center);
      j["radius"] = n.radius;
      j["half_height"] = n.size[0];
      j["axis"] = n.axis;
      break;
    case NodeKind::Capsule:
      j["a"] = vec_json(n.center);
      j["b"] = vec_json(n.end_b);
      j["radius"] = n.radius;
      break;
    default:
      j["children"] = nlohmann::json::array();
      for (const auto& c : n.children) j["children"].push_back(to_json(c));
  }
  if (n.scale != 1.0) j["scale"] = n.scale;
  if (!n.offset.isZero(0.0)) j["offset"] = vec_json(n.offset);
  return j;
}

inline ShapeNode node_from_json(const nlohmann::json& j) {
  try {
    ShapeNode n;
    n.kind = node_kind_from_string(j.at("kind").get<std::string>());
    switch (n.kind) {
      case NodeKind::Sphere:
        n.center = json_vec(j.at("center"));
        n.radius = j.at("radius").get<double>();
        break;
      case NodeKind::Box:
        n.center = json_vec(j.at("center"));
        n.size = json_vec(j.at("half_extents"));
        n.radius = j.value("rounding", 0.0);
        break;
      case NodeKind::Cylinder:
        n.center = json_vec(j.at("center"));
        n.radius = j.at("radius").get<double>();
        n.size[0] = j.at("half_height").get<double>();
        n.axis = j.at("axis").get<int>();
        if (n.axis < 0 || n.axis > 2) throw DataError("cylinder axis must be 0, 1 or 2");
        break;
      case NodeKind::Capsule:
        n.center = json_vec(j.at("a"));
        n.end_b = json_vec(j.at("b"));
        n.radius = j.at("radius").get<double>();
        break;
      default:
        for (const auto& c : j.at("children")) n.children.push_back(node_from_json(c));
        if (n.children.empty()) throw DataError("combinator node without children");
    }
    n.scale = j.value("scale", 1.0);
    if (!(n.scale > 0)) throw DataError("node scale must be positive");
    if (j.contains("offset")) n.offset = json_vec(j["offset"]);
    return n;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed shape JSON: ") + e.what());
  }
}

inline nlohmann::json to_json(const AnalyticShape& s) { return {{"category", s.category}, {"root", to_json(s.root)}}; }

inline AnalyticShape shape_from_json(const nlohmann::json& j) {
  AnalyticShape s;
  try {
    s.category = j.at("category").get<std::string>();
    s.root = node_from_json(j.at("root"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed shape JSON: ") + e.what());
  }
  return s;
}

// --- families ---------------------------------------------------------------

inline const std::vector<std::string>& known_categories() {
  static const std::vector<std::string> cats{"sphere", "car", "plane", "chair"};
  return cats;
}

namespace detail {

// Centres the bounding box at the origin and scales the largest half extent to `target`.
inline void normalize_to_cube(AnalyticShape& s, double target) {
  const Aabb b = node_bounds(s.root);
  const Vec3 c = 0.5 * (b.lo + b.hi);
  const double half = 0.5 * (b.hi - b.lo).maxCoeff();
  const double k = target / half;
  s.root.scale *= k;
  s.root.offset = k * (s.root.offset - c);
}

inline AnalyticShape make_car(std::mt19937_64& rng) {
  // y up, x forward
  const double bx = uniform(rng, 0.6, 0.85), by = uniform(rng, 0.13, 0.2), bz = uniform(rng, 0.28, 0.42);
  const double round = uniform(rng, 0.04, 0.09);
  const double wr = uniform(rng, 0.11, 0.16), ww = uniform(rng, 0.04, 0.07);
  const double cx = uniform(rng, 0.3, 0.55) * bx, cy = uniform(rng, 0.1, 0.16), cz = bz * uniform(rng, 0.75, 0.95);
  const double cshift = uniform(rng, -0.25, 0.1) * bx;
  std::vector<ShapeNode> parts;
  parts.push_back(ShapeNode::box(Vec3(0, 0, 0), Vec3(bx, by, bz), round));
  parts.push_back(ShapeNode::box(Vec3(cshift, by + cy - 0.02, 0), Vec3(cx, cy, cz), std::min(round, 0.6 * cy)));
  const double wx = bx * uniform(rng, 0.55, 0.7);
  for (double sx : {-1.0, 1.0})
    for (double sz : {-1.0, 1.0})
      parts.push_back(ShapeNode::cylinder(Vec3(sx * wx, -by, sz * (bz - 0.5 * ww + 0.02)), wr, ww, 2));
  return {"car", ShapeNode::join(std::move(parts))};
}

inline AnalyticShape make_plane(std::mt19937_64& rng) {
  // fuselage along x, wings along z
  const double len = uniform(rng, 0.65, 0.85), fr = uniform(rng, 0.07, 0.11);
  const double span = uniform(rng, 0.6, 0.9), chord = uniform(rng, 0.1, 0.18), thick = uniform(rng, 0.03, 0.04);
  const double wing_x = uniform(rng, -0.15, 0.15);
  const double tail_span = uniform(rng, 0.18, 0.3), fin_h = uniform(rng, 0.12, 0.2);
  std::vector<ShapeNode> parts;
  parts.push_back(ShapeNode::capsule(Vec3(-len, 0, 0), Vec3(len, 0, 0), fr));
  parts.push_back(ShapeNode::box(Vec3(wing_x, 0, 0), Vec3(chord, thick, span), 0.5 * thick));
  parts.push_back(ShapeNode::box(Vec3(-len + 0.06, 0, 0), Vec3(0.07, thick, tail_span), 0.5 * thick));
  parts.push_back(ShapeNode::box(Vec3(-len + 0.07, fr + 0.5 * fin_h, 0), Vec3(0.08, 0.5 * fin_h + 0.03, thick), 0.5 * thick));
  return {"plane", ShapeNode::join(std::move(parts))};
}

inline AnalyticShape make_chair(std::mt19937_64& rng) {
  const double sx = uniform(rng, 0.32, 0.45), sz = uniform(rng, 0.32, 0.45), st = uniform(rng, 0.035, 0.06);
  const double leg = uniform(rng, 0.035, 0.055), leg_h = uniform(rng, 0.3, 0.45);
  const double back_h = uniform(rng, 0.3, 0.5), back_t = uniform(rng, 0.035, 0.05);
  const bool arms = uniform01(rng) < 0.5;
  std::vector<ShapeNode> parts;
  parts.push_back(ShapeNode::box(Vec3(0, 0, 0), Vec3(sx, st, sz)));
  for (double px : {-1.0, 1.0})
    for (double pz : {-1.0, 1.0})
      parts.push_back(
          ShapeNode::box(Vec3(px * (sx - leg), -st - leg_h + 0.01, pz * (sz - leg)), Vec3(leg, leg_h, leg)));
  parts.push_back(ShapeNode::box(Vec3(0, st + back_h - 0.01, -sz + back_t), Vec3(sx, back_h, back_t)));
  if (arms) {
    const double ah = uniform(rng, 0.12, 0.2), at = uniform(rng, 0.03, 0.045);
    for (double px : {-1.0, 1.0}) {
      parts.push_back(ShapeNode::box(Vec3(px * (sx - at), st + 2 * ah, 0.05 * sz), Vec3(at, at, 0.9 * sz)));
      parts.push_back(ShapeNode::box(Vec3(px * (sx - at), st + ah, 0.8 * sz), Vec3(at, ah, at)));
    }
  }
  return {"chair", ShapeNode::join(std::move(parts))};
}

}  // namespace detail

/// `count` shapes of a category, deterministic per seed. Spheres keep their
/// radius in [0.3, 0.6]; composite categories are centred and scaled so the
/// largest half extent is 0.9.
inline std::vector<AnalyticShape> make_family(const std::string& category, int count, std::uint64_t seed) {
  if (count <= 0) throw StructuralError("family size must be positive");
  std::vector<AnalyticShape> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    auto rng = make_rng(seed, "family:" + category, static_cast<std::uint64_t>(i));
    AnalyticShape s;
    if (category == "sphere") {
      s = {"sphere", ShapeNode::sphere(Vec3::Zero(), uniform(rng, 0.3, 0.6))};
    } else if (category == "car") {
      s = detail::make_car(rng);
    } else if (category == "plane") {
      s = detail::make_plane(rng);
    } else if (category == "chair") {
      s = detail::make_chair(rng);
    } else {
      throw StructuralError("unknown category '" + category + "' (expected sphere, car, plane or chair)");
    }
    if (category != "sphere") detail::normalize_to_cube(s, 0.9);
    out.push_back(std::move(s));
  }
  return out;
}

// --- supervision sampling -------------------------------------------------------

struct SamplingOptions {
  int mesh_resolution = 128;
  double surface_tol = 1e-7;
  double uniqueness_tol = 1e-4;
  int max_rounds = 50;
};

/// Projects x onto the zero level set along the oracle gradient. Returns
/// nullopt when it does not converge or lands where the min/max of the
/// primitive tree is not attained uniquely.
inline std::optional<SdfSample> project_to_surface(const AnalyticShape& shape, Vec3& x, const SamplingOptions& opt) {
  for (int it = 0; it < 30; ++it) {
    const SdfSample s = analytic_sdf_grad(shape, x);
    if (std::abs(s.d) < opt.surface_tol) {
      if (s.gap < opt.uniqueness_tol) return std::nullopt;
      return s;
    }
    x -= s.d * s.grad;
  }
  return std::nullopt;
}

/// Surface points (with oracle normals) and uniform free-space points in
/// [-1,1]^3 with oracle distances. Surface candidates come from area-weighted
/// samples of a marching-cubes mesh of the oracle, projected onto the exact
/// level set.
inline ShapeSampleSet sample_shape(const AnalyticShape& shape, int n_surface, int n_free, std::uint64_t seed,
                                   const SamplingOptions& opt = {}) {
  if (n_surface <= 0 || n_free <= 0) throw StructuralError("sample counts must be positive");
  ShapeSampleSet out;
  out.surface_points.resize(3, n_surface);
  out.surface_normals.resize(3, n_surface);
  out.free_points.resize(3, n_free);
  out.free_sdf.resize(n_free);

  const TriangleMesh mesh = marching_cubes([&](const Vec3& x) { return analytic_sdf(shape, x); }, opt.mesh_resolution);
  if (mesh.empty()) throw DataError("shape '" + shape.category + "' has no surface inside [-1,1]^3");
  int have = 0, tried = 0;
  for (int round = 0; round < opt.max_rounds && have < n_surface; ++round) {
    const std::size_t want = static_cast<std::size_t>(n_surface - have) + 16;
    const PointCloud cand = sample_mesh_surface(mesh, want, fnv1a("surface") ^ (seed + 0x9e3779b97f4a7c15ull * round));
    for (Vec3 x : cand.points) {
      ++tried;
      if (auto s = project_to_surface(shape, x, opt)) {
        if ((x.array().abs() > 1.0).any()) continue;
        out.surface_points.col(have) = x;
        out.surface_normals.col(have) = s->grad.normalized();
        if (++have == n_surface) break;
      }
    }
  }
  if (have < n_surface)
    throw DataError("surface sampling for '" + shape.category + "' accepted only " + std::to_string(have) + " of " +
                    std::to_string(tried) + " candidates (needed " + std::to_string(n_surface) + ")");

  auto rng = make_rng(seed, "free-space");
  for (int i = 0; i < n_free; ++i) {
    const Vec3 x = uniform_in_cube(rng);
    out.free_points.col(i) = x;
    out.free_sdf[i] = analytic_sdf(shape, x);
  }
  return out;
}

// --- depth images ----------------------------------------------------------------

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  /// Square image with the given horizontal field of view; the principal
  /// point is the image centre in pixel-index coordinates.
  static Intrinsics from_fov(int width, int height, double fov_deg) {
    const double f = 0.5 * width / std::tan(0.5 * deg2rad(fov_deg));
    return {f, f, 0.5 * (width - 1), 0.5 * (height - 1)};
  }
};

struct Camera {
  Pose pose;  // camera-from-canonical
  Intrinsics k;
  int width = 64, height = 64;
};

/// Camera at `eye` looking at `target`; x right, y down, z forward.
inline Pose look_at(const Vec3& eye, const Vec3& target, Vec3 up = Vec3::UnitY()) {
  const Vec3 f = (target - eye).normalized();
  if (f.cross(up).norm() < 1e-6) up = Vec3::UnitZ();
  const Vec3 r = f.cross(up).normalized();
  const Vec3 d = f.cross(r);
  Mat3 rot;
  rot.row(0) = r;
  rot.row(1) = d;
  rot.row(2) = f;
  return Pose::from_rt(rot, -(rot * eye));
}

/// Random viewpoint on the upper hemisphere (elevation 10..60 degrees).
inline Pose sample_hemisphere_camera(std::mt19937_64& rng, double distance) {
  const double az = uniform(rng, 0.0, 2.0 * 3.14159265358979323846);
  const double el = deg2rad(uniform(rng, 10.0, 60.0));
  const Vec3 eye = distance * Vec3(std::cos(el) * std::cos(az), std::sin(el), std::cos(el) * std::sin(az));
  return look_at(eye, Vec3::Zero());
}

struct DepthImage {
  int width = 0, height = 0;
  std::vector<float> depth;  // row-major, 0 = invalid
  std::vector<std::uint8_t> mask;
  Intrinsics k;
  Pose pose;  // camera-from-canonical

  std::size_t index(int u, int v) const { return static_cast<std::size_t>(v) * width + u; }
  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
  }

  void validate() const {
    if (width <= 0 || height <= 0) throw StructuralError("depth image must have positive size");
    const auto n = static_cast<std::size_t>(width) * height;
    if (depth.size() != n || mask.size() != n) throw StructuralError("depth/mask size does not match the image size");
    if (!(k.fx > 0 && k.fy > 0)) throw StructuralError("focal lengths must be positive");
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i] && !(depth[i] > 0)) throw StructuralError("masked pixel " + std::to_string(i) + " has no depth");
  }
};

struct TraceOptions {
  double relaxation = 0.9;
  int max_steps = 256;
  double hit_threshold = 1e-4;
};

/// Sphere-traced depth (camera z of the first hit). `noise_sigma` adds
/// Gaussian noise to valid pixels.
inline DepthImage render_depth(const AnalyticShape& shape, const Camera& cam, double noise_sigma = 0.0,
                               std::uint64_t seed = 0, const TraceOptions& opt = {}) {
  if (cam.width <= 0 || cam.height <= 0) throw StructuralError("image size must be positive");
  if (!(cam.k.fx > 0 && cam.k.fy > 0)) throw StructuralError("focal lengths must be positive");
  const Aabb b = bounds(shape);
  const Vec3 bc = 0.5 * (b.lo + b.hi);
  const double br = 0.5 * (b.hi - b.lo).norm() + 1e-6;
  const Mat3 r = cam.pose.rotation();
  const Vec3 eye = -(r.transpose() * cam.pose.translation);
  if ((eye - bc).norm() <= br) throw StructuralError("camera lies inside the shape's bounding sphere");

  DepthImage img;
  img.width = cam.width;
  img.height = cam.height;
  img.k = cam.k;
  img.pose = cam.pose;
  img.depth.assign(static_cast<std::size_t>(cam.width) * cam.height, 0.0f);
  img.mask.assign(img.depth.size(), 0);
  auto rng = make_rng(seed, "depth-noise");
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      const Vec3 dc = Vec3((u - cam.k.cx) / cam.k.fx, (v - cam.k.cy) / cam.k.fy, 1.0).normalized();
      const Vec3 dir = r.transpose() * dc;
      // Enter the bounding sphere.
      const Vec3 oc = eye - bc;
      const double bq = oc.dot(dir), cq = oc.squaredNorm() - br * br;
      const double disc = bq * bq - cq;
      const double noise = noise_sigma > 0 ? noise_sigma * gaussian(rng) : 0.0;
      if (disc < 0) continue;
      double t = std::max(0.0, -bq - std::sqrt(disc));
      const double t_exit = -bq + std::sqrt(disc);
      bool hit = false;
      for (int step = 0; step < opt.max_steps && t <= t_exit; ++step) {
        const double d = analytic_sdf(shape, eye + t * dir);
        if (d < opt.hit_threshold) {
          hit = true;
          break;
        }
        t += opt.relaxation * d;
      }
      if (!hit) continue;
      // Newton refinement along the ray; grazing hits stop short by up to threshold / cos.
      for (int it = 0; it < 4; ++it) {
        const SdfSample s = analytic_sdf_grad(shape, eye + t * dir);
        const double slope = s.grad.dot(dir);
        if (std::abs(s.d) < 1e-12 || slope > -0.05) break;
        t -= s.d / slope;
      }
      const double z = t * dc.z() + noise;
      if (z <= 0) continue;
      img.depth[img.index(u, v)] = static_cast<float>(z);
      img.mask[img.index(u, v)] = 1;
    }
  return img;
}

struct OcclusionRect {
  int u0 = 0, v0 = 0, u1 = 0, v1 = 0;  // half-open
  std::size_t removed = 0;
};

namespace detail {

// Rectangle removal without range checks on the ratio (ratio 0 leaves the image untouched).
inline std::pair<DepthImage, OcclusionRect> occlude_unchecked(const DepthImage& img, double ratio,
                                                              std::uint64_t seed) {
  DepthImage out = img;
  OcclusionRect rect;
  const std::size_t total = img.valid_count();
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  if (target == 0) return {out, rect};
  const int w = img.width, h = img.height;
  // Summed-area table over the mask.
  std::vector<std::int64_t> sat(static_cast<std::size_t>(w + 1) * (h + 1), 0);
  auto at = [&](int u, int v) -> std::int64_t& { return sat[static_cast<std::size_t>(v) * (w + 1) + u]; };
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) at(u + 1, v + 1) = img.mask[img.index(u, v)] + at(u, v + 1) + at(u + 1, v) - at(u, v);
  auto count = [&](int u0, int v0, int u1, int v1) { return at(u1, v1) - at(u0, v1) - at(u1, v0) + at(u0, v0); };

  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < img.mask.size(); ++i)
    if (img.mask[i]) valid.push_back(i);
  auto rng = make_rng(seed, "occlusion");
  const double tol = 0.02 * static_cast<double>(target);
  OcclusionRect best;
  double best_err = std::numeric_limits<double>::infinity();
  for (int attempt = 0; attempt < 64; ++attempt) {
    // Centre on a random object pixel with a random aspect ratio.
    const std::size_t c = valid[uniform_index(rng, valid.size())];
    const int cu = static_cast<int>(c % static_cast<std::size_t>(w)), cv = static_cast<int>(c / static_cast<std::size_t>(w));
    const double aspect = std::exp(uniform(rng, std::log(0.5), std::log(2.0)));
    auto rect_at = [&](int half_v) {
      const int half_u = std::max(0, static_cast<int>(std::lround(half_v * aspect)));
      OcclusionRect r{std::max(0, cu - half_u), std::max(0, cv - half_v), std::min(w, cu + half_u + 1),
                      std::min(h, cv + half_v + 1), 0};
      r.removed = static_cast<std::size_t>(count(r.u0, r.v0, r.u1, r.v1));
      return r;
    };
    // Smallest half height whose rectangle reaches the target.
    int lo = 0, hi = std::max(w, h);
    if (rect_at(hi).removed < target) continue;
    while (lo < hi) {
      const int mid = (lo + hi) / 2;
      if (rect_at(mid).removed >= target) hi = mid;
      else lo = mid + 1;
    }
    OcclusionRect r = rect_at(lo);
    // Trim single rows/columns off each side to approach the target.
    for (bool improved = true; improved;) {
      improved = false;
      const double err = std::abs(static_cast<double>(r.removed) - static_cast<double>(target));
      for (int side = 0; side < 4; ++side) {
        OcclusionRect t = r;
        if (side == 0) ++t.u0;
        if (side == 1) --t.u1;
        if (side == 2) ++t.v0;
        if (side == 3) --t.v1;
        if (t.u0 >= t.u1 || t.v0 >= t.v1) continue;
        t.removed = static_cast<std::size_t>(count(t.u0, t.v0, t.u1, t.v1));
        if (std::abs(static_cast<double>(t.removed) - static_cast<double>(target)) < err) {
          r = t;
          improved = true;
          break;
        }
      }
    }
    const double err = std::abs(static_cast<double>(r.removed) - static_cast<double>(target));
    if (err < best_err) {
      best = r;
      best_err = err;
    }
    if (best_err <= tol) break;
  }
  if (best_err > tol)
    throw DataError("no rectangle covers " + std::to_string(target) + " of " + std::to_string(total) +
                    " object pixels within 2%");
  for (int v = best.v0; v < best.v1; ++v)
    for (int u = best.u0; u < best.u1; ++u) {
      out.mask[out.index(u, v)] = 0;
      out.depth[out.index(u, v)] = 0.0f;
    }
  return {out, best};
}

}  // namespace detail

/// Invalidates an axis-aligned rectangle covering `ratio` of the object
/// pixels (within 2% of the target count).
inline std::pair<DepthImage, OcclusionRect> occlude_with_rect(const DepthImage& img, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.05 && ratio <= 0.85)) throw StructuralError("occlusion ratio must lie in [0.05, 0.85]");
  img.validate();
  if (img.valid_count() == 0) throw DataError("cannot occlude an image without object pixels");
  return detail::occlude_unchecked(img, ratio, seed);
}

inline DepthImage occlude(const DepthImage& img, double ratio, std::uint64_t seed) {
  return occlude_with_rect(img, ratio, seed).first;
}

// --- PFM + sidecar ------------------------------------------------------------------

/// Run lengths of alternating 0/1 pixels in row-major order, starting with 0.
inline std::vector<std::size_t> mask_rle(const std::vector<std::uint8_t>& mask) {
  std::vector<std::size_t> runs;
  std::uint8_t cur = 0;
  std::size_t len = 0;
  for (auto m : mask) {
    const std::uint8_t b = m ? 1 : 0;
    if (b != cur) {
      runs.push_back(len);
      cur = b;
      len = 0;
    }
    ++len;
  }
  runs.push_back(len);
  return runs;
}

inline std::vector<std::uint8_t> mask_from_rle(const std::vector<std::size_t>& runs, std::size_t n) {
  std::vector<std::uint8_t> mask;
  mask.reserve(n);
  std::uint8_t cur = 0;
  for (auto r : runs) {
    if (mask.size() + r > n) throw DataError("mask run lengths exceed the image size");
    mask.insert(mask.end(), r, cur);
    cur ^= 1;
  }
  if (mask.size() != n) throw DataError("mask run lengths do not cover the image");
  return mask;
}

inline nlohmann::json pose_json(const Pose& p) {
  const Mat3 r = p.rotation();
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < 3; ++i) rows.push_back(vec_json(r.row(i).transpose()));
  return {{"rotation", rows}, {"translation", vec_json(p.translation)}};
}

inline Pose json_pose(const nlohmann::json& j) {
  Mat3 r;
  for (int i = 0; i < 3; ++i) r.row(i) = json_vec(j.at("rotation").at(i)).transpose();
  return Pose::from_rt(r, json_vec(j.at("translation")));
}

/// Writes `<stem>.pfm` and `<stem>.json`.
inline void save_depth(const std::filesystem::path& stem, const DepthImage& img) {
  img.validate();
  auto pfm = stem;
  pfm += ".pfm";
  {
    std::ofstream os(pfm, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + pfm.string() + "' for writing");
    os << "Pf\n" << img.width << ' ' << img.height << "\n-1.0\n";
    // PFM stores rows bottom to top.
    for (int v = img.height - 1; v >= 0; --v)
      os.write(reinterpret_cast<const char*>(img.depth.data() + img.index(0, v)),
               static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(img.width)));
    if (!os) throw DataError("write to '" + pfm.string() + "' failed");
  }
  nlohmann::json side = {{"width", img.width},
                         {"height", img.height},
                         {"intrinsics", {{"fx", img.k.fx}, {"fy", img.k.fy}, {"cx", img.k.cx}, {"cy", img.k.cy}}},
                         {"camera_from_canonical", pose_json(img.pose)},
                         {"mask_rle", mask_rle(img.mask)}};
  auto js = stem;
  js += ".json";
  std::ofstream os(js, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + js.string() + "' for writing");
  os << side.dump(2) << '\n';
}

inline DepthImage load_depth(const std::filesystem::path& stem) {
  auto js = stem;
  js += ".json";
  auto pfm = stem;
  pfm += ".pfm";
  std::ifstream jis(js);
  if (!jis) throw DataError("cannot open '" + js.string() + "'");
  DepthImage img;
  try {
    const auto side = nlohmann::json::parse(jis);
    img.width = side.at("width").get<int>();
    img.height = side.at("height").get<int>();
    const auto& k = side.at("intrinsics");
    img.k = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(), k.at("cy").get<double>()};
    img.pose = json_pose(side.at("camera_from_canonical"));
    img.mask = mask_from_rle(side.at("mask_rle").get<std::vector<std::size_t>>(),
                             static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(js.string() + ": " + e.what());
  }
  std::ifstream is(pfm, std::ios::binary);
  if (!is) throw DataError("cannot open '" + pfm.string() + "'");
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  is >> magic >> w >> h >> scale;
  is.get();
  if (magic != "Pf") throw DataError(pfm.string() + ": expected a single-channel PFM");
  if (w != img.width || h != img.height) throw DataError(pfm.string() + ": size disagrees with the sidecar");
  if (scale >= 0) throw DataError(pfm.string() + ": big-endian PFM is not supported");
  img.depth.resize(static_cast<std::size_t>(w) * h);
  for (int v = h - 1; v >= 0; --v)
    is.read(reinterpret_cast<char*>(img.depth.data() + img.index(0, v)),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(w)));
  if (!is) throw DataError(pfm.string() + ": truncated pixel data");
  img.validate();
  return img;
}

}  // namespace dif
