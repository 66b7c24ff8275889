#pragma once

// Continuous 6D rotation parametrization and rigid poses built on it.

#include "dif/common.hpp"

#include <array>
#include <cmath>

namespace dif {

using Rot6d = std::array<double, 6>;

namespace detail {
// Exact power-of-two rescale so the largest entry lies in [0.5, 1). Scaling the
// input by any power of two then yields bit-identical Gram-Schmidt output.
inline Vec3 unit_exponent(Vec3 v) {
  const double m = v.cwiseAbs().maxCoeff();
  if (!(m > 0) || !std::isfinite(m)) return v;
  int e = 0;
  std::frexp(m, &e);
  for (int k = 0; k < 3; ++k) v[k] = std::ldexp(v[k], -e);
  return v;
}
}  // namespace detail

/// Gram-Schmidt of the two 3-vectors packed in r6; columns of the result are
/// (b1, b2, b1 x b2).
inline Mat3 rot6d_to_matrix(const Rot6d& r6) {
  const Vec3 a1 = detail::unit_exponent(Vec3(r6[0], r6[1], r6[2]));
  const Vec3 a2 = detail::unit_exponent(Vec3(r6[3], r6[4], r6[5]));
  const double n1 = a1.norm();
  if (!(n1 > 1e-9)) throw NumericError("rot6d: first vector is degenerate");
  const Vec3 b1 = a1 / n1;
  const Vec3 u = a2 - b1.dot(a2) * b1;
  const double n2 = u.norm();
  if (!(n2 > 1e-9)) throw NumericError("rot6d: second vector is parallel to the first");
  const Vec3 b2 = u / n2;
  Mat3 r;
  r.col(0) = b1;
  r.col(1) = b2;
  r.col(2) = b1.cross(b2);
  return r;
}

inline Rot6d matrix_to_rot6d(const Mat3& r) {
  return {r(0, 0), r(1, 0), r(2, 0), r(0, 1), r(1, 1), r(2, 1)};
}

/// Pulls dL/dR back to dL/d(r6) through the Gram-Schmidt map.
inline Rot6d rot6d_backward(const Rot6d& r6, const Mat3& rbar) {
  const Vec3 a1(r6[0], r6[1], r6[2]);
  const Vec3 a2(r6[3], r6[4], r6[5]);
  const double n1 = a1.norm();
  const Vec3 b1 = a1 / n1;
  const Vec3 u = a2 - b1.dot(a2) * b1;
  const double n2 = u.norm();
  const Vec3 b2 = u / n2;

  Vec3 b1bar = rbar.col(0);
  Vec3 b2bar = rbar.col(1);
  const Vec3 b3bar = rbar.col(2);
  b1bar += b2.cross(b3bar);
  b2bar += b3bar.cross(b1);

  const Vec3 ubar = (b2bar - b2 * b2.dot(b2bar)) / n2;
  const Vec3 a2bar = ubar - b1 * b1.dot(ubar);
  b1bar += -b1.dot(a2) * ubar - b1.dot(ubar) * a2;
  const Vec3 a1bar = (b1bar - b1 * b1.dot(b1bar)) / n1;
  return {a1bar[0], a1bar[1], a1bar[2], a2bar[0], a2bar[1], a2bar[2]};
}

/// Rigid transform x -> R x + t with R stored in 6D form.
struct Pose {
  Rot6d rot6d{1, 0, 0, 0, 1, 0};
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  static Pose from_rt(const Mat3& r, const Vec3& t) {
    Pose p;
    p.rot6d = matrix_to_rot6d(r);
    p.translation = t;
    return p;
  }

  static Pose from_isometry(const Eigen::Isometry3d& iso) { return from_rt(iso.linear(), iso.translation()); }

  Mat3 rotation() const { return rot6d_to_matrix(rot6d); }

  Eigen::Isometry3d isometry() const {
    Eigen::Isometry3d iso = Eigen::Isometry3d::Identity();
    iso.linear() = rotation();
    iso.translation() = translation;
    return iso;
  }

  Vec3 apply(const Vec3& x) const { return rotation() * x + translation; }

  Pose inverse() const {
    const Mat3 r = rotation();
    return from_rt(r.transpose(), -(r.transpose() * translation));
  }

  /// (*this) after `inner`: x -> this(inner(x)).
  Pose compose(const Pose& inner) const {
    const Mat3 r = rotation();
    return from_rt(r * inner.rotation(), r * inner.translation + translation);
  }

  bool is_valid(double tol = 1e-9) const {
    if (!translation.allFinite()) return false;
    for (double v : rot6d)
      if (!std::isfinite(v)) return false;
    const Mat3 r = rotation();
    return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::abs(r.determinant() - 1.0) < tol;
  }
};

inline Mat3 axis_angle(const Vec3& axis, double radians) {
  return Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
}

inline double deg2rad(double d) { return d * 3.14159265358979323846 / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / 3.14159265358979323846; }

}  // namespace dif
