#pragma once

// Chamfer distance, F-score and pose error, plus the evaluation report.

#include "dif/kdtree.hpp"
#include "dif/pointcloud.hpp"
#include "dif/rotation.hpp"

#include <json.hpp>

#include <iomanip>
#include <map>
#include <optional>

namespace dif {

namespace detail {

inline void require_nonempty(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw StructuralError("metrics need two non-empty point clouds");
}

/// Squared distance from each point of `from` to its nearest point in `to`.
inline std::vector<double> nn_dist2(const std::vector<Vec3>& from, const KdTree& to) {
  std::vector<double> d(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) d[i] = to.nearest(from[i]).dist2;
  return d;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Nearest-neighbour distances in both directions, reused by chamfer and fscore.
struct CloudDistances {
  std::vector<double> a_to_b, b_to_a;  // squared

  CloudDistances(const PointCloud& a, const PointCloud& b) {
    detail::require_nonempty(a, b);
    a_to_b = detail::nn_dist2(a.points, KdTree(b.points));
    b_to_a = detail::nn_dist2(b.points, KdTree(a.points));
  }

  double chamfer() const { return (detail::mean(a_to_b) + detail::mean(b_to_a)) * 1e4; }

  double fscore(double tau) const {
    if (!(tau > 0)) throw StructuralError("F-score threshold must be positive");
    const double t2 = tau * tau;
    auto frac = [&](const std::vector<double>& d) {
      std::size_t n = 0;
      for (double x : d)
        if (x < t2) ++n;
      return static_cast<double>(n) / static_cast<double>(d.size());
    };
    const double p = frac(a_to_b), r = frac(b_to_a);
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
};

/// Bidirectional mean squared nearest-neighbour distance, times 1e4.
inline double chamfer(const PointCloud& a, const PointCloud& b) { return CloudDistances(a, b).chamfer(); }

/// F1 of precision (prediction a) and recall (ground truth b) at distance < tau.
inline double fscore(const PointCloud& a, const PointCloud& b, double tau = 0.01) {
  return CloudDistances(a, b).fscore(tau);
}

/// Chamfer and F-score after a shared rescale that maps the canonical cube
/// (side `cube_side`) to unit side, so tau is a fraction of the cube side.
struct PairScore {
  double chamfer_x1e4 = 0, f1 = 0;
};

inline PairScore score_normalized(const PointCloud& pred, const PointCloud& gt, double tau = 0.01,
                                  double cube_side = 2.0) {
  if (!(cube_side > 0)) throw StructuralError("cube side must be positive");
  const double s = 1.0 / cube_side;
  PointCloud a = pred, b = gt;
  for (auto& p : a.points) p *= s;
  for (auto& p : b.points) p *= s;
  const CloudDistances d(a, b);
  return {d.chamfer(), d.fscore(tau)};
}

struct PoseError {
  double deg = 0;
  double trans = 0;
};

/// Geodesic angle between the rotations and Euclidean distance between the
/// translations. Pass object poses (camera-from-canonical) so the
/// translation term measures where the object centre lands.
inline PoseError pose_error(const Pose& est, const Pose& gt) {
  if (!est.is_valid(1e-6) || !gt.is_valid(1e-6)) throw StructuralError("pose_error needs valid poses");
  const Mat3 r = est.rotation().transpose() * gt.rotation();
  const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  // acos loses precision near 0; atan2 of the axis part is stable everywhere.
  const Vec3 w(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double angle = std::atan2(0.5 * w.norm(), c);
  return {rad2deg(angle), (est.translation - gt.translation).norm()};
}

// --- report -----------------------------------------------------------------------

struct ShapeRecord {
  std::string id;
  std::string category;
  double chamfer_x1e4 = 0;
  double f1 = 0;
  std::size_t pred_points = 0, gt_points = 0;
  std::optional<PoseError> pose;
};

struct EvalReport {
  double tau = 0.01;
  std::vector<ShapeRecord> shapes;

  static double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }

  struct Summary {
    std::size_t count = 0;
    double chamfer_mean = 0, f1_mean = 0, f1_median = 0;
    std::optional<double> pose_deg_median, pose_trans_median;
  };

  Summary summarize(const std::string& category = "") const {
    Summary s;
    std::vector<double> f1, deg, tr;
    for (const auto& r : shapes) {
      if (!category.empty() && r.category != category) continue;
      ++s.count;
      s.chamfer_mean += r.chamfer_x1e4;
      s.f1_mean += r.f1;
      f1.push_back(r.f1);
      if (r.pose) {
        deg.push_back(r.pose->deg);
        tr.push_back(r.pose->trans);
      }
    }
    if (s.count) {
      s.chamfer_mean /= static_cast<double>(s.count);
      s.f1_mean /= static_cast<double>(s.count);
      s.f1_median = median(f1);
    }
    if (!deg.empty()) {
      s.pose_deg_median = median(deg);
      s.pose_trans_median = median(tr);
    }
    return s;
  }

  std::vector<std::string> categories() const {
    std::vector<std::string> c;
    for (const auto& r : shapes)
      if (std::find(c.begin(), c.end(), r.category) == c.end()) c.push_back(r.category);
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tau"] = tau;
    j["shapes"] = nlohmann::json::array();
    for (const auto& r : shapes) {
      nlohmann::json s{{"id", r.id},
                       {"category", r.category},
                       {"chamfer_x1e4", r.chamfer_x1e4},
                       {"f1", r.f1},
                       {"pred_points", r.pred_points},
                       {"gt_points", r.gt_points}};
      if (r.pose) s["pose_error"] = {{"deg", r.pose->deg}, {"trans", r.pose->trans}};
      j["shapes"].push_back(s);
    }
    nlohmann::json cats = nlohmann::json::object();
    for (const auto& c : categories()) {
      const Summary s = summarize(c);
      nlohmann::json o{{"count", s.count}, {"chamfer_x1e4", s.chamfer_mean}, {"f1", s.f1_mean},
                       {"f1_median", s.f1_median}};
      if (s.pose_deg_median) o["pose_deg_median"] = *s.pose_deg_median, o["pose_trans_median"] = *s.pose_trans_median;
      cats[c] = o;
    }
    j["categories"] = cats;
    return j;
  }

  /// Aligned text table: one row per category plus the mean over all shapes.
  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(10) << "category" << std::right << std::setw(7) << "n" << std::setw(12) << "CD"
       << std::setw(10) << "F@" + format_tau() << '\n';
    auto row = [&](const std::string& name, const Summary& s) {
      os << std::left << std::setw(10) << name << std::right << std::setw(7) << s.count << std::fixed
         << std::setprecision(3) << std::setw(12) << s.chamfer_mean << std::setw(10) << s.f1_mean << '\n';
    };
    for (const auto& c : categories()) row(c, summarize(c));
    row("mean", summarize());
    return os.str();
  }

 private:
  std::string format_tau() const {
    std::ostringstream os;
    os << tau * 100 << '%';
    return os.str();
  }
};

}  // namespace dif
