#pragma once

// Depth lifting and initial pose estimation into the prior's canonical frame.

#include "dif/kdtree.hpp"
#include "dif/synthdata.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <map>
#include <memory>
#include <mutex>

namespace dif {

/// Back-projects masked pixels: p = (d (u - cx) / fx, d (v - cy) / fy, d).
inline PointCloud lift_depth(const DepthImage& img) {
  img.validate();
  PointCloud pc;
  pc.frame = Frame::Camera;
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) {
      const auto i = img.index(u, v);
      if (!img.mask[i]) continue;
      const double d = img.depth[i];
      pc.points.emplace_back(d * (u - img.k.cx) / img.k.fx, d * (v - img.k.cy) / img.k.fy, d);
    }
  if (pc.empty()) throw DataError("depth image has no valid pixels");
  return pc;
}

inline PointCloud transform(const PointCloud& pc, const Pose& p, Frame to) {
  const Mat3 r = p.rotation();
  PointCloud out;
  out.frame = to;
  out.points.reserve(pc.size());
  for (const auto& x : pc.points) out.points.push_back(r * x + p.translation);
  return out;
}

/// Maps a camera-frame cloud into the estimator's canonical frame. Returned
/// poses are canonical-from-camera.
class PoseEstimator {
 public:
  virtual ~PoseEstimator() = default;
  virtual std::string name() const = 0;
  virtual Pose estimate(const PointCloud& camera_cloud) const = 0;
  /// True when the estimator's canonical frame already is the prior's frame,
  /// so no frame alignment through the template is needed.
  virtual bool shares_prior_frame() const { return false; }
};

class IdentityEstimator final : public PoseEstimator {
 public:
  std::string name() const override { return "identity"; }
  Pose estimate(const PointCloud& pc) const override {
    pc.validate();
    return Pose::identity();
  }
};

class FixedEstimator final : public PoseEstimator {
 public:
  explicit FixedEstimator(Pose p) : pose_(std::move(p)) {}
  std::string name() const override { return "fixed"; }
  Pose estimate(const PointCloud& pc) const override {
    pc.validate();
    return pose_;
  }

 private:
  Pose pose_;
};

/// Principal axes (largest variance first) with signs chosen by the third
/// moment along each axis; exact ties keep the positive direction.
class PcaEstimator final : public PoseEstimator {
 public:
  std::string name() const override { return "pca"; }

  Pose estimate(const PointCloud& pc) const override {
    pc.validate();
    const Vec3 c = pc.centroid();
    Mat3 cov = Mat3::Zero();
    for (const auto& p : pc.points) cov += (p - c) * (p - c).transpose();
    cov /= static_cast<double>(pc.size());
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 ev = es.eigenvalues();  // ascending
    static const char* names[3] = {"first", "second", "third"};
    for (int k = 0; k < 3; ++k)
      if (!(ev[2 - k] > 1e-10 * std::max(ev[2], 1e-300)))
        throw NumericError(std::string("degenerate covariance: no spread along the ") + names[k] +
                           " principal axis (eigenvalue " + std::to_string(ev[2 - k]) + ")");
    Mat3 axes;
    Vec3 skew;
    for (int k = 0; k < 3; ++k) {
      const Vec3 a = es.eigenvectors().col(2 - k);
      double m3 = 0;
      for (const auto& p : pc.points) m3 += std::pow((p - c).dot(a), 3);
      skew[k] = m3 / static_cast<double>(pc.size());
      axes.row(k) = (skew[k] < 0 ? -a : a).transpose();
      skew[k] = std::abs(skew[k]);
    }
    if (axes.determinant() < 0) {
      // Keep a proper rotation: flip the axis whose sign was least certain.
      Eigen::Index k;
      skew.minCoeff(&k);
      axes.row(k) *= -1;
    }
    return Pose::from_rt(axes, -(axes * c));
  }
};

struct IcpOptions {
  int max_iterations = 50;
  double reject_factor = 3.0;  // correspondences beyond this multiple of the median distance are dropped
  double rel_tol = 1e-6;
};

struct IcpResult {
  Pose pose;
  double rms = 0;  // over inlier correspondences
  int iterations = 0;
};

/// Least-squares rigid transform taking src onto dst (Kabsch).
inline Pose kabsch(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  if (src.size() != dst.size() || src.size() < 3) throw StructuralError("kabsch needs >= 3 matched points");
  Vec3 cs = Vec3::Zero(), cd = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) cs += src[i], cd += dst[i];
  cs /= static_cast<double>(src.size());
  cd /= static_cast<double>(dst.size());
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - cs) * (dst[i] - cd).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  const Mat3 r = svd.matrixV() * d * svd.matrixU().transpose();
  return Pose::from_rt(r, cd - r * cs);
}

/// Point-to-point ICP of `cloud` against the template tree, starting at `init`.
inline IcpResult icp(const PointCloud& cloud, const KdTree& target, const Pose& init, const IcpOptions& opt = {}) {
  cloud.validate();
  IcpResult res{init, 0, 0};
  double prev = std::numeric_limits<double>::infinity();
  std::vector<double> d2(cloud.size());
  std::vector<Vec3> moved(cloud.size());
  for (int it = 0; it < opt.max_iterations; ++it) {
    const Mat3 r = res.pose.rotation();
    for (std::size_t i = 0; i < cloud.size(); ++i) moved[i] = r * cloud.points[i] + res.pose.translation;
    std::vector<std::size_t> nn(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto hit = target.nearest(moved[i]);
      d2[i] = hit.dist2;
      nn[i] = hit.index;
    }
    std::vector<double> sorted = d2;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
    const double med = std::sqrt(sorted[sorted.size() / 2]);
    const double cut = opt.reject_factor * med;
    std::vector<Vec3> src, dst;
    double sum = 0;
    for (std::size_t i = 0; i < cloud.size(); ++i)
      if (std::sqrt(d2[i]) <= cut) {
        src.push_back(moved[i]);
        dst.push_back(target.points()[nn[i]]);
        sum += d2[i];
      }
    res.rms = std::sqrt(sum / static_cast<double>(src.size()));
    res.iterations = it + 1;
    if (src.size() < 3) throw NumericError("ICP kept fewer than 3 correspondences");
    if (std::isfinite(prev) && std::abs(prev - res.rms) <= opt.rel_tol * prev) break;
    prev = res.rms;
    res.pose = kabsch(src, dst).compose(res.pose);
  }
  return res;
}

/// PCA initialization against the template's own PCA frame, refined by ICP
/// against the template samples. The output frame is the template's frame.
class IcpEstimator final : public PoseEstimator {
 public:
  explicit IcpEstimator(const PointCloud& template_cloud, IcpOptions opt = {})
      : tree_(template_cloud.points), opt_(opt) {
    template_cloud.validate();
    template_from_pca_ = PcaEstimator().estimate(template_cloud).inverse();
  }
  std::string name() const override { return "icp"; }
  bool shares_prior_frame() const override { return true; }

  Pose estimate(const PointCloud& pc) const override { return refine(pc).pose; }

  /// Third-moment signs are unreliable on near-symmetric shapes, so ICP is
  /// started from all four proper sign flips of the PCA frame and the lowest
  /// residual wins.
  IcpResult refine(const PointCloud& pc) const {
    const Pose pca = PcaEstimator().estimate(pc);
    IcpResult best;
    best.rms = std::numeric_limits<double>::infinity();
    for (const Vec3 flip : {Vec3(1, 1, 1), Vec3(-1, -1, 1), Vec3(-1, 1, -1), Vec3(1, -1, -1)}) {
      const Pose f = Pose::from_rt(flip.asDiagonal().toDenseMatrix(), Vec3::Zero());
      IcpResult r = icp(pc, tree_, template_from_pca_.compose(f.compose(pca)), opt_);
      if (r.rms < best.rms) best = r;
    }
    return best;
  }

 private:
  KdTree tree_;
  IcpOptions opt_;
  Pose template_from_pca_;
};

/// Ground truth perturbed by a fixed-magnitude rotation about a random axis
/// and a fixed-length translation in a random direction, both applied to the
/// object pose (camera-from-canonical). Deterministic per seed.
class NoisyOracleEstimator final : public PoseEstimator {
 public:
  NoisyOracleEstimator(Pose object_pose, double rot_deg, double trans, std::uint64_t seed)
      : gt_(std::move(object_pose)), rot_deg_(rot_deg), trans_(trans), seed_(seed) {}
  std::string name() const override { return "noisy-oracle"; }
  bool shares_prior_frame() const override { return true; }

  /// The perturbed camera-from-canonical pose.
  Pose noisy_object_pose() const {
    auto rng = make_rng(seed_, "noisy-oracle");
    const Mat3 dr = axis_angle(random_unit_vector(rng), deg2rad(rot_deg_));
    const Vec3 dt = trans_ * random_unit_vector(rng);
    return Pose::from_rt(dr * gt_.rotation(), gt_.translation + dt);
  }

  Pose estimate(const PointCloud& pc) const override {
    pc.validate();
    return noisy_object_pose().inverse();
  }

 private:
  Pose gt_;
  double rot_deg_, trans_;
  std::uint64_t seed_;
};

/// Transform from the estimator's canonical frame to the prior's, obtained by
/// running the estimator once on the complete template.
inline Pose frame_align(const PoseEstimator& est, const PointCloud& canonical_template) {
  if (est.shares_prior_frame()) return Pose::identity();
  return est.estimate(canonical_template).inverse();
}

/// frame_align results cached per (estimator, category).
class FrameAlignCache {
 public:
  Pose get(const PoseEstimator& est, const std::string& category, const PointCloud& canonical_template) {
    const auto key = std::make_pair(est.name(), category);
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    Pose p = frame_align(est, canonical_template);
    std::lock_guard<std::mutex> lock(mu_);
    return cache_.emplace(key, p).first->second;
  }
  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return cache_.size();
  }

 private:
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::string>, Pose> cache_;
};

/// Initial canonical-from-camera pose: estimator output mapped into the prior's frame.
inline Pose estimate_pose(const PoseEstimator& est, const PointCloud& camera_cloud, const Pose& align) {
  camera_cloud.validate();
  const Pose p = align.compose(est.estimate(camera_cloud));
  if (!p.is_valid(1e-6)) throw NumericError("estimator '" + est.name() + "' returned an invalid pose");
  return p;
}

}  // namespace dif
