#include "dif/canonicalize.hpp"
#include "dif/metrics.hpp"

#include <gtest/gtest.h>

using namespace dif;

namespace {

// Anisotropic, asymmetric template so PCA axes and signs are well defined.
AnalyticShape lopsided_shape() {
  return {"test", ShapeNode::join({ShapeNode::box(Vec3::Zero(), Vec3(0.7, 0.3, 0.12), 0.03),
                                   ShapeNode::sphere(Vec3(0.45, 0.25, 0.05), 0.22),
                                   ShapeNode::box(Vec3(-0.55, -0.2, 0.1), Vec3(0.12, 0.12, 0.12))})};
}

PointCloud lopsided_template(std::size_t n = 6000, std::uint64_t seed = 1) {
  const auto s = sample_shape(lopsided_shape(), static_cast<int>(n), 1, seed);
  return PointCloud::from_matrix(s.surface_points, Frame::Canonical);
}

Pose random_pose(std::mt19937_64& rng, double max_angle = 3.0) {
  return Pose::from_rt(axis_angle(random_unit_vector(rng), uniform(rng, 0, max_angle)), uniform_in_cube(rng, 1.5));
}

Camera camera(const Vec3& eye, int res = 64) {
  Camera c;
  c.pose = look_at(eye, Vec3::Zero());
  c.width = c.height = res;
  c.k = Intrinsics::from_fov(res, res, 45.0);
  return c;
}

}  // namespace

TEST(Canonicalize, LiftPrincipalPointAndUnitTangent) {
  DepthImage img;
  img.width = 5;
  img.height = 3;
  img.k = {2.0, 2.0, 2.0, 1.0};
  img.depth.assign(15, 0.0f);
  img.mask.assign(15, 0);
  img.depth[img.index(2, 1)] = 2.0f;
  img.mask[img.index(2, 1)] = 1;
  img.depth[img.index(4, 1)] = 1.0f;
  img.mask[img.index(4, 1)] = 1;
  const PointCloud pc = lift_depth(img);
  ASSERT_EQ(pc.size(), 2u);
  EXPECT_EQ(pc.frame, Frame::Camera);
  EXPECT_EQ(pc.points[0], Vec3(0, 0, 2));
  EXPECT_EQ(pc.points[1], Vec3(1, 0, 1));
}

TEST(Canonicalize, LiftInvertsProjection) {
  const auto shape = make_family("chair", 1, 2)[0];
  const Camera cam = camera(Vec3(1.2, 1.5, 2.0));
  const DepthImage img = render_depth(shape, cam);
  const PointCloud pc = lift_depth(img);
  std::size_t i = 0;
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) {
      if (!img.mask[img.index(u, v)]) continue;
      const Vec3& p = pc.points[i++];
      EXPECT_NEAR(img.k.fx * p.x() / p.z() + img.k.cx, u, 1e-9);
      EXPECT_NEAR(img.k.fy * p.y() / p.z() + img.k.cy, v, 1e-9);
      EXPECT_NEAR(p.z(), img.depth[img.index(u, v)], 1e-12);
    }
  EXPECT_EQ(i, pc.size());
}

TEST(Canonicalize, RenderLiftOracleRoundTrip) {
  for (const std::string cat : {"car", "plane", "chair"}) {
    const auto shape = make_family(cat, 1, 4)[0];
    std::mt19937_64 rng(6);
    const Camera cam{sample_hemisphere_camera(rng, 2.5), Intrinsics::from_fov(80, 80, 50), 80, 80};
    const PointCloud pc = transform(lift_depth(render_depth(shape, cam)), cam.pose.inverse(), Frame::Canonical);
    std::size_t close = 0;
    for (const auto& p : pc.points)
      if (std::abs(analytic_sdf(shape, p)) < 1e-3) ++close;
    EXPECT_GE(static_cast<double>(close), 0.99 * static_cast<double>(pc.size())) << cat;
  }
}

TEST(Canonicalize, EmptyMaskRejected) {
  DepthImage img;
  img.width = img.height = 4;
  img.depth.assign(16, 0.0f);
  img.mask.assign(16, 0);
  EXPECT_THROW(lift_depth(img), DataError);
}

TEST(Canonicalize, PcaIsEquivariantAndProper) {
  const PointCloud tmpl = lopsided_template();
  const PcaEstimator pca;
  const Pose base = pca.estimate(tmpl);
  EXPECT_TRUE(base.is_valid());
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    const Pose g = random_pose(rng);
    const Pose p = pca.estimate(transform(tmpl, g, Frame::Camera));
    EXPECT_TRUE(p.is_valid());
    // PCA frame of the moved cloud equals the original PCA frame.
    const auto e = pose_error(p.compose(g), base);
    EXPECT_LT(e.deg, 1e-6);
    EXPECT_LT(e.trans, 1e-9);
  }
}

TEST(Canonicalize, PcaDegenerateAxisNamed) {
  PointCloud plane;
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) plane.points.emplace_back(uniform(rng, -1, 1), uniform(rng, -0.5, 0.5), 0.0);
  try {
    PcaEstimator().estimate(plane);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("third principal axis"), std::string::npos) << e.what();
  }
}

TEST(Canonicalize, KabschRecoversTransform) {
  std::mt19937_64 rng(4);
  std::vector<Vec3> a, b;
  const Pose g = random_pose(rng);
  for (int i = 0; i < 50; ++i) {
    a.push_back(uniform_in_cube(rng));
    b.push_back(g.apply(a.back()));
  }
  const auto e = pose_error(kabsch(a, b), g);
  EXPECT_LT(e.deg, 1e-8);
  EXPECT_LT(e.trans, 1e-10);
}

TEST(Canonicalize, PcaIcpRecoversKnownTransform) {
  const PointCloud tmpl = lopsided_template();
  const IcpEstimator est(tmpl);
  std::mt19937_64 rng(8);
  for (int t = 0; t < 5; ++t) {
    const Pose g = random_pose(rng);
    const PointCloud cam = transform(tmpl, g, Frame::Camera);
    const Pose p = est.estimate(cam);
    const auto e = pose_error(p, g.inverse());
    EXPECT_LT(e.deg, 1.0);
    EXPECT_LT(e.trans, 1e-3);
  }
}

TEST(Canonicalize, CanonicalCloudGivesIdentity) {
  const PointCloud tmpl = lopsided_template();
  const IcpEstimator est(tmpl);
  const auto e = pose_error(est.estimate(tmpl), Pose::identity());
  EXPECT_LT(e.deg, 1.0);
  EXPECT_LT(e.trans, 1e-3);
}

// A hemispherical cap only constrains the centre.
TEST(Canonicalize, HalfSphereRecoversTranslation) {
  const AnalyticShape sphere{"sphere", ShapeNode::sphere(Vec3::Zero(), 0.5)};
  const auto full = sample_shape(sphere, 6000, 1, 3);
  const PointCloud tmpl = PointCloud::from_matrix(full.surface_points, Frame::Canonical);
  const Pose g = Pose::from_rt(axis_angle(Vec3(1, 2, 3), 0.7), Vec3(0.2, -0.1, 2.0));
  PointCloud cap;
  cap.frame = Frame::Camera;
  const auto half = sample_shape(sphere, 4000, 1, 9);
  for (Eigen::Index i = 0; i < half.surface_count(); ++i)
    if (half.surface_points(2, i) > 0) cap.points.push_back(g.apply(half.surface_points.col(i)));
  const Pose p = IcpEstimator(tmpl).estimate(cap);
  // The sphere centre (origin) must map back to the origin.
  EXPECT_LT(p.apply(g.translation).norm(), 5e-3);
}

TEST(Canonicalize, IcpResidualOnPartialNoisyOverlap) {
  const PointCloud tmpl = lopsided_template(30000, 2);
  const KdTree tree(tmpl.points);
  const double sigma = 0.005;
  std::mt19937_64 rng(12);
  const Pose g = Pose::from_rt(axis_angle(Vec3(0.3, 1, 0.2), 0.6), Vec3(0.1, 0.2, 2.2));
  // ~65% overlap: drop points on one side.
  PointCloud part;
  for (const auto& p : lopsided_template(4000, 21).points)
    if (p.x() > -0.3) part.points.push_back(g.apply(p + sigma * Vec3(gaussian(rng), gaussian(rng), gaussian(rng))));
  ASSERT_GT(part.size(), 2400u);
  const Pose init = Pose::from_rt(axis_angle(Vec3(1, 0, 0), deg2rad(5)), Vec3(0.02, 0, 0)).compose(g.inverse());
  const IcpResult r = icp(part, tree, init);
  EXPECT_LE(r.iterations, 50);
  EXPECT_LT(r.rms, 2 * sigma);
  const auto e = pose_error(r.pose, g.inverse());
  EXPECT_LT(e.deg, 1.0);
}

TEST(Canonicalize, FrameAlignStubs) {
  const PointCloud tmpl = lopsided_template(2000);
  const auto id = frame_align(IdentityEstimator(), tmpl);
  EXPECT_LT(pose_error(id, Pose::identity()).deg, 1e-12);
  const Pose rot90 = Pose::from_rt(axis_angle(Vec3::UnitZ(), deg2rad(90)), Vec3::Zero());
  const auto inv = frame_align(FixedEstimator(rot90), tmpl);
  EXPECT_LT(pose_error(inv, rot90.inverse()).deg, 1e-10);
}

// Estimator with its own canonical frame (the PCA frame), brought back by frame_align.
TEST(Canonicalize, EstimateComposedWithFrameAlignLandsOnGroundTruth) {
  const PointCloud tmpl = lopsided_template();
  const PcaEstimator pca;
  FrameAlignCache cache;
  const Pose align = cache.get(pca, "car", tmpl);
  cache.get(pca, "car", tmpl);
  EXPECT_EQ(cache.size(), 1u);
  std::mt19937_64 rng(5);
  for (int t = 0; t < 5; ++t) {
    const Pose g = random_pose(rng);
    const PointCloud cam = transform(tmpl, g, Frame::Camera);
    const Pose p = estimate_pose(pca, cam, align);
    EXPECT_LT(pose_error(p, g.inverse()).deg, 1.0);
  }
}

TEST(Canonicalize, NoisyOracleHasRequestedError) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 10; ++t) {
    const Pose obj = random_pose(rng);
    const NoisyOracleEstimator est(obj, 10.0, 0.05, static_cast<std::uint64_t>(t));
    const PointCloud dummy = PointCloud::from_matrix(Eigen::Matrix3Xd::Random(3, 10), Frame::Camera);
    const Pose p = est.estimate(dummy);
    const auto e = pose_error(p.inverse(), obj);
    EXPECT_NEAR(e.deg, 10.0, 1e-8);
    EXPECT_NEAR(e.trans, 0.05, 1e-12);
    EXPECT_EQ(est.estimate(dummy).translation, p.translation);
  }
  EXPECT_LT(pose_error(frame_align(NoisyOracleEstimator(Pose::identity(), 10, 0.05, 1), PointCloud{}),
                       Pose::identity()).deg, 1e-12);
}

TEST(Canonicalize, PlyRoundTrip) {
  const PointCloud pc = lopsided_template(500);
  const auto dir = std::filesystem::temp_directory_path() / "dif_test_canon";
  std::filesystem::create_directories(dir);
  for (auto fmt : {PlyFormat::Ascii, PlyFormat::BinaryLittleEndian}) {
    write_ply(dir / "c.ply", pc, fmt);
    const PointCloud back = read_ply(dir / "c.ply");
    ASSERT_EQ(back.size(), pc.size());
    for (std::size_t i = 0; i < pc.size(); ++i) EXPECT_LT((back.points[i] - pc.points[i]).norm(), 1e-6);
  }
  std::ofstream(dir / "bad.ply") << "ply\nformat binary_big_endian 1.0\nend_header\n";
  EXPECT_THROW(read_ply(dir / "bad.ply"), DataError);
  std::filesystem::remove_all(dir);
}
