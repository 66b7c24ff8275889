#pragma once

// Test-time fitting of a latent code and an object pose to a partial depth
// observation, with every network weight frozen.

#include "dif/canonicalize.hpp"
#include "dif/losses.hpp"
#include "dif/meshing.hpp"
#include "dif/optim.hpp"
#include "dif/training.hpp"

#include <cstdio>
#include <fstream>

namespace dif {

struct InferenceConfig {
  int iterations = 30;
  double lr_shape = 1e-3;
  double lr_pose = 1e-2;
  int eikonal_samples = 512;  // fresh uniform points in [-1, 1]^3 per iteration
  LatentInit init = LatentInit::Random;
  bool optimize_shape = true;
  bool optimize_pose = true;
  int mesh_resolution = 128;
  std::uint64_t seed = 0;

  void validate() const {
    // Zero iterations is allowed and returns the initialization unchanged.
    if (iterations < 0) throw StructuralError("iterations must be non-negative");
    if (!(lr_shape > 0) || !(lr_pose > 0)) throw StructuralError("learning rates must be positive");
    if (eikonal_samples < 0) throw StructuralError("eikonal sample count must be non-negative");
    if (mesh_resolution < 8) throw StructuralError("mesh resolution must be at least 8");
  }
};

/// Objective values at the start of one iteration (unweighted).
struct TraceRow {
  double observation = 0, eikonal = 0, latent = 0, total = 0;
};

struct ReconstructionResult {
  TriangleMesh mesh;
  Pose pose;       // canonical-from-camera after optimization
  Pose init_pose;  // canonical-from-camera the optimization started from
  Eigen::VectorXd latent;
  std::vector<TraceRow> trace;
};

/// Objective and gradients for a fixed state, exposed for gradient checks.
/// The observed points enter as x = R_r y + t_r where y are the observations
/// already mapped by the initial pose.
struct InferenceGrad {
  TraceRow terms;
  Eigen::VectorXd z_grad;
  Rot6d r6_grad{};
  Vec3 t_grad = Vec3::Zero();
};

inline InferenceGrad inference_objective(const ShapePrior& prior, const Eigen::VectorXd& z, const Rot6d& r6,
                                         const Vec3& t, const Eigen::Matrix3Xd& y, const Eigen::Matrix3Xd& eik,
                                         const LossWeights& w, bool want_grads = true) {
  const Eigen::Index no = y.cols(), ne = eik.cols();
  if (no == 0) throw StructuralError("no observed points");
  const Mat3 r = rot6d_to_matrix(r6);
  Eigen::Matrix3Xd x(3, no + ne);
  x.leftCols(no) = (r * y).colwise() + t;
  x.rightCols(ne) = eik;

  const DeformWeights dw = hyper_weights(prior, z);
  const ComposedForward f = composed_forward(prior, dw, x);
  InferenceGrad out;
  ComposedAdjoint adj(f.n);
  const double w_obs = w.sdf[0], w_eik = w.sdf[2];
  for (Eigen::Index j = 0; j < no; ++j) {
    out.terms.observation += std::abs(f.sdf[j]) / static_cast<double>(no);
    adj.sdf[j] = w_obs * sign0(f.sdf[j]) / static_cast<double>(no);
  }
  for (Eigen::Index j = no; j < no + ne; ++j) {
    const Vec3 g = f.sdf_grad.col(j);
    const double gn = g.norm();
    out.terms.eikonal += std::abs(gn - 1.0) / static_cast<double>(ne);
    if (gn > 0.0) adj.sdf_grad.col(j) = w_eik * sign0(gn - 1.0) * g / (gn * static_cast<double>(ne));
  }
  out.terms.latent = z.norm();
  out.terms.total = w_obs * out.terms.observation + w_eik * out.terms.eikonal + w.latent * out.terms.latent;
  if (!std::isfinite(out.terms.total)) throw NumericError("non-finite objective");
  if (!want_grads) return out;

  MlpParams tgrad = prior.templ.zeros_like(), dgrad = dw.net.zeros_like();
  Eigen::Matrix3Xd xadj;
  composed_backward(prior.templ, dw, f, adj, tgrad, dgrad, &xadj);
  out.z_grad = Eigen::VectorXd::Zero(z.size());
  if (out.terms.latent > 0) out.z_grad += w.latent * z / out.terms.latent;
  std::vector<MlpParams> hg;
  for (const auto& h : prior.hyper) hg.push_back(h.zeros_like());
  hyper_backward(prior, z, dgrad, hg, out.z_grad);

  Mat3 rbar = Mat3::Zero();
  for (Eigen::Index j = 0; j < no; ++j) {
    rbar += xadj.col(j) * y.col(j).transpose();
    out.t_grad += xadj.col(j);
  }
  out.r6_grad = rot6d_backward(r6, rbar);
  if (!out.z_grad.allFinite() || !rbar.allFinite()) throw NumericError("non-finite gradient");
  return out;
}

/// Adam over (z, pose). The pose is a residual (R_r, t_r) applied after
/// `init`, starting at identity, so the composite starts exactly at init and
/// rotation steps pivot about the canonical origin rather than the camera.
inline ReconstructionResult joint_optimize(const ShapePrior& prior, const PointCloud& observed, const Pose& init,
                                           const InferenceConfig& cfg, const LossWeights& w,
                                           std::optional<Eigen::VectorXd> z_init = std::nullopt) {
  cfg.validate();
  observed.validate();
  if (observed.empty()) throw StructuralError("observed point cloud is empty");
  if (!init.is_valid(1e-6)) throw StructuralError("initial pose is not a valid rigid transform");

  ReconstructionResult res;
  res.init_pose = init;
  res.latent = z_init ? std::move(*z_init) : initial_latent(prior, cfg.init, cfg.seed);
  if (res.latent.size() != prior.latent_dim()) throw StructuralError("initial latent has the wrong dimension");
  const Eigen::Matrix3Xd y = transform(observed, init, Frame::Canonical).matrix();

  Rot6d r6{1, 0, 0, 0, 1, 0};
  Vec3 t = Vec3::Zero();
  AdamSlot shape_slot, pose_slot;  // fresh state at iteration 0
  const AdamConfig shape_cfg{cfg.lr_shape, 0.9, 0.999, 1e-8};
  const AdamConfig pose_cfg{cfg.lr_pose, 0.9, 0.999, 1e-8};

  for (int it = 0; it < cfg.iterations; ++it) {
    auto rng = make_rng(cfg.seed, "inference-eikonal", static_cast<std::uint64_t>(it));
    Eigen::Matrix3Xd eik(3, cfg.eikonal_samples);
    for (Eigen::Index j = 0; j < eik.cols(); ++j) eik.col(j) = uniform_in_cube(rng);
    InferenceGrad g;
    try {
      g = inference_objective(prior, res.latent, r6, t, y, eik, w, cfg.optimize_shape || cfg.optimize_pose);
    } catch (const NumericError& e) {
      throw NumericError("inference iteration " + std::to_string(it) + ": " + e.what());
    }
    res.trace.push_back(g.terms);
    if (cfg.optimize_shape) shape_slot.step(res.latent, g.z_grad, shape_cfg);
    if (cfg.optimize_pose) {
      Eigen::Matrix<double, 9, 1> p, pg;
      p << Eigen::Map<const Eigen::Matrix<double, 6, 1>>(r6.data()), t;
      pg << Eigen::Map<const Eigen::Matrix<double, 6, 1>>(g.r6_grad.data()), g.t_grad;
      pose_slot.step(p, pg, pose_cfg);
      std::copy(p.data(), p.data() + 6, r6.begin());
      t = p.tail<3>();
      rot6d_to_matrix(r6);  // throws if the parametrization degenerated
    }
    if (!res.latent.allFinite() || !t.allFinite())
      throw NumericError("inference iteration " + std::to_string(it) + ": state became non-finite");
  }
  res.pose = Pose::from_rt(rot6d_to_matrix(r6), t).compose(init);
  return res;
}

inline TriangleMesh extract_mesh(const ShapePrior& prior, const Eigen::VectorXd& z, int resolution) {
  const DeformWeights dw = hyper_weights(prior, z);
  return marching_cubes_batch(
      [&](const Eigen::Matrix3Xd& x, Eigen::Ref<Eigen::RowVectorXd> out) {
        out = instance_sdf_values(prior.templ, dw, x);
      },
      resolution);
}

namespace detail {

template <class F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e);
  }
}

}  // namespace detail

/// Full pipeline for one depth image. `align` maps the estimator's canonical
/// frame into the prior's (see frame_align).
inline ReconstructionResult reconstruct(const ShapePrior& prior, const DepthImage& depth, const PoseEstimator& est,
                                        const Pose& align, const InferenceConfig& cfg, const LossWeights& w) {
  const PointCloud cloud = detail::run_stage("lift_depth", [&] { return lift_depth(depth); });
  const Pose init = detail::run_stage("estimate_pose", [&] { return estimate_pose(est, cloud, align); });
  ReconstructionResult res =
      detail::run_stage("joint_optimize", [&] { return joint_optimize(prior, cloud, init, cfg, w); });
  res.mesh = detail::run_stage("marching_cubes", [&] {
    TriangleMesh m = extract_mesh(prior, res.latent, cfg.mesh_resolution);
    if (m.empty()) throw NumericError("the fitted field has no zero level set inside the unit cube");
    return m;
  });
  return res;
}

inline ReconstructionResult reconstruct(const ShapePrior& prior, const DepthImage& depth, const PoseEstimator& est,
                                        const PointCloud& canonical_template, const InferenceConfig& cfg,
                                        const LossWeights& w) {
  const Pose align = detail::run_stage("frame_align", [&] { return frame_align(est, canonical_template); });
  return reconstruct(prior, depth, est, align, cfg, w);
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "iteration,observation,eikonal,latent,total\n";
  char buf[160];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& r = trace[i];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", i, r.observation, r.eikonal, r.latent, r.total);
    os << buf;
  }
}

/// mesh.obj, pose.json, latent.bin and trace.csv inside `dir`.
inline void write_result_bundle(const std::filesystem::path& dir, const ReconstructionResult& r) {
  std::filesystem::create_directories(dir);
  write_obj(dir / "mesh.obj", r.mesh);
  {
    std::ofstream os(dir / "pose.json", std::ios::trunc);
    if (!os) throw DataError("cannot write " + (dir / "pose.json").string());
    const nlohmann::json j{{"canonical_from_camera", pose_json(r.pose)},
                           {"initial_canonical_from_camera", pose_json(r.init_pose)}};
    os << j.dump(2) << '\n';
  }
  Container c;
  c.put("latent", Eigen::MatrixXd(r.latent));
  write_container(dir / "latent.bin", c);
  std::ofstream os(dir / "trace.csv", std::ios::trunc);
  if (!os) throw DataError("cannot write " + (dir / "trace.csv").string());
  write_trace_csv(os, r.trace);
}

}  // namespace dif
