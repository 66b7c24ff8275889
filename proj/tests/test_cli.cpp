#include "dif/cli.hpp"

#include <gtest/gtest.h>

using namespace dif;
using namespace dif::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dif_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

json small_data_config(const fs::path& out) {
  json c = default_config("gen-data");
  c["output"] = out.string();
  c["category"] = "car";
  c["count"] = 4;
  c["test_count"] = 2;
  c["seed"] = 9;
  c["surface_points"] = 300;
  c["free_points"] = 300;
  c["mesh_resolution"] = 32;
  c["render"]["width"] = c["render"]["height"] = 32;
  return c;
}

json small_train_config(const fs::path& data, const fs::path& out, int epochs) {
  json c = default_config("train");
  c["dataset"] = data.string();
  c["output"] = out.string();
  c["arch"]["latent_dim"] = 4;
  c["arch"]["template_hidden"] = {16, 16};
  c["arch"]["deform_hidden"] = {8, 8};
  c["arch"]["hyper_hidden"] = 8;
  c["train"]["epochs"] = epochs;
  c["train"]["batch_shapes"] = 2;
  c["train"]["surface_points"] = 100;
  c["train"]["free_points"] = 100;
  return c;
}

const fs::path& shared_dataset() {
  static const fs::path p = [] {
    const fs::path d = scratch("data");
    cmd_gen_data(small_data_config(d));
    return d;
  }();
  return p;
}

}  // namespace

TEST(Cli, ConfigMergeRejectsUnknownKeysAndWrongTypes) {
  const json d = default_config("train");
  EXPECT_THROW(merge_config(d, json{{"epochs", 3}}), UsageError);  // lives under train
  EXPECT_THROW(merge_config(d, json{{"train", {{"epochs", "many"}}}}), UsageError);
  const json m = merge_config(d, json{{"train", {{"epochs", 3}}}});
  EXPECT_EQ(m["train"]["epochs"], 3);
  EXPECT_EQ(m["train"]["lr"], d["train"]["lr"]);

  json c = default_config("reconstruct");
  apply_set(c, "inference.iterations=7");
  apply_set(c, "estimator.type=icp");
  EXPECT_EQ(c["inference"]["iterations"], 7);
  EXPECT_EQ(c["estimator"]["type"], "icp");
  EXPECT_THROW(apply_set(c, "inference.iterationz=7"), UsageError);
  EXPECT_THROW(apply_set(c, "novalue"), UsageError);
  EXPECT_THROW(default_config("fly"), UsageError);
}

TEST(Cli, GenDataIsDeterministic) {
  const fs::path a = shared_dataset(), b = scratch("data_b");
  cmd_gen_data(small_data_config(b));
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file() || e.path().filename() == "config.json") continue;
    const fs::path rel = fs::relative(e.path(), a);
    ASSERT_TRUE(fs::exists(b / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++compared;
  }
  // manifest + per shape: shape, samples, depth (.pfm and .json)
  EXPECT_EQ(compared, 1u + 4u * 4u);
  fs::remove_all(b);
}

TEST(Cli, GeneratedSamplesMatchTheAnalyticShape) {
  const Dataset ds = load_dataset(shared_dataset());
  ASSERT_EQ(ds.entries.size(), 4u);
  EXPECT_EQ(ds.split("train").size(), 2u);
  EXPECT_EQ(ds.split("test").size(), 2u);
  for (const auto& e : ds.entries) {
    const AnalyticShape shape = shape_from_json(read_json(e.shape));
    const ShapeSampleSet s = load_samples(e.samples);
    for (Eigen::Index i = 0; i < s.free_count(); i += 37)
      EXPECT_NEAR(s.free_sdf[i], analytic_sdf(shape, s.free_points.col(i)), 1e-12);
    for (Eigen::Index i = 0; i < s.surface_count(); i += 37)
      EXPECT_LT(std::abs(analytic_sdf(shape, s.surface_points.col(i))), 1e-6);
    ASSERT_EQ(e.views.size(), 1u);
    const DepthImage img = load_depth(e.views[0]);
    EXPECT_GT(img.valid_count(), 20u);
  }
}

TEST(Cli, TrainWithZeroEpochsWritesTheInitialization) {
  const fs::path out = scratch("train0");
  cmd_train(small_train_config(shared_dataset(), out, 0));
  for (const char* f : {"prior.bin", "prior.json", "state.bin", "history.csv", "config.json"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const LoadedPrior lp = load_prior_dir(out);
  const ShapePrior init = make_prior(lp.prior.arch, "car", 2, 0);
  EXPECT_EQ(lp.prior.latents[1].z, init.latents[1].z);
  EXPECT_EQ(lp.prior.templ.layers[0].weight, init.templ.layers[0].weight);
  EXPECT_TRUE(read_history_csv(out / "history.csv").empty());
  fs::remove_all(out);
}

TEST(Cli, TrainResumesFromCheckpoint) {
  const fs::path full = scratch("train_full"), part = scratch("train_part");
  cmd_train(small_train_config(shared_dataset(), full, 3));
  cmd_train(small_train_config(shared_dataset(), part, 1));
  json again = small_train_config(shared_dataset(), part, 3);
  again["resume"] = true;
  cmd_train(again);
  const auto hf = read_history_csv(full / "history.csv"), hp = read_history_csv(part / "history.csv");
  ASSERT_EQ(hf.size(), 3u);
  ASSERT_EQ(hp.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(hp[e].terms.total, hf[e].terms.total, 1e-8 * hf[e].terms.total);
  const auto a = load_prior_dir(full).prior, b = load_prior_dir(part).prior;
  EXPECT_LT((a.latents[0].z - b.latents[0].z).norm(), 1e-10);
  EXPECT_LT((a.templ.layers[1].weight - b.templ.layers[1].weight).norm(), 1e-10);
  fs::remove_all(full);
  fs::remove_all(part);
}

TEST(Cli, MissingCheckpointIsADataError) {
  json c = default_config("reconstruct");
  c["dataset"] = shared_dataset().string();
  c["prior"] = scratch("nowhere").string();
  c["output"] = scratch("recon_missing").string();
  try {
    cmd_reconstruct(c);
    FAIL();
  } catch (...) {
    EXPECT_EQ(exit_code_for(std::current_exception()), kData);
  }
  fs::remove_all(c["output"].get<std::string>());
}

TEST(Cli, ExitCodesFollowTheCause) {
  auto code = [](auto thrower) {
    try {
      thrower();
    } catch (...) {
      return exit_code_for(std::current_exception());
    }
    return -1;
  };
  EXPECT_EQ(code([] { throw UsageError("x"); }), kUsage);
  EXPECT_EQ(code([] { throw DataError("x"); }), kData);
  EXPECT_EQ(code([] { throw NumericError("x"); }), kNumeric);
  EXPECT_EQ(code([] { detail::run_stage("joint_optimize", [] { throw NumericError("nan"); }); }), kNumeric);
  EXPECT_EQ(code([] { detail::run_stage("lift_depth", [] { throw DataError("empty"); }); }), kData);
}

TEST(Cli, EvaluatingTheTruthScoresPerfectly) {
  // Predictions are the ground-truth meshes with the true poses.
  const Dataset ds = load_dataset(shared_dataset());
  const fs::path pred = scratch("truth");
  for (const auto* e : ds.split("test")) {
    const AnalyticShape shape = shape_from_json(read_json(e->shape));
    const DepthImage img = load_depth(e->views[0]);
    ReconstructionResult r;
    r.mesh = marching_cubes([&](const Vec3& x) { return analytic_sdf(shape, x); }, 160);
    r.pose = r.init_pose = img.pose.inverse();
    r.latent = Eigen::VectorXd::Zero(1);
    write_bundle_atomic(pred / e->views[0].filename(), r);
  }
  EvalSettings es;  // default point count; sparser clouds cap F1 well below 1
  es.mesh_resolution = 64;
  const EvalReport rep = evaluate_predictions(ds, pred, es, 0, 1);
  ASSERT_EQ(rep.shapes.size(), 2u);
  for (const auto& s : rep.shapes) {
    EXPECT_GT(s.f1, 0.99) << s.id;
    EXPECT_LT(s.chamfer_x1e4, 0.5) << s.id;
    ASSERT_TRUE(s.pose);
    EXPECT_LT(s.pose->deg, 1e-6);
    EXPECT_LT(s.pose->trans, 1e-9);
  }
  fs::remove_all(pred);
}

TEST(Cli, ReconstructWritesBundlesAndIsReproducible) {
  const fs::path prior = scratch("train_recon");
  cmd_train(small_train_config(shared_dataset(), prior, 60));
  auto run = [&](const std::string& name) {
    json c = default_config("reconstruct");
    c["dataset"] = shared_dataset().string();
    c["prior"] = prior.string();
    c["output"] = scratch(name).string();
    c["inference"]["iterations"] = 3;
    c["inference"]["mesh_resolution"] = 24;
    int code = -1;
    const json s = cmd_reconstruct(c, &code);
    EXPECT_EQ(code, kOk);
    EXPECT_EQ(s["reconstructed"], 2);
    return fs::path(c["output"].get<std::string>());
  };
  const fs::path a = run("recon_a"), b = run("recon_b");
  EXPECT_EQ(read_json(a / "failures.json"), json::array());
  const Dataset ds = load_dataset(shared_dataset());
  for (const auto* e : ds.split("test"))
    for (const char* f : {"mesh.obj", "pose.json", "latent.bin", "trace.csv"}) {
      const fs::path rel = e->views[0].filename() / f;
      ASSERT_TRUE(fs::exists(a / rel)) << rel;
      EXPECT_EQ(slurp(a / rel), slurp(b / rel)) << rel;
    }
  for (const auto& p : {prior, a, b}) fs::remove_all(p);
}
