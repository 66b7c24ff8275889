#include "dif/synthdata.hpp"
#include "dif/training.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace dif;

namespace {

PriorArch small_arch() {
  PriorArch a;
  a.latent_dim = 8;
  a.template_hidden = {32, 32};
  a.deform_hidden = {16, 16};
  a.hyper_hidden = 16;
  return a;
}

std::vector<ShapeSampleSet> sphere_family(int n, int pts) {
  SamplingOptions opt;
  opt.mesh_resolution = 48;
  std::vector<ShapeSampleSet> out;
  for (const auto& s : make_family("sphere", n, 5)) out.push_back(sample_shape(s, pts, pts, 11, opt));
  return out;
}

TrainConfig quick(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_shapes = 2;
  c.surface_points = 100;
  c.free_points = 100;
  c.seed = 3;
  return c;
}

bool same_params(const ShapePrior& a, const ShapePrior& b) {
  if (dif::testing::flatten(a.templ) != dif::testing::flatten(b.templ)) return false;
  for (std::size_t l = 0; l < a.hyper.size(); ++l)
    if (dif::testing::flatten(a.hyper[l]) != dif::testing::flatten(b.hyper[l])) return false;
  for (std::size_t i = 0; i < a.latents.size(); ++i)
    if (a.latents[i].z != b.latents[i].z) return false;
  return true;
}

}  // namespace

TEST(Training, SeededRunsAreIdentical) {
  const auto data = sphere_family(4, 300);
  ShapePrior a = make_prior(small_arch(), "sphere", 4, 1), b = make_prior(small_arch(), "sphere", 4, 1);
  const auto ra = fit(a, data, quick(3), LossWeights{});
  const auto rb = fit(b, data, quick(3), LossWeights{});
  ASSERT_EQ(ra.history.size(), 3u);
  // Epoch 0 must agree bit for bit, the final loss to well within 1e-10.
  EXPECT_EQ(ra.history[0].terms.total, rb.history[0].terms.total);
  EXPECT_NEAR(ra.history.back().terms.total, rb.history.back().terms.total, 1e-10);
  EXPECT_TRUE(same_params(a, b));
}

TEST(Training, ZeroEpochsLeavesInitialization) {
  const auto data = sphere_family(2, 200);
  ShapePrior p = make_prior(small_arch(), "sphere", 2, 4);
  const ShapePrior init = p;
  const auto r = fit(p, data, quick(0), LossWeights{});
  EXPECT_TRUE(r.history.empty());
  EXPECT_TRUE(same_params(p, init));
}

TEST(Training, ResumeReproducesUninterruptedRun) {
  const auto data = sphere_family(4, 300);
  ShapePrior full = make_prior(small_arch(), "sphere", 4, 2);
  ShapePrior part = full;
  const auto ref = fit(full, data, quick(4), LossWeights{});

  // Stop after two epochs, round-trip everything through files, continue.
  const auto dir = std::filesystem::temp_directory_path() / "dif_resume_test";
  std::filesystem::create_directories(dir);
  auto first = fit(part, data, quick(4), LossWeights{}, std::nullopt,
                   [](const EpochRecord& r, const ShapePrior&, const TrainState&) { return r.epoch < 1; });
  ASSERT_EQ(first.history.size(), 2u);
  save_prior(dir / "prior.bin", part);
  save_train_state(dir / "state.bin", first.state);
  ShapePrior loaded = load_prior(dir / "prior.bin", part.arch, part.category);
  const auto second =
      fit(loaded, data, quick(4), LossWeights{}, load_train_state(dir / "state.bin", quick(4)));
  ASSERT_EQ(second.history.size(), 2u);
  for (int e = 0; e < 2; ++e)
    EXPECT_NEAR(first.history[e].terms.total, ref.history[e].terms.total, 1e-8 * ref.history[e].terms.total);
  for (int e = 0; e < 2; ++e)
    EXPECT_NEAR(second.history[e].terms.total, ref.history[e + 2].terms.total,
                1e-8 * ref.history[e + 2].terms.total);
  EXPECT_TRUE(same_params(loaded, full));
  std::filesystem::remove_all(dir);
}

TEST(Training, SmoothedLossDecreasesOverFirstEpochs) {
  const auto data = sphere_family(8, 600);
  ShapePrior p = make_prior(small_arch(), "sphere", 8, 6);
  TrainConfig c = quick(10);
  c.batch_shapes = 4;
  c.surface_points = 300;
  c.free_points = 300;
  const auto r = fit(p, data, c, LossWeights{});
  std::vector<double> smooth;
  for (std::size_t e = 2; e < r.history.size(); ++e)
    smooth.push_back((r.history[e].terms.total + r.history[e - 1].terms.total + r.history[e - 2].terms.total) / 3);
  for (std::size_t k = 1; k < smooth.size(); ++k) EXPECT_LE(smooth[k], smooth[k - 1]) << "window " << k;
  for (const auto& rec : r.history) {
    const auto& t = rec.terms;
    for (double v : {t.sdf_value, t.sdf_normal, t.sdf_eikonal, t.sdf_offsurface, t.normal, t.latent, t.smooth,
                     t.correction})
      EXPECT_GE(v, 0.0);
  }
}

TEST(Training, NonFiniteLossAbortsWithEpochDiagnostics) {
  auto data = sphere_family(2, 200);
  data[1].free_sdf[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig c = quick(1);
  c.free_points = 200;  // the poisoned sample is always drawn
  c.surface_points = 10;
  ShapePrior p = make_prior(small_arch(), "sphere", 2, 1);
  try {
    fit(p, data, c, LossWeights{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("latent 1"), std::string::npos) << msg;
  }
}

TEST(Training, StructuralErrors) {
  ShapePrior p = make_prior(small_arch(), "sphere", 2, 1);
  EXPECT_THROW(fit(p, std::vector<ShapeSampleSet>{}, quick(1), LossWeights{}), StructuralError);
  const auto one = sphere_family(1, 100);
  EXPECT_THROW(fit(p, one, quick(1), LossWeights{}), StructuralError);  // 2 latents, 1 shape
  TrainConfig bad = quick(1);
  bad.lr = 0;
  EXPECT_THROW(bad.validate(), StructuralError);
  bad = quick(1);
  bad.surface_points = 0;
  EXPECT_THROW(bad.validate(), StructuralError);
}

TEST(Training, HistoryCsv) {
  std::vector<EpochRecord> h(2);
  h[0].terms.total = 3.5;
  h[1].epoch = 1;
  h[1].terms.sdf_value = 0.25;
  std::ostringstream os;
  write_history_csv(os, h);
  const std::string s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), std::string("epoch,") + LossTerms::kCsvHeader);
  EXPECT_NE(s.find("\n0,0,0,0,0,0,0,0,0,3.5\n"), std::string::npos) << s;
  EXPECT_NE(s.find("\n1,0.25,"), std::string::npos) << s;
}

TEST(Training, LatentInitModes) {
  ShapePrior p = make_prior(small_arch(), "sphere", 3, 1);
  p.latents[0].z.setConstant(1.0);
  p.latents[1].z.setConstant(2.0);
  p.latents[2].z.setConstant(3.0);
  EXPECT_TRUE(initial_latent(p, LatentInit::Zero, 0).isZero());
  EXPECT_TRUE(initial_latent(p, LatentInit::Mean, 0).isApproxToConstant(2.0, 1e-14));
  const auto a = initial_latent(p, LatentInit::Random, 9), b = initial_latent(p, LatentInit::Random, 9);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, initial_latent(p, LatentInit::Random, 10));
  const auto g = LatentDistribution::fit(p);
  EXPECT_NEAR(g.stddev[0], std::sqrt(2.0 / 3.0), 1e-14);
  EXPECT_EQ(latent_init_from_string("random"), LatentInit::Random);
  EXPECT_THROW(latent_init_from_string("gaussian"), StructuralError);
}

TEST(Training, LatentFitLowersLossWithFrozenNetworks) {
  const auto data = sphere_family(3, 400);
  ShapePrior p = make_prior(small_arch(), "sphere", 2, 8);
  TrainConfig c = quick(20);
  fit(p, std::span(data).first(2), c, LossWeights{});
  const ShapePrior frozen = p;
  LatentFitConfig lc;
  lc.iterations = 40;
  lc.surface_points = 200;
  lc.free_points = 200;
  const auto r = fit_latent(p, data[2], lc, LossWeights{});
  ASSERT_EQ(r.losses.size(), 40u);
  EXPECT_LT(r.losses.back(), r.losses.front());
  EXPECT_TRUE(same_params(p, frozen));
}
