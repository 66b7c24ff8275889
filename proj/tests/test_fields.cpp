#include "test_support.hpp"

#include <Eigen/SVD>
#include <gtest/gtest.h>

using namespace dif;
using dif::testing::central_diff;
using dif::testing::rel_err;

namespace {

PriorArch small_arch() {
  PriorArch a;
  a.latent_dim = 8;
  a.template_hidden = {16, 16};
  a.deform_hidden = {16, 16};
  a.hyper_hidden = 12;
  return a;
}

void zero_network(MlpParams& p) { p.set_zero(); }

}  // namespace

TEST(Fields, ZeroedTemplateIsZeroField) {
  ShapePrior prior = make_prior(small_arch(), "test", 1, 1);
  prior.templ.layers.back().weight.setZero();
  prior.templ.layers.back().bias.setZero();
  auto rng = make_rng(1, "pts");
  for (int i = 0; i < 10; ++i) {
    const FieldEval e = template_eval(prior, uniform_in_cube(rng));
    EXPECT_EQ(e.value, 0.0);
    EXPECT_EQ(e.spatial_grad, Vec3::Zero());
  }
}

TEST(Fields, TemplateGradientMatchesFiniteDifferences) {
  const ShapePrior prior = make_prior(small_arch(), "test", 1, 2);
  auto rng = make_rng(2, "pts");
  for (int i = 0; i < 20; ++i) {
    const Vec3 x = uniform_in_cube(rng);
    const FieldEval e = template_eval(prior, x);
    const auto fd = central_diff([&](const Eigen::VectorXd& y) { return evaluate(prior.templ, y)(0, 0); },
                                 Eigen::VectorXd(x));
    EXPECT_LT(rel_err(e.spatial_grad, fd), 1e-4);
  }
}

TEST(Fields, ZeroLatentIsolatesHyperBiases) {
  // Hidden hypernetwork biases start at zero, so relu(W z + 0) vanishes at z = 0.
  const ShapePrior prior = make_prior(small_arch(), "test", 1, 3);
  const DeformWeights w = hyper_weights(prior, Eigen::VectorXd::Zero(8));
  for (std::size_t l = 0; l < prior.hyper.size(); ++l) {
    const Eigen::VectorXd& b = prior.hyper[l].layers.back().bias;
    const Layer& d = w.net.layers[l];
    for (Eigen::Index i = 0; i < d.out_dim(); ++i) {
      for (Eigen::Index j = 0; j < d.in_dim(); ++j) EXPECT_EQ(d.weight(i, j), b[i * d.in_dim() + j]);
      EXPECT_EQ(d.bias[i], b[d.out_dim() * d.in_dim() + i]);
    }
  }
}

TEST(Fields, HyperWeightsAreDeterministic) {
  const ShapePrior prior = make_prior(small_arch(), "test", 2, 4);
  const DeformWeights a = hyper_weights(prior, prior.latents[1].z);
  const DeformWeights b = hyper_weights(prior, prior.latents[1].z);
  for (std::size_t l = 0; l < a.net.layers.size(); ++l) {
    EXPECT_EQ(a.net.layers[l].weight, b.net.layers[l].weight);
    EXPECT_EQ(a.net.layers[l].bias, b.net.layers[l].bias);
  }
}

TEST(Fields, HyperWeightsAreLipschitzInLatent) {
  ShapePrior prior = make_prior(small_arch(), "test", 1, 5);
  auto rng = make_rng(5, "lip");
  for (auto& h : prior.hyper) h.for_each_block([&](double* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) d[i] += uniform(rng, -0.3, 0.3);
  });
  Eigen::VectorXd z = prior.latents[0].z;
  Eigen::VectorXd z2 = z;
  z2[3] += 1e-6;
  const DeformWeights a = hyper_weights(prior, z);
  const DeformWeights b = hyper_weights(prior, z2);
  for (std::size_t l = 0; l < prior.hyper.size(); ++l) {
    double bound = 1e-6;
    for (const Layer& hl : prior.hyper[l].layers)
      bound *= Eigen::JacobiSVD<Eigen::MatrixXd>(hl.weight).singularValues()[0];
    const double diff = std::sqrt((a.net.layers[l].weight - b.net.layers[l].weight).squaredNorm() +
                                  (a.net.layers[l].bias - b.net.layers[l].bias).squaredNorm());
    EXPECT_LE(diff, bound * (1 + 1e-9)) << "layer " << l;
  }
}

TEST(Fields, HyperRejectsWrongLatentDimension) {
  const ShapePrior prior = make_prior(small_arch(), "test", 1, 6);
  EXPECT_THROW(hyper_weights(prior, Eigen::VectorXd::Zero(7)), StructuralError);
  EXPECT_THROW(instance_sdf(prior, Eigen::VectorXd::Zero(9), Vec3::Zero()), StructuralError);
}

TEST(Fields, DeformWithZeroOutputLayer) {
  const ShapePrior prior = make_prior(small_arch(), "test", 1, 7);
  // The output layer of D starts at zero for z = 0.
  const DeformWeights w = hyper_weights(prior, Eigen::VectorXd::Zero(8));
  const DeformEval e = deform_eval(w, Vec3(0.2, -0.4, 0.1));
  EXPECT_EQ(e.v, Vec3::Zero());
  EXPECT_EQ(e.delta_s, 0.0);
  EXPECT_EQ(e.jac_v, Mat3::Zero());
}

TEST(Fields, DeformJacobianMatchesFiniteDifferences) {
  ShapePrior prior = dif::testing::tiny_prior(8);
  const DeformWeights w = hyper_weights(prior, prior.latents[0].z);
  auto rng = make_rng(8, "pts");
  for (int t = 0; t < 20; ++t) {
    const Vec3 x = uniform_in_cube(rng);
    const DeformEval e = deform_eval(w, x);
    for (int i = 0; i < 3; ++i) {
      const auto fd = central_diff([&](const Eigen::VectorXd& y) { return evaluate(w.net, y)(i, 0); },
                                   Eigen::VectorXd(x));
      EXPECT_LT(rel_err(e.jac_v.row(i).transpose(), fd), 1e-4);
    }
  }
}

TEST(Fields, LinearDeformJacobianIsExact) {
  Mat3 a;
  a << 0.1, -0.2, 0.3, 0.05, 0.4, -0.1, 0.2, 0.0, -0.3;
  DeformWeights w;
  Layer l;
  l.weight = Eigen::MatrixXd::Zero(4, 3);
  l.weight.topRows(3) = a;
  l.bias = Eigen::VectorXd::Zero(4);
  w.net.layers.push_back(l);
  const DeformEval e = deform_eval(w, Vec3(0.7, -0.1, 0.2));
  EXPECT_EQ(e.jac_v, a);
}

TEST(Fields, IdentityDeformationGivesTemplate) {
  ShapePrior prior = make_prior(small_arch(), "test", 1, 9);
  zero_network(prior.hyper.back());
  auto rng = make_rng(9, "pts");
  for (int i = 0; i < 50; ++i) {
    const Vec3 x = uniform_in_cube(rng);
    const FieldEval a = instance_sdf(prior, prior.latents[0].z, x);
    const FieldEval b = template_eval(prior, x);
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.spatial_grad, b.spatial_grad);
  }
}

TEST(Fields, ConstantCorrectionShiftsTemplate) {
  ShapePrior prior = make_prior(small_arch(), "test", 1, 10);
  MlpParams& last = prior.hyper.back();
  zero_network(last);
  last.layers.back().bias[last.out_dim() - 1] = 0.125;  // bias of the ds output
  auto rng = make_rng(10, "pts");
  for (int i = 0; i < 20; ++i) {
    const Vec3 x = uniform_in_cube(rng);
    EXPECT_DOUBLE_EQ(instance_sdf(prior, prior.latents[0].z, x).value, template_eval(prior, x).value + 0.125);
  }
}

TEST(Fields, ComposedGradientMatchesFiniteDifferences) {
  ShapePrior prior = make_prior(small_arch(), "test", 4, 11);
  auto rng = make_rng(11, "pts");
  // Give the deformation real magnitude.
  prior.hyper.back().layers.back().bias = 0.05 * Eigen::VectorXd::Random(prior.hyper.back().out_dim());
  for (auto& h : prior.hyper) h.layers.back().weight *= 0.5;
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd z(8);
    for (int k = 0; k < 8; ++k) z[k] = uniform(rng, -1.0, 1.0);
    const Vec3 x = uniform_in_cube(rng);
    const FieldEval e = instance_sdf(prior, z, x);
    const DeformWeights w = hyper_weights(prior, z);
    const auto fd = central_diff(
        [&](const Eigen::VectorXd& y) { return instance_sdf_values(prior.templ, w, Eigen::Matrix3Xd(y))[0]; },
        Eigen::VectorXd(x));
    EXPECT_LT(rel_err(e.spatial_grad, fd), 1e-4) << "trial " << i;
  }
}

TEST(Fields, PriorCheckpointRoundTrip) {
  const ShapePrior prior = make_prior(small_arch(), "car", 3, 12);
  const auto path = std::filesystem::temp_directory_path() / "dif_prior_test.bin";
  save_prior(path, prior);
  const ShapePrior q = load_prior(path, prior.arch, "car");
  ASSERT_EQ(q.latents.size(), 3u);
  EXPECT_EQ(q.latents[2].z, prior.latents[2].z);
  const Vec3 x(0.1, 0.2, 0.3);
  EXPECT_EQ(instance_sdf(q, q.latents[1].z, x).value, instance_sdf(prior, prior.latents[1].z, x).value);
  std::filesystem::remove(path);
}
