#pragma once

// Shared fixtures and finite-difference oracles for the unit tests. The
// oracles only call value-level APIs, never the gradient code they check.

#include "dif/losses.hpp"

#include <functional>

namespace dif::testing {

/// Central differences of f at x along every coordinate.
inline Eigen::VectorXd central_diff(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x,
                                    double h = 1e-5) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Norm-wise relative error with a floor on the reference magnitude.
inline double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& ref, double floor = 1e-8) {
  return (a - ref).norm() / std::max(ref.norm(), floor);
}

inline Eigen::VectorXd flatten(const MlpParams& p) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(p.param_count()));
  Eigen::Index o = 0;
  p.for_each_block([&](const double* d, Eigen::Index n) {
    v.segment(o, n) = Eigen::Map<const Eigen::VectorXd>(d, n);
    o += n;
  });
  return v;
}

inline void unflatten(MlpParams& p, const Eigen::VectorXd& v) {
  Eigen::Index o = 0;
  p.for_each_block([&](double* d, Eigen::Index n) {
    Eigen::Map<Eigen::VectorXd>(d, n) = v.segment(o, n);
    o += n;
  });
}

/// Prior with at most 200 parameters, all perturbed away from the
/// structured init so every path carries gradient.
inline ShapePrior tiny_prior(std::uint64_t seed, double omega0 = 30.0) {
  PriorArch a;
  a.latent_dim = 2;
  a.template_hidden = {4};
  a.deform_hidden = {4};
  a.hyper_hidden = 3;
  a.omega0 = omega0;
  ShapePrior p = make_prior(a, "tiny", 2, seed);
  auto rng = make_rng(seed, "perturb");
  for (MlpParams* net : {&p.templ, &p.hyper[0], &p.hyper[1]})
    net->for_each_block([&](double* d, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) d[i] += uniform(rng, -0.1, 0.1);
    });
  for (auto& l : p.latents)
    for (Eigen::Index k = 0; k < l.z.size(); ++k) l.z[k] = uniform(rng, -1.0, 1.0);
  return p;
}

/// Random supervision in the unit cube with unit normals.
inline ShapeSampleSet random_samples(std::uint64_t seed, Eigen::Index ns, Eigen::Index nf) {
  auto rng = make_rng(seed, "samples");
  ShapeSampleSet s;
  s.surface_points.resize(3, ns);
  s.surface_normals.resize(3, ns);
  s.free_points.resize(3, nf);
  s.free_sdf.resize(nf);
  for (Eigen::Index i = 0; i < ns; ++i) {
    s.surface_points.col(i) = uniform_in_cube(rng, 0.8);
    s.surface_normals.col(i) = random_unit_vector(rng);
  }
  for (Eigen::Index i = 0; i < nf; ++i) {
    s.free_points.col(i) = uniform_in_cube(rng);
    s.free_sdf[i] = uniform(rng, -0.5, 0.5);
  }
  return s;
}

}  // namespace dif::testing
