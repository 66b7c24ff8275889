#pragma once

// Deformed implicit field: a category template T shared by all instances, a
// deformation network D whose weights are predicted from a latent code by a
// hypernetwork, and their composition s(x) = T(x + v(x)) + ds(x) where
// D(x) = (v, ds).

#include "dif/autodiff.hpp"
#include "dif/container.hpp"

#include <span>
#include <string>
#include <vector>

namespace dif {

struct LatentCode {
  Eigen::VectorXd z;
  int instance_id = -1;
};

/// Weights of the deformation network D: R^3 -> R^4 = (v, ds).
struct DeformWeights {
  SirenParams net;
};

struct PriorArch {
  int latent_dim = 128;
  std::vector<int> template_hidden{128, 128, 128};
  std::vector<int> deform_hidden{128, 128, 128};
  int hyper_hidden = 256;
  double omega0 = 30.0;
  double latent_init_std = 0.01;
  double hyper_out_scale = 0.1;  // init scale of each hypernetwork's output weights
};

struct ShapePrior {
  std::string category;
  PriorArch arch;
  SirenParams templ;
  std::vector<MlpParams> hyper;  // hyper[l] predicts flattened (W, b) of deformation layer l
  MlpParams deform_layout;       // layer shapes, activations and frequencies of D
  std::vector<LatentCode> latents;

  int latent_dim() const { return arch.latent_dim; }

  void validate() const {
    templ.validate();
    if (templ.in_dim() != 3 || templ.out_dim() != 1) throw StructuralError("template must map R^3 -> R");
    if (deform_layout.in_dim() != 3 || deform_layout.out_dim() != 4)
      throw StructuralError("deformation network must map R^3 -> R^4");
    if (hyper.size() != deform_layout.layers.size())
      throw StructuralError("need one hypernetwork per deformation layer");
    for (std::size_t l = 0; l < hyper.size(); ++l) {
      hyper[l].validate();
      const Layer& d = deform_layout.layers[l];
      if (hyper[l].in_dim() != arch.latent_dim)
        throw StructuralError("hypernetwork " + std::to_string(l) + " input does not match latent dimension");
      if (hyper[l].out_dim() != d.out_dim() * d.in_dim() + d.out_dim())
        throw StructuralError("hypernetwork " + std::to_string(l) + " output size does not match deformation layer");
    }
    for (const auto& z : latents)
      if (z.z.size() != arch.latent_dim) throw StructuralError("latent table entry has wrong dimension");
  }
};

namespace detail {

inline Eigen::VectorXd flatten_layer(const Layer& l) {
  const Eigen::Index in = l.in_dim(), out = l.out_dim();
  Eigen::VectorXd v(out * in + out);
  for (Eigen::Index i = 0; i < out; ++i)
    for (Eigen::Index j = 0; j < in; ++j) v[i * in + j] = l.weight(i, j);
  v.tail(out) = l.bias;
  return v;
}

inline void unflatten_layer(const Eigen::Ref<const Eigen::VectorXd>& v, Layer& l) {
  const Eigen::Index in = l.in_dim(), out = l.out_dim();
  for (Eigen::Index i = 0; i < out; ++i)
    for (Eigen::Index j = 0; j < in; ++j) l.weight(i, j) = v[i * in + j];
  l.bias = v.tail(out);
}

}  // namespace detail

/// Builds an untrained prior with `instances` latent codes drawn from N(0, std^2).
inline ShapePrior make_prior(const PriorArch& arch, std::string category, std::size_t instances,
                             std::uint64_t seed) {
  ShapePrior p;
  p.category = std::move(category);
  p.arch = arch;
  auto rng = make_rng(seed, "init");
  p.templ = make_siren(3, arch.template_hidden, 1, arch.omega0, rng);
  p.deform_layout = make_siren(3, arch.deform_hidden, 4, arch.omega0, rng);
  for (std::size_t l = 0; l < p.deform_layout.layers.size(); ++l) {
    Layer& d = p.deform_layout.layers[l];
    const bool last = l + 1 == p.deform_layout.layers.size();
    const auto out = static_cast<int>(d.out_dim() * d.in_dim() + d.out_dim());
    MlpParams h = make_relu_mlp(arch.latent_dim, {arch.hyper_hidden}, out, rng);
    // Predicted weights start at the sinusoidal init of the target layer with a
    // small latent-dependent perturbation; the output layer of D starts at zero.
    h.layers.back().weight *= arch.hyper_out_scale;
    if (last) {
      d.weight.setZero();
      d.bias.setZero();
      // The correction output ds starts identically zero for every latent;
      // its heavy magnitude penalty would otherwise drive all codes to zero.
      const Eigen::Index in = d.in_dim();
      h.layers.back().weight.middleRows(3 * in, in).setZero();
      h.layers.back().weight.row(4 * in + 3).setZero();
    }
    h.layers.back().bias = detail::flatten_layer(d);
    p.hyper.push_back(std::move(h));
  }
  for (Layer& d : p.deform_layout.layers) {
    d.weight.setZero();
    d.bias.setZero();
  }
  for (std::size_t i = 0; i < instances; ++i) {
    LatentCode z;
    z.instance_id = static_cast<int>(i);
    z.z.resize(arch.latent_dim);
    for (int k = 0; k < arch.latent_dim; ++k) z.z[k] = arch.latent_init_std * gaussian(rng);
    p.latents.push_back(std::move(z));
  }
  p.validate();
  return p;
}

/// Deformation weights for latent code z.
inline DeformWeights hyper_weights(const ShapePrior& prior, const Eigen::VectorXd& z) {
  if (z.size() != prior.latent_dim())
    throw StructuralError("latent dimension " + std::to_string(z.size()) + " does not match prior dimension " +
                          std::to_string(prior.latent_dim()));
  DeformWeights w{prior.deform_layout};
  for (std::size_t l = 0; l < prior.hyper.size(); ++l) {
    const Eigen::VectorXd flat = evaluate(prior.hyper[l], z);
    detail::unflatten_layer(flat, w.net.layers[l]);
  }
  return w;
}

/// Pulls gradients on the deformation weights back through the hypernetworks.
/// Accumulates into `hyper_grads` and `z_grad`.
inline void hyper_backward(const ShapePrior& prior, const Eigen::VectorXd& z, const MlpParams& deform_grad,
                           std::span<MlpParams> hyper_grads, Eigen::VectorXd& z_grad) {
  for (std::size_t l = 0; l < prior.hyper.size(); ++l) {
    const Tape t = forward(prior.hyper[l], z, false);
    const Eigen::VectorXd adj = detail::flatten_layer(deform_grad.layers[l]);
    Eigen::MatrixXd zbar;
    backward(prior.hyper[l], t, adj, hyper_grads[l], &zbar);
    z_grad += zbar.col(0);
  }
}

inline FieldEval template_eval(const ShapePrior& prior, const Vec3& x) { return eval_with_spatial_grad(prior.templ, x); }

struct DeformEval {
  Vec3 v = Vec3::Zero();
  double delta_s = 0.0;
  Mat3 jac_v = Mat3::Zero();  // jac_v(i, k) = dv_i / dx_k
  Vec3 grad_delta_s = Vec3::Zero();
};

inline DeformEval deform_eval(const DeformWeights& w, const Vec3& x) {
  if (w.net.in_dim() != 3 || w.net.out_dim() != 4) throw StructuralError("deformation network must map R^3 -> R^4");
  const Tape t = forward(w.net, x, true);
  DeformEval e;
  e.v = t.output.block<3, 1>(0, 0);
  e.delta_s = t.output(3, 0);
  for (int k = 0; k < 3; ++k) {
    e.jac_v.col(k) = t.output.block<3, 1>(0, k + 1);
    e.grad_delta_s[k] = t.output(3, k + 1);
  }
  return e;
}

/// Batched forward pass of the composed field, keeping everything the loss
/// terms and the backward pass need.
struct ComposedForward {
  Eigen::Index n = 0;
  Tape deform;
  Tape templ;
  Eigen::Matrix3Xd points;
  Eigen::Matrix3Xd v;
  Eigen::RowVectorXd delta_s;
  std::array<Eigen::Matrix3Xd, 3> jac_v_cols;  // column k of jac_v for every point
  Eigen::Matrix3Xd grad_delta_s;
  Eigen::RowVectorXd t_value;   // T(x + v)
  Eigen::Matrix3Xd t_grad;      // grad T at x + v
  Eigen::RowVectorXd sdf;       // composed value
  Eigen::Matrix3Xd sdf_grad;    // composed spatial gradient
};

/// Adjoints of the quantities exposed by ComposedForward (zero-initialized).
struct ComposedAdjoint {
  Eigen::RowVectorXd sdf;
  Eigen::Matrix3Xd sdf_grad;
  Eigen::Matrix3Xd t_grad;
  std::array<Eigen::Matrix3Xd, 3> jac_v_cols;
  Eigen::RowVectorXd delta_s;

  explicit ComposedAdjoint(Eigen::Index n)
      : sdf(Eigen::RowVectorXd::Zero(n)),
        sdf_grad(Eigen::Matrix3Xd::Zero(3, n)),
        t_grad(Eigen::Matrix3Xd::Zero(3, n)),
        jac_v_cols{Eigen::Matrix3Xd::Zero(3, n), Eigen::Matrix3Xd::Zero(3, n), Eigen::Matrix3Xd::Zero(3, n)},
        delta_s(Eigen::RowVectorXd::Zero(n)) {}
};

inline ComposedForward composed_forward(const SirenParams& templ, const DeformWeights& w,
                                        const Eigen::Matrix3Xd& x) {
  ComposedForward f;
  const Eigen::Index n = x.cols();
  f.n = n;
  f.points = x;
  f.deform = forward(w.net, x, true);
  const Eigen::MatrixXd& d = f.deform.output;
  f.v = d.topLeftCorner(3, n);
  f.delta_s = d.row(3).head(n);
  f.grad_delta_s.resize(3, n);
  for (int k = 0; k < 3; ++k) {
    f.jac_v_cols[k] = d.block(0, (k + 1) * n, 3, n);
    f.grad_delta_s.row(k) = d.row(3).segment((k + 1) * n, n);
  }
  const Eigen::Matrix3Xd y = x + f.v;
  f.templ = forward(templ, y, true);
  f.t_value = f.templ.output.row(0).head(n);
  f.t_grad.resize(3, n);
  for (int k = 0; k < 3; ++k) f.t_grad.row(k) = f.templ.output.row(0).segment((k + 1) * n, n);
  f.sdf = f.t_value + f.delta_s;
  // grad s = (I + J_v)^T grad T + grad ds
  f.sdf_grad.resize(3, n);
  for (int k = 0; k < 3; ++k)
    f.sdf_grad.row(k) = f.t_grad.row(k) + (f.jac_v_cols[k].array() * f.t_grad.array()).colwise().sum().matrix() +
                        f.grad_delta_s.row(k);
  return f;
}

inline ComposedForward composed_forward(const ShapePrior& prior, const DeformWeights& w, const Eigen::Matrix3Xd& x) {
  return composed_forward(prior.templ, w, x);
}

/// Backward pass of the composed field. Accumulates parameter gradients for
/// the template and the deformation network; optionally returns dL/dx.
inline void composed_backward(const SirenParams& templ, const DeformWeights& w, const ComposedForward& f,
                              const ComposedAdjoint& adj, MlpParams& templ_grad, MlpParams& deform_grad,
                              Eigen::Matrix3Xd* x_adj = nullptr) {
  const Eigen::Index n = f.n;
  Eigen::Matrix3Xd gbar = adj.sdf_grad + adj.t_grad;
  for (int k = 0; k < 3; ++k) gbar += f.jac_v_cols[k].cwiseProduct(adj.sdf_grad.row(k).replicate(3, 1));

  Eigen::MatrixXd t_adj(1, 4 * n);
  t_adj.row(0).head(n) = adj.sdf;
  for (int k = 0; k < 3; ++k) t_adj.row(0).segment((k + 1) * n, n) = gbar.row(k);
  Eigen::MatrixXd ybar;
  backward(templ, f.templ, t_adj, templ_grad, &ybar);

  Eigen::MatrixXd d_adj(4, 4 * n);
  d_adj.topLeftCorner(3, n) = ybar;
  d_adj.row(3).head(n) = adj.sdf + adj.delta_s;
  for (int k = 0; k < 3; ++k) {
    d_adj.block(0, (k + 1) * n, 3, n) =
        adj.jac_v_cols[k] + f.t_grad.cwiseProduct(adj.sdf_grad.row(k).replicate(3, 1));
    d_adj.row(3).segment((k + 1) * n, n) = adj.sdf_grad.row(k);
  }
  Eigen::MatrixXd xbar;
  backward(w.net, f.deform, d_adj, deform_grad, x_adj ? &xbar : nullptr);
  if (x_adj) *x_adj = ybar + xbar;
}

/// Composed SDF value at many points (no derivatives).
inline Eigen::RowVectorXd instance_sdf_values(const SirenParams& templ, const DeformWeights& w,
                                              const Eigen::Matrix3Xd& x) {
  const Eigen::MatrixXd d = evaluate(w.net, x);
  const Eigen::Matrix3Xd y = x + d.topRows(3);
  return evaluate(templ, y).row(0) + d.row(3);
}

inline FieldEval instance_sdf(const ShapePrior& prior, const Eigen::VectorXd& z, const Vec3& x) {
  const DeformWeights w = hyper_weights(prior, z);
  const ComposedForward f = composed_forward(prior, w, Eigen::Matrix3Xd(x));
  return {f.sdf[0], f.sdf_grad.col(0)};
}

inline void save_prior(const std::filesystem::path& path, const ShapePrior& p) {
  Container c;
  put_network(c, "template.", p.templ);
  put_network(c, "deform_layout.", p.deform_layout);
  for (std::size_t l = 0; l < p.hyper.size(); ++l) put_network(c, "hyper" + std::to_string(l) + ".", p.hyper[l]);
  Eigen::MatrixXd lat(static_cast<Eigen::Index>(p.latents.size()), p.latent_dim());
  for (std::size_t i = 0; i < p.latents.size(); ++i) lat.row(static_cast<Eigen::Index>(i)) = p.latents[i].z.transpose();
  c.put("latents", lat);
  write_container(path, c);
}

/// Loads weights and latents; `arch` and `category` come from the JSON sidecar.
inline ShapePrior load_prior(const std::filesystem::path& path, const PriorArch& arch, std::string category) {
  const Container c = read_container(path);
  ShapePrior p;
  p.arch = arch;
  p.category = std::move(category);
  p.templ = get_network(c, "template.");
  p.deform_layout = get_network(c, "deform_layout.");
  for (std::size_t l = 0; l < p.deform_layout.layers.size(); ++l)
    p.hyper.push_back(get_network(c, "hyper" + std::to_string(l) + "."));
  const Eigen::MatrixXd& lat = c.get("latents");
  if (lat.rows() > 0 && lat.cols() != arch.latent_dim) throw DataError("latent table width does not match sidecar");
  for (Eigen::Index i = 0; i < lat.rows(); ++i) p.latents.push_back({lat.row(i).transpose(), static_cast<int>(i)});
  p.validate();
  return p;
}

}  // namespace dif
