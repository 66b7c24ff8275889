#pragma once

// Training objective of the deformed implicit field.
//
// Per shape, with s = composed SDF and all reductions being means over the
// respective point set:
//   L_sdf    = w1 |s - s_gt|          over surface + free points
//            + w2 (1 - cos(grad s, n)) over surface points
//            + w3 | |grad s| - 1 |    over surface + free points
//            + w4 exp(-delta |s|)     over free points
//   L_normal = 1 - cos(grad T(x + v), n) over surface points
//   L_smooth = |J_v|_F                over free points
//   L_c      = |ds|                   over free points
//   L_z      = |z|_2
//   L        = L_sdf + l1 L_normal + l2 L_z + l3 L_smooth + l4 L_c
// and the batch loss is the sum over shapes.

#include "dif/fields.hpp"
#include "dif/samples.hpp"

#include <span>
#include <string>

namespace dif {

struct LossWeights {
  std::array<double, 4> sdf{3e3, 1e2, 5e1, 5e2};
  double normal = 1e2;       // lambda1
  double latent = 5.0;       // lambda2
  double smooth = 1e2;       // lambda3
  double correction = 1e2;   // weighted by lambda3 as well, like the smoothness term
  double delta = 100.0;      // sharpness of the off-surface penalty

  void validate() const {
    for (double w : sdf)
      if (!(w >= 0.0)) throw StructuralError("loss weights must be non-negative");
    if (!(normal >= 0.0) || !(latent >= 0.0) || !(smooth >= 0.0) || !(correction >= 0.0))
      throw StructuralError("loss weights must be non-negative");
    if (!(delta >= 10.0)) throw StructuralError("delta must be >= 10");
  }

  /// Per-category regularization defaults (car, plane, chair analogs).
  static LossWeights for_category(const std::string& category) {
    LossWeights w;
    if (category == "plane") {
      w.latent = 2.0;
    } else if (category == "chair") {
      w.smooth = w.correction = 5e1;
    }
    return w;
  }
};

/// Unweighted value of every term plus the weighted total.
struct LossTerms {
  double sdf_value = 0, sdf_normal = 0, sdf_eikonal = 0, sdf_offsurface = 0;
  double normal = 0, latent = 0, smooth = 0, correction = 0;
  double total = 0;

  double sdf(const LossWeights& w) const {
    return w.sdf[0] * sdf_value + w.sdf[1] * sdf_normal + w.sdf[2] * sdf_eikonal + w.sdf[3] * sdf_offsurface;
  }

  double weighted(const LossWeights& w) const {
    return sdf(w) + w.normal * normal + w.latent * latent + w.smooth * smooth + w.correction * correction;
  }

  LossTerms& operator+=(const LossTerms& o) {
    sdf_value += o.sdf_value;
    sdf_normal += o.sdf_normal;
    sdf_eikonal += o.sdf_eikonal;
    sdf_offsurface += o.sdf_offsurface;
    normal += o.normal;
    latent += o.latent;
    smooth += o.smooth;
    correction += o.correction;
    total += o.total;
    return *this;
  }

  LossTerms scaled(double a) const {
    LossTerms t = *this;
    for (double* p : {&t.sdf_value, &t.sdf_normal, &t.sdf_eikonal, &t.sdf_offsurface, &t.normal, &t.latent,
                      &t.smooth, &t.correction, &t.total})
      *p *= a;
    return t;
  }

  static constexpr const char* kCsvHeader =
      "sdf_value,sdf_normal,sdf_eikonal,sdf_offsurface,normal,latent,smooth,correction,total";
};

/// 1 - cos(g, n) for unit n, with its gradient in g. A raw inner product
/// would reward gradients longer than 1 without bound; the cosine keeps the
/// term in [0, 2]. A zero gradient counts as orthogonal.
inline double cosine_gap(const Vec3& g, const Vec3& n, Vec3* dg = nullptr) {
  const double gn = g.norm();
  if (!(gn > 0.0)) {
    if (dg) dg->setZero();
    return 1.0;
  }
  const double c = g.dot(n) / gn;
  if (dg) *dg = -(n - c * g / gn) / gn;
  return 1.0 - c;
}

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// The four SDF-regression terms (unweighted) for a field given by its values
/// and spatial gradients at [surface | free] points.
struct SdfTerms {
  double value = 0, normal = 0, eikonal = 0, offsurface = 0;
};

inline SdfTerms sdf_terms(const Eigen::RowVectorXd& values, const Eigen::Matrix3Xd& grads, const ShapeSampleSet& s,
                          double delta) {
  s.validate();
  const Eigen::Index ns = s.surface_count(), nf = s.free_count(), n = ns + nf;
  if (values.size() != n || grads.cols() != n) throw StructuralError("field samples do not match the sample set");
  SdfTerms t;
  if (n == 0) throw StructuralError("empty sample batch");
  for (Eigen::Index j = 0; j < n; ++j) {
    const double gt = j < ns ? 0.0 : s.free_sdf[j - ns];
    t.value += std::abs(values[j] - gt);
    t.eikonal += std::abs(grads.col(j).norm() - 1.0);
  }
  t.value /= static_cast<double>(n);
  t.eikonal /= static_cast<double>(n);
  if (ns > 0) {
    for (Eigen::Index j = 0; j < ns; ++j) t.normal += cosine_gap(grads.col(j), s.surface_normals.col(j));
    t.normal /= static_cast<double>(ns);
  }
  if (nf > 0) {
    for (Eigen::Index j = ns; j < n; ++j) t.offsurface += std::exp(-delta * std::abs(values[j]));
    t.offsurface /= static_cast<double>(nf);
  }
  return t;
}

inline Eigen::Matrix3Xd stacked_points(const ShapeSampleSet& s) {
  Eigen::Matrix3Xd x(3, s.surface_count() + s.free_count());
  x << s.surface_points, s.free_points;
  return x;
}

/// Loss terms of one shape and, optionally, their adjoints. The adjoint
/// overload fills `adj` and returns dL/dz for the latent regularizer.
inline LossTerms shape_loss_terms(const ComposedForward& f, const Eigen::VectorXd& z, const ShapeSampleSet& s,
                                  const LossWeights& w, ComposedAdjoint* adj = nullptr,
                                  Eigen::VectorXd* z_grad = nullptr) {
  const Eigen::Index ns = s.surface_count(), nf = s.free_count(), n = ns + nf;
  if (n == 0) throw StructuralError("empty sample batch");
  if (f.n != n) throw StructuralError("forward pass does not match sample batch");
  LossTerms t;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_s = ns > 0 ? 1.0 / static_cast<double>(ns) : 0.0;
  const double inv_f = nf > 0 ? 1.0 / static_cast<double>(nf) : 0.0;

  auto check = [&](double v, const char* term, Eigen::Index j) {
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite loss in term '") + term + "' at sample " + std::to_string(j));
  };

  for (Eigen::Index j = 0; j < n; ++j) {
    const double gt = j < ns ? 0.0 : s.free_sdf[j - ns];
    const double r = f.sdf[j] - gt;
    check(r, "sdf_value", j);
    t.sdf_value += std::abs(r) * inv_n;
    const Vec3 g = f.sdf_grad.col(j);
    const double gn = g.norm();
    check(gn, "sdf_eikonal", j);
    t.sdf_eikonal += std::abs(gn - 1.0) * inv_n;
    if (adj) {
      adj->sdf[j] += w.sdf[0] * sign0(r) * inv_n;
      if (gn > 0.0) adj->sdf_grad.col(j) += w.sdf[2] * sign0(gn - 1.0) * inv_n * g / gn;
    }
  }
  for (Eigen::Index j = 0; j < ns; ++j) {
    const Vec3 nrm = s.surface_normals.col(j);
    Vec3 da, db;
    const double a = cosine_gap(f.sdf_grad.col(j), nrm, adj ? &da : nullptr);
    const double b = cosine_gap(f.t_grad.col(j), nrm, adj ? &db : nullptr);
    check(a, "sdf_normal", j);
    check(b, "normal", j);
    t.sdf_normal += a * inv_s;
    t.normal += b * inv_s;
    if (adj) {
      adj->sdf_grad.col(j) += w.sdf[1] * inv_s * da;
      adj->t_grad.col(j) += w.normal * inv_s * db;
    }
  }
  for (Eigen::Index j = ns; j < n; ++j) {
    const double e = std::exp(-w.delta * std::abs(f.sdf[j]));
    check(e, "sdf_offsurface", j);
    t.sdf_offsurface += e * inv_f;
    const double ds = f.delta_s[j];
    check(ds, "correction", j);
    t.correction += std::abs(ds) * inv_f;
    double fro2 = 0.0;
    for (int k = 0; k < 3; ++k) fro2 += f.jac_v_cols[k].col(j).squaredNorm();
    const double fro = std::sqrt(fro2);
    check(fro, "smooth", j);
    t.smooth += fro * inv_f;
    if (adj) {
      adj->sdf[j] += w.sdf[3] * inv_f * e * (-w.delta) * sign0(f.sdf[j]);
      adj->delta_s[j] += w.correction * inv_f * sign0(ds);
      if (fro > 0.0)
        for (int k = 0; k < 3; ++k) adj->jac_v_cols[k].col(j) += w.smooth * inv_f * f.jac_v_cols[k].col(j) / fro;
    }
  }
  const double zn = z.norm();
  check(zn, "latent", 0);
  t.latent = zn;
  if (z_grad && zn > 0.0) *z_grad += w.latent * z / zn;
  t.total = t.weighted(w);
  return t;
}

/// One shape of a training batch: index into the prior's latent table plus
/// the sampled points.
struct BatchItem {
  std::size_t latent_index = 0;
  const ShapeSampleSet* samples = nullptr;
};

/// Gradients with respect to every network of a prior, in the order
/// [template, hyper_0, ..., hyper_{L-1}].
inline std::vector<MlpParams> zero_prior_grads(const ShapePrior& prior) {
  std::vector<MlpParams> g;
  g.push_back(prior.templ.zeros_like());
  for (const auto& h : prior.hyper) g.push_back(h.zeros_like());
  return g;
}

/// Batch loss (sum over shapes) and exact gradients for the template, the
/// hypernetworks and each latent in the batch. `terms` receives the summed
/// per-term values.
inline GradientBundle loss_and_grads(const ShapePrior& prior, std::span<const BatchItem> batch, const LossWeights& w,
                                     LossTerms* terms = nullptr, std::span<const Eigen::VectorXd> latents_override = {}) {
  if (batch.empty()) throw StructuralError("empty batch");
  GradientBundle out;
  out.param_grads = zero_prior_grads(prior);
  LossTerms sum;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const BatchItem& item = batch[b];
    if (!item.samples) throw StructuralError("batch item without samples");
    const Eigen::VectorXd& z = latents_override.empty() ? prior.latents.at(item.latent_index).z
                                                        : latents_override[b];
    const DeformWeights dw = hyper_weights(prior, z);
    const Eigen::Matrix3Xd x = stacked_points(*item.samples);
    const ComposedForward f = composed_forward(prior, dw, x);
    ComposedAdjoint adj(f.n);
    Eigen::VectorXd zg = Eigen::VectorXd::Zero(z.size());
    LossTerms t;
    try {
      t = shape_loss_terms(f, z, *item.samples, w, &adj, &zg);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (batch item " + std::to_string(b) + ", latent " +
                         std::to_string(item.latent_index) + ")");
    }
    MlpParams dgrad = dw.net.zeros_like();
    composed_backward(prior.templ, dw, f, adj, out.param_grads[0], dgrad);
    hyper_backward(prior, z, dgrad, std::span<MlpParams>(out.param_grads).subspan(1), zg);
    out.latent_grads.push_back(std::move(zg));
    sum += t;
  }
  out.loss = sum.total;
  if (terms) *terms = sum;
  if (!out.all_finite()) throw NumericError("non-finite gradient in batch");
  return out;
}

// Value-only access to individual terms, mainly for diagnostics and tests.

inline LossTerms evaluate_terms(const ShapePrior& prior, const Eigen::VectorXd& z, const ShapeSampleSet& s,
                                const LossWeights& w) {
  const DeformWeights dw = hyper_weights(prior, z);
  const ComposedForward f = composed_forward(prior, dw, stacked_points(s));
  return shape_loss_terms(f, z, s, w);
}

inline double loss_sdf(const ShapePrior& prior, const Eigen::VectorXd& z, const ShapeSampleSet& s,
                       const LossWeights& w) {
  return evaluate_terms(prior, z, s, w).sdf(w);
}

inline double loss_normal(const ShapePrior& prior, const Eigen::VectorXd& z, const ShapeSampleSet& s) {
  return evaluate_terms(prior, z, s, LossWeights{}).normal;
}

inline double loss_smooth(const DeformWeights& dw, const Eigen::Matrix3Xd& free_points) {
  if (free_points.cols() == 0) return 0.0;
  const Tape t = forward(dw.net, free_points, true);
  const Eigen::Index n = free_points.cols();
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double fro2 = 0.0;
    for (int k = 0; k < 3; ++k) fro2 += t.output.block(0, (k + 1) * n + j, 3, 1).squaredNorm();
    sum += std::sqrt(fro2);
  }
  return sum / static_cast<double>(n);
}

inline double loss_correction(const DeformWeights& dw, const Eigen::Matrix3Xd& free_points) {
  if (free_points.cols() == 0) return 0.0;
  return evaluate(dw.net, free_points).row(3).cwiseAbs().mean();
}

inline double loss_latent(const Eigen::VectorXd& z) { return z.norm(); }

inline double total_loss(const LossTerms& t, const LossWeights& w) { return t.weighted(w); }

}  // namespace dif
