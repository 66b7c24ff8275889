#pragma once

// Differentiable evaluation of small fully-connected networks.
//
// Each layer computes act(omega * (W h + b)). Alongside the activations the
// forward pass carries the Jacobian of every activation with respect to the
// network input, so a network evaluated on points x yields both f(x) and
// df/dx. The backward pass differentiates that augmented computation, which
// gives exact parameter gradients of losses built from f and df/dx.
//
// Batches are stored as matrices of shape (width, blocks * n): block 0 holds
// values for the n points, block 1 + k holds the derivative w.r.t. input
// coordinate k. Value-only passes use a single block.

#include "dif/common.hpp"

#include <array>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

namespace dif {

enum class Activation : std::uint32_t { Linear = 0, Sine = 1, Relu = 2 };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Sine: return "sine";
    case Activation::Relu: return "relu";
  }
  return "?";
}

struct Layer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
  Activation act = Activation::Linear;
  double omega = 1.0;      // frequency scale for sine layers

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

/// Weights of a fully-connected network. Also used as the container for
/// parameter gradients, which share the exact same shapes.
struct MlpParams {
  std::vector<Layer> layers;

  Eigen::Index in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Eigen::Index out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  void validate() const {
    if (layers.empty()) throw StructuralError("network has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const Layer& l = layers[k];
      if (l.bias.size() != l.out_dim())
        throw StructuralError("layer " + std::to_string(k) + ": bias size does not match weight rows");
      if (k > 0 && layers[k - 1].out_dim() != l.in_dim())
        throw StructuralError("layer " + std::to_string(k) + ": input width " + std::to_string(l.in_dim()) +
                              " does not chain with previous output " +
                              std::to_string(layers[k - 1].out_dim()));
      if (!(l.omega > 0.0)) throw StructuralError("layer " + std::to_string(k) + ": omega must be > 0");
      if (!l.weight.allFinite() || !l.bias.allFinite())
        throw NumericError("layer " + std::to_string(k) + ": non-finite parameters");
    }
  }

  MlpParams zeros_like() const {
    MlpParams z = *this;
    z.set_zero();
    return z;
  }

  void set_zero() {
    for (auto& l : layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }

  /// this += a * other (shapes must match).
  void axpy(double a, const MlpParams& other) {
    for (std::size_t k = 0; k < layers.size(); ++k) {
      layers[k].weight += a * other.layers[k].weight;
      layers[k].bias += a * other.layers[k].bias;
    }
  }

  bool same_shape(const MlpParams& o) const {
    if (o.layers.size() != layers.size()) return false;
    for (std::size_t k = 0; k < layers.size(); ++k)
      if (o.layers[k].weight.rows() != layers[k].weight.rows() ||
          o.layers[k].weight.cols() != layers[k].weight.cols())
        return false;
    return true;
  }

  /// Visits every parameter block as a contiguous span (weights, then bias, per layer).
  template <class F>
  void for_each_block(F&& f) {
    for (auto& l : layers) {
      f(l.weight.data(), l.weight.size());
      f(l.bias.data(), l.bias.size());
    }
  }

  template <class F>
  void for_each_block(F&& f) const {
    for (const auto& l : layers) {
      f(l.weight.data(), l.weight.size());
      f(l.bias.data(), l.bias.size());
    }
  }

  double& param(std::size_t flat_index) {
    for (auto& l : layers) {
      const auto nw = static_cast<std::size_t>(l.weight.size());
      if (flat_index < nw) return l.weight.data()[flat_index];
      flat_index -= nw;
      const auto nb = static_cast<std::size_t>(l.bias.size());
      if (flat_index < nb) return l.bias.data()[flat_index];
      flat_index -= nb;
    }
    throw StructuralError("parameter index out of range");
  }
  double param(std::size_t flat_index) const { return const_cast<MlpParams*>(this)->param(flat_index); }
};

/// The template and deformation networks are sinusoidal MLPs.
using SirenParams = MlpParams;

/// Sinusoidal network initialization: first layer U(-1/in, 1/in), later layers
/// U(-sqrt(6/in)/omega0, sqrt(6/in)/omega0). Hidden layers use sine with
/// frequency omega0; the output layer is linear.
inline MlpParams make_siren(int in, const std::vector<int>& hidden, int out, double omega0,
                            std::mt19937_64& rng) {
  MlpParams p;
  int prev = in;
  auto add = [&](int o, Activation act, double omega, bool first) {
    Layer l;
    l.weight.resize(o, prev);
    l.bias.resize(o);
    const double bound = first ? 1.0 / prev : std::sqrt(6.0 / prev) / omega0;
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = uniform(rng, -bound, bound);
    const double bbound = 1.0 / std::sqrt(static_cast<double>(prev));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = uniform(rng, -bbound, bbound);
    l.act = act;
    l.omega = omega;
    p.layers.push_back(std::move(l));
    prev = o;
  };
  for (std::size_t k = 0; k < hidden.size(); ++k) add(hidden[k], Activation::Sine, omega0, k == 0);
  add(out, Activation::Linear, 1.0, hidden.empty());
  return p;
}

/// Rectifier MLP with He-uniform weights and zero biases.
inline MlpParams make_relu_mlp(int in, const std::vector<int>& hidden, int out, std::mt19937_64& rng) {
  MlpParams p;
  int prev = in;
  auto add = [&](int o, Activation act) {
    Layer l;
    l.weight.resize(o, prev);
    l.bias = Eigen::VectorXd::Zero(o);
    const double bound = std::sqrt(6.0 / prev);
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = uniform(rng, -bound, bound);
    l.act = act;
    p.layers.push_back(std::move(l));
    prev = o;
  };
  for (int h : hidden) add(h, Activation::Relu);
  add(out, Activation::Linear);
  return p;
}

/// Value and spatial gradient of a scalar field at one point.
struct FieldEval {
  double value = 0.0;
  Vec3 spatial_grad = Vec3::Zero();
};

/// Intermediate state recorded by a forward pass, consumed by backward().
struct Tape {
  Eigen::Index n = 0;  // points
  int blocks = 1;      // 1 (values) or 1 + input dim (values + Jacobian)
  std::vector<Eigen::MatrixXd> inputs;  // per layer: input activations (in x blocks*n)
  std::vector<Eigen::MatrixXd> pre;     // per layer: pre-activations (out x blocks*n)
  std::vector<Eigen::MatrixXd> dact;    // per layer: omega*cos(omega*a) for sine, mask for relu
  Eigen::MatrixXd output;               // out x blocks*n

  auto value() const { return output.leftCols(n); }
  auto jacobian_block(int k) const { return output.middleCols((k + 1) * n, n); }
};

namespace detail {

inline void apply_activation(const Layer& l, Eigen::Index n, int blocks, const Eigen::MatrixXd& a,
                             Eigen::MatrixXd& y, Eigen::MatrixXd* dact) {
  switch (l.act) {
    case Activation::Linear:
      y = a;
      return;
    case Activation::Sine: {
      const Eigen::ArrayXXd wa = l.omega * a.leftCols(n).array();
      const Eigen::ArrayXXd c = l.omega * wa.cos();
      y.resize(a.rows(), a.cols());
      y.leftCols(n) = wa.sin().matrix();
      for (int b = 1; b < blocks; ++b) y.middleCols(b * n, n) = (c * a.middleCols(b * n, n).array()).matrix();
      if (dact) *dact = c.matrix();
      return;
    }
    case Activation::Relu: {
      const Eigen::ArrayXXd mask = (a.leftCols(n).array() > 0.0).cast<double>();
      y.resize(a.rows(), a.cols());
      for (int b = 0; b < blocks; ++b) y.middleCols(b * n, n) = (mask * a.middleCols(b * n, n).array()).matrix();
      if (dact) *dact = mask.matrix();
      return;
    }
  }
}

}  // namespace detail

/// Forward pass over a batch of points x (in_dim x n). With `with_jacobian`
/// the Jacobian w.r.t. x is seeded with the identity and carried through.
inline Tape forward(const MlpParams& p, const Eigen::Ref<const Eigen::MatrixXd>& x, bool with_jacobian) {
  if (p.layers.empty()) throw StructuralError("network has no layers");
  if (x.rows() != p.in_dim())
    throw StructuralError("input dimension " + std::to_string(x.rows()) + " does not match network input " +
                          std::to_string(p.in_dim()));
  Tape t;
  t.n = x.cols();
  const Eigen::Index n = t.n;
  const auto in = static_cast<int>(x.rows());
  t.blocks = with_jacobian ? 1 + in : 1;
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(in, t.blocks * n);
  h.leftCols(n) = x;
  if (with_jacobian)
    for (int k = 0; k < in; ++k) h.row(k).segment((k + 1) * n, n).setOnes();

  t.inputs.reserve(p.layers.size());
  t.pre.reserve(p.layers.size());
  t.dact.resize(p.layers.size());
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const Layer& l = p.layers[li];
    Eigen::MatrixXd a(l.out_dim(), h.cols());
    a.noalias() = l.weight * h;
    a.leftCols(n).colwise() += l.bias;
    Eigen::MatrixXd y;
    detail::apply_activation(l, n, t.blocks, a, y, &t.dact[li]);
    t.inputs.push_back(std::move(h));
    t.pre.push_back(std::move(a));
    h = std::move(y);
  }
  t.output = std::move(h);
  return t;
}

/// Value-only evaluation without recording a tape.
inline Eigen::MatrixXd evaluate(const MlpParams& p, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  if (x.rows() != p.in_dim())
    throw StructuralError("input dimension " + std::to_string(x.rows()) + " does not match network input " +
                          std::to_string(p.in_dim()));
  Eigen::MatrixXd h = x;
  for (const Layer& l : p.layers) {
    Eigen::MatrixXd a(l.out_dim(), h.cols());
    a.noalias() = l.weight * h;
    a.colwise() += l.bias;
    switch (l.act) {
      case Activation::Linear: h = std::move(a); break;
      case Activation::Sine: h = (l.omega * a.array()).sin().matrix(); break;
      case Activation::Relu: h = a.cwiseMax(0.0); break;
    }
  }
  return h;
}

/// Reverse pass. `out_adj` holds dL/d(output) with the same block layout as
/// tape.output. Parameter gradients are accumulated into `grad`; if `in_adj`
/// is given it receives dL/d(input) for the value block (in_dim x n).
inline void backward(const MlpParams& p, const Tape& t, const Eigen::Ref<const Eigen::MatrixXd>& out_adj,
                     MlpParams& grad, Eigen::MatrixXd* in_adj = nullptr) {
  const Eigen::Index n = t.n;
  const int blocks = t.blocks;
  if (out_adj.rows() != t.output.rows() || out_adj.cols() != t.output.cols())
    throw StructuralError("output adjoint shape does not match forward output");
  Eigen::MatrixXd ybar = out_adj;
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const Layer& l = p.layers[li];
    const Eigen::MatrixXd& a = t.pre[li];
    Eigen::MatrixXd abar(a.rows(), a.cols());
    switch (l.act) {
      case Activation::Linear:
        abar = std::move(ybar);
        break;
      case Activation::Sine: {
        const Eigen::ArrayXXd c = t.dact[li].array();
        const Eigen::ArrayXXd s = (li + 1 < p.layers.size() ? t.inputs[li + 1] : t.output).leftCols(n).array();
        Eigen::ArrayXXd cross = Eigen::ArrayXXd::Zero(a.rows(), n);
        for (int b = 1; b < blocks; ++b) {
          cross += ybar.middleCols(b * n, n).array() * a.middleCols(b * n, n).array();
          abar.middleCols(b * n, n) = (c * ybar.middleCols(b * n, n).array()).matrix();
        }
        // d/da [omega cos(omega a)] = -omega^2 sin(omega a)
        abar.leftCols(n) = (c * ybar.leftCols(n).array() - (l.omega * l.omega) * s * cross).matrix();
        break;
      }
      case Activation::Relu: {
        const Eigen::ArrayXXd mask = t.dact[li].array();
        for (int b = 0; b < blocks; ++b)
          abar.middleCols(b * n, n) = (mask * ybar.middleCols(b * n, n).array()).matrix();
        break;
      }
    }
    Layer& g = grad.layers[li];
    g.weight.noalias() += abar * t.inputs[li].transpose();
    g.bias += abar.leftCols(n).rowwise().sum();
    if (li > 0 || in_adj) {
      Eigen::MatrixXd hbar(l.in_dim(), abar.cols());
      hbar.noalias() = l.weight.transpose() * abar;
      ybar = std::move(hbar);
    }
  }
  if (in_adj) *in_adj = ybar.leftCols(n);
}

/// Scalar field value and exact gradient w.r.t. the 3D input.
inline FieldEval eval_with_spatial_grad(const MlpParams& p, const Vec3& x) {
  if (p.in_dim() != 3) throw StructuralError("field network must take 3D input, got " + std::to_string(p.in_dim()));
  if (p.out_dim() != 1) throw StructuralError("field network must be scalar, got " + std::to_string(p.out_dim()));
  const Tape t = forward(p, x, true);
  FieldEval e;
  e.value = t.output(0, 0);
  for (int k = 0; k < 3; ++k) e.spatial_grad[k] = t.output(0, k + 1);
  return e;
}

/// Loss value with gradients for every differentiable input of a composed loss.
struct GradientBundle {
  double loss = 0.0;
  std::vector<MlpParams> param_grads;       // one per network, same shapes
  std::vector<Eigen::VectorXd> latent_grads;  // one per latent code involved
  std::optional<std::array<double, 9>> pose_grad;  // rot6d (6) + translation (3)

  bool all_finite() const {
    if (!std::isfinite(loss)) return false;
    for (const auto& g : param_grads)
      for (const auto& l : g.layers)
        if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    for (const auto& z : latent_grads)
      if (!z.allFinite()) return false;
    if (pose_grad)
      for (double v : *pose_grad)
        if (!std::isfinite(v)) return false;
    return true;
  }
};

}  // namespace dif
