#pragma once

#include "dif/autodiff.hpp"
#include "dif/container.hpp"

namespace dif {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw StructuralError("learning rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw StructuralError("Adam betas must lie in [0, 1)");
    if (!(eps > 0)) throw StructuralError("Adam epsilon must be positive");
  }
};

/// Adam moments for one flat block of parameters.
struct AdamSlot {
  Eigen::VectorXd m, v;
  std::int64_t t = 0;

  void ensure(Eigen::Index n) {
    if (m.size() == n) return;
    m = Eigen::VectorXd::Zero(n);
    v = Eigen::VectorXd::Zero(n);
    t = 0;
  }

  template <class Param, class Grad>
  void step(Param&& x, const Grad& g, const AdamConfig& c) {
    ensure(g.size());
    ++t;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g.cwiseAbs2();
    const double bc1 = 1 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1 - std::pow(c.beta2, static_cast<double>(t));
    x -= (c.lr / bc1) * (m.array() / ((v.array() / bc2).sqrt() + c.eps)).matrix();
  }
};

/// Adam over a list of networks; one slot per weight/bias block.
class NetworkAdam {
 public:
  explicit NetworkAdam(AdamConfig c = {}) : cfg_(c) { cfg_.validate(); }

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(std::span<MlpParams* const> nets, std::span<const MlpParams> grads) {
    if (nets.size() != grads.size()) throw StructuralError("optimizer: parameter and gradient lists differ");
    std::size_t slot = 0;
    for (std::size_t k = 0; k < nets.size(); ++k) {
      if (!nets[k]->same_shape(grads[k])) throw StructuralError("optimizer: gradient shape mismatch");
      for (std::size_t l = 0; l < nets[k]->layers.size(); ++l) {
        Layer& p = nets[k]->layers[l];
        const Layer& g = grads[k].layers[l];
        if (slots_.size() < slot + 2) slots_.resize(slot + 2);
        Eigen::Map<Eigen::VectorXd> w(p.weight.data(), p.weight.size());
        slots_[slot++].step(w, Eigen::Map<const Eigen::VectorXd>(g.weight.data(), g.weight.size()), cfg_);
        slots_[slot++].step(p.bias, g.bias, cfg_);
      }
    }
  }

  std::vector<AdamSlot>& slots() { return slots_; }
  const std::vector<AdamSlot>& slots() const { return slots_; }

 private:
  AdamConfig cfg_;
  std::vector<AdamSlot> slots_;
};

inline void put_slots(Container& c, const std::string& prefix, const std::vector<AdamSlot>& slots) {
  Eigen::MatrixXd steps(static_cast<Eigen::Index>(slots.size()), 1);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    c.put(prefix + std::to_string(i) + ".m", slots[i].m);
    c.put(prefix + std::to_string(i) + ".v", slots[i].v);
    steps(static_cast<Eigen::Index>(i), 0) = static_cast<double>(slots[i].t);
  }
  c.put(prefix + "steps", steps);
}

inline std::vector<AdamSlot> get_slots(const Container& c, const std::string& prefix) {
  const Eigen::MatrixXd& steps = c.get(prefix + "steps");
  std::vector<AdamSlot> slots(static_cast<std::size_t>(steps.rows()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    slots[i].m = c.get(prefix + std::to_string(i) + ".m");
    slots[i].v = c.get(prefix + std::to_string(i) + ".v");
    slots[i].t = static_cast<std::int64_t>(steps(static_cast<Eigen::Index>(i), 0));
  }
  return slots;
}

}  // namespace dif
