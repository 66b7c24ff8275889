#pragma once

// Auto-decoder training of the template, hypernetworks and latent table,
// plus latent-only fitting against a frozen prior.

#include "dif/losses.hpp"
#include "dif/optim.hpp"

#include <functional>
#include <ostream>

namespace dif {

struct TrainConfig {
  int epochs = 60;
  int batch_shapes = 8;
  int surface_points = 4000;  // per shape per step, drawn from the stored samples
  int free_points = 4000;
  double lr = 1e-4;
  double latent_lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw StructuralError("epochs must be non-negative");
    if (batch_shapes <= 0 || surface_points <= 0 || free_points <= 0)
      throw StructuralError("batch and point counts must be positive");
    adam(lr).validate();
    adam(latent_lr).validate();
  }

  AdamConfig adam(double rate) const { return {rate, beta1, beta2, eps}; }
};

/// Optimizer state needed to continue a run exactly where it stopped.
struct TrainState {
  int epoch = 0;  // epochs completed
  NetworkAdam nets;
  std::vector<AdamSlot> latents;
};

inline void save_train_state(const std::filesystem::path& path, const TrainState& s) {
  Container c;
  c.put("epoch", Eigen::MatrixXd::Constant(1, 1, s.epoch));
  put_slots(c, "net_adam.", s.nets.slots());
  put_slots(c, "latent_adam.", s.latents);
  write_container(path, c);
}

inline TrainState load_train_state(const std::filesystem::path& path, const TrainConfig& cfg) {
  const Container c = read_container(path);
  TrainState s{static_cast<int>(c.get("epoch")(0, 0)), NetworkAdam(cfg.adam(cfg.lr)), {}};
  s.nets.slots() = get_slots(c, "net_adam.");
  s.latents = get_slots(c, "latent_adam.");
  return s;
}

struct EpochRecord {
  int epoch = 0;
  LossTerms terms;  // summed over shapes, divided by the number of shapes
};

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& hist) {
  os << "epoch," << LossTerms::kCsvHeader << '\n';
  char buf[64];
  for (const auto& r : hist) {
    os << r.epoch;
    for (double v : {r.terms.sdf_value, r.terms.sdf_normal, r.terms.sdf_eikonal, r.terms.sdf_offsurface, r.terms.normal,
                     r.terms.latent, r.terms.smooth, r.terms.correction, r.terms.total}) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      os << buf;
    }
    os << '\n';
  }
}

struct FitResult {
  std::vector<EpochRecord> history;
  TrainState state;
};

/// Called after each epoch; returning false stops training early.
using EpochCallback = std::function<bool(const EpochRecord&, const ShapePrior&, const TrainState&)>;

namespace detail {

inline std::vector<MlpParams*> prior_nets(ShapePrior& p) {
  std::vector<MlpParams*> nets{&p.templ};
  for (auto& h : p.hyper) nets.push_back(&h);
  return nets;
}

}  // namespace detail

/// Joint optimization of network weights and latent codes. Shape i of the
/// dataset is bound to latent i. Every random draw derives from
/// (seed, epoch, shape), so a run resumed from `state` continues bit for bit.
inline FitResult fit(ShapePrior& prior, std::span<const ShapeSampleSet> dataset, const TrainConfig& cfg,
                     const LossWeights& w, std::optional<TrainState> resume = std::nullopt,
                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  w.validate();
  prior.validate();
  if (dataset.empty()) throw StructuralError("training set is empty");
  if (dataset.size() != prior.latents.size())
    throw StructuralError("dataset has " + std::to_string(dataset.size()) + " shapes but the prior has " +
                          std::to_string(prior.latents.size()) + " latent codes");
  for (const auto& s : dataset) s.validate();

  FitResult res{{}, resume ? std::move(*resume) : TrainState{0, NetworkAdam(cfg.adam(cfg.lr)), {}}};
  TrainState& st = res.state;
  st.latents.resize(prior.latents.size());
  const AdamConfig latent_cfg = cfg.adam(cfg.latent_lr);
  const auto nets = detail::prior_nets(prior);
  const std::size_t n = dataset.size();

  for (int epoch = st.epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto erng = make_rng(cfg.seed, "epoch-order", static_cast<std::uint64_t>(epoch));
    shuffle(order, erng);

    LossTerms epoch_terms;
    for (std::size_t b0 = 0; b0 < n; b0 += static_cast<std::size_t>(cfg.batch_shapes)) {
      const std::size_t b1 = std::min(n, b0 + static_cast<std::size_t>(cfg.batch_shapes));
      std::vector<ShapeSampleSet> subs;
      subs.reserve(b1 - b0);
      std::vector<BatchItem> batch;
      for (std::size_t k = b0; k < b1; ++k) {
        auto srng = make_rng(cfg.seed, "subsample", static_cast<std::uint64_t>(epoch), order[k]);
        subs.push_back(dataset[order[k]].subsample(cfg.surface_points, cfg.free_points, srng));
      }
      for (std::size_t k = b0; k < b1; ++k) batch.push_back({order[k], &subs[k - b0]});
      LossTerms terms;
      GradientBundle g;
      try {
        g = loss_and_grads(prior, batch, w, &terms);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", shapes [" + std::to_string(order[b0]) + "..]: " +
                           e.what());
      }
      st.nets.step(nets, g.param_grads);
      for (std::size_t k = 0; k < batch.size(); ++k)
        st.latents[batch[k].latent_index].step(prior.latents[batch[k].latent_index].z, g.latent_grads[k], latent_cfg);
      epoch_terms += terms;
    }
    st.epoch = epoch + 1;
    EpochRecord rec{epoch, epoch_terms.scaled(1.0 / static_cast<double>(n))};
    res.history.push_back(rec);
    if (on_epoch && !on_epoch(rec, prior, st)) break;
  }
  return res;
}

// --- latent-only fitting -------------------------------------------------------------

enum class LatentInit { Zero, Mean, Random };

inline LatentInit latent_init_from_string(const std::string& s) {
  if (s == "zero") return LatentInit::Zero;
  if (s == "mean") return LatentInit::Mean;
  if (s == "random") return LatentInit::Random;
  throw StructuralError("unknown latent init '" + s + "' (expected zero, mean or random)");
}

inline const char* to_string(LatentInit i) {
  switch (i) {
    case LatentInit::Zero: return "zero";
    case LatentInit::Mean: return "mean";
    case LatentInit::Random: return "random";
  }
  return "?";
}

/// Diagonal Gaussian fitted to the trained latent table.
struct LatentDistribution {
  Eigen::VectorXd mean, stddev;

  static LatentDistribution fit(const ShapePrior& prior) {
    const Eigen::Index d = prior.latent_dim();
    LatentDistribution g{Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d)};
    if (prior.latents.empty()) return g;
    for (const auto& l : prior.latents) g.mean += l.z;
    g.mean /= static_cast<double>(prior.latents.size());
    for (const auto& l : prior.latents) g.stddev += (l.z - g.mean).cwiseAbs2();
    g.stddev = (g.stddev / static_cast<double>(prior.latents.size())).cwiseSqrt();
    return g;
  }

  Eigen::VectorXd sample(std::mt19937_64& rng) const {
    Eigen::VectorXd z(mean.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = mean[k] + stddev[k] * gaussian(rng);
    return z;
  }
};

inline Eigen::VectorXd initial_latent(const ShapePrior& prior, LatentInit mode, std::uint64_t seed) {
  switch (mode) {
    case LatentInit::Zero: return Eigen::VectorXd::Zero(prior.latent_dim());
    case LatentInit::Mean: return LatentDistribution::fit(prior).mean;
    case LatentInit::Random: {
      auto rng = make_rng(seed, "latent-init");
      return LatentDistribution::fit(prior).sample(rng);
    }
  }
  return {};
}

struct LatentFitConfig {
  int iterations = 300;
  double lr = 1e-2;
  int surface_points = 1000;
  int free_points = 1000;
  LatentInit init = LatentInit::Mean;
  std::uint64_t seed = 0;
};

struct LatentFitResult {
  Eigen::VectorXd z;
  std::vector<double> losses;
};

/// Optimizes a single latent code against `samples` with every network frozen.
inline LatentFitResult fit_latent(const ShapePrior& prior, const ShapeSampleSet& samples, const LatentFitConfig& cfg,
                                  const LossWeights& w) {
  if (cfg.iterations < 0 || !(cfg.lr > 0)) throw StructuralError("latent fit needs iterations >= 0 and lr > 0");
  samples.validate();
  LatentFitResult res{initial_latent(prior, cfg.init, cfg.seed), {}};
  AdamSlot adam;
  const AdamConfig ac{cfg.lr, 0.9, 0.999, 1e-8};
  for (int it = 0; it < cfg.iterations; ++it) {
    auto rng = make_rng(cfg.seed, "latent-fit", static_cast<std::uint64_t>(it));
    const ShapeSampleSet sub = samples.subsample(cfg.surface_points, cfg.free_points, rng);
    const BatchItem item{0, &sub};
    const std::vector<Eigen::VectorXd> z{res.z};
    const GradientBundle g = loss_and_grads(prior, std::span<const BatchItem>(&item, 1), w, nullptr, z);
    res.losses.push_back(g.loss);
    adam.step(res.z, g.latent_grads[0], ac);
  }
  return res;
}

}  // namespace dif
