#pragma once

// Command implementations behind the difrecon tool: configuration handling,
// dataset generation, training, reconstruction, evaluation and the pose
// ablation. Every command takes a resolved JSON config and writes it, with
// the tool version, next to its outputs.

#include "dif/inference.hpp"
#include "dif/metrics.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

namespace dif::cli {

using nlohmann::json;

/// Bad invocation or configuration (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

/// Exit code for an exception; stage errors are classified by their cause.
inline int exit_code_for(std::exception_ptr e) {
  try {
    std::rethrow_exception(e);
  } catch (const StageError& s) {
    return s.cause() ? exit_code_for(s.cause()) : kData;
  } catch (const UsageError&) {
    return kUsage;
  } catch (const StructuralError&) {
    return kUsage;
  } catch (const NumericError&) {
    return kNumeric;
  } catch (const DataError&) {
    return kData;
  } catch (const json::exception&) {
    return kData;
  } catch (const std::filesystem::filesystem_error&) {
    return kData;
  } catch (...) {
    return kData;
  }
}

// --- configuration ------------------------------------------------------------------

/// Overlays `user` on `defaults`. Keys absent from the defaults are rejected;
/// a null default accepts any value.
inline json merge_config(const json& defaults, const json& user, const std::string& where = "") {
  if (!user.is_object() || !defaults.is_object()) return user;
  json out = defaults;
  for (const auto& [k, v] : user.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!defaults.contains(k)) throw UsageError("unknown config key '" + path + "'");
    const json& d = defaults.at(k);
    if (d.is_object())
      out[k] = merge_config(d, v, path);
    else if (d.is_null() || v.is_null() || d.type() == v.type() || (d.is_number() && v.is_number()))
      out[k] = v;
    else
      throw UsageError("config key '" + path + "' expects " + d.type_name() + ", got " + v.type_name());
  }
  return out;
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and
/// taken as a string otherwise.
inline void apply_set(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t p; (p = rest.find('.')) != std::string::npos; rest = rest.substr(p + 1)) parts.push_back(rest.substr(0, p));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  cfg = merge_config(cfg, patch);
}

inline json read_json(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw DataError("cannot open '" + p.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

/// Writes via a temporary file and rename so readers never see partial output.
inline void write_text_atomic(const std::filesystem::path& p, const std::string& text) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write '" + tmp.string() + "'");
    os << text;
    if (!os) throw DataError("write to '" + tmp.string() + "' failed");
  }
  std::filesystem::rename(tmp, p);
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text_atomic(p, j.dump(2) + "\n"); }

inline void write_resolved_config(const std::filesystem::path& dir, const std::string& command, const json& cfg) {
  std::filesystem::create_directories(dir);
  write_json(dir / "config.json", {{"command", command}, {"version", kVersion}, {"config", cfg}});
}

inline std::filesystem::path prepare_output(const json& cfg) {
  const std::filesystem::path out = cfg.at("output").get<std::string>();
  try {
    std::filesystem::create_directories(out);
  } catch (const std::filesystem::filesystem_error& e) {
    throw DataError("cannot create output directory '" + out.string() + "': " + e.what());
  }
  return out;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t i = 0,
                                 std::uint64_t j = 0) {
  return make_rng(seed, stream, i, j)();
}

inline int default_jobs() {
  if (const char* v = std::getenv("DIF_JOBS")) {
    const int n = std::atoi(v);
    if (n > 0) return n;
  }
  return 1;
}

/// Runs f(i) for i in [0, n) on up to `jobs` threads. Exceptions are left to f.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) f(i);
    });
  for (auto& t : pool) t.join();
}

inline int jobs_from(const json& cfg) {
  const int j = cfg.value("jobs", 0);
  return j > 0 ? j : default_jobs();
}

// --- defaults -----------------------------------------------------------------------

inline json arch_json(const PriorArch& a) {
  return {{"latent_dim", a.latent_dim},       {"template_hidden", a.template_hidden},
          {"deform_hidden", a.deform_hidden}, {"hyper_hidden", a.hyper_hidden},
          {"omega0", a.omega0},               {"latent_init_std", a.latent_init_std},
          {"hyper_out_scale", a.hyper_out_scale}};
}

inline PriorArch arch_from_json(const json& j) {
  PriorArch a;
  a.latent_dim = j.at("latent_dim");
  a.template_hidden = j.at("template_hidden").get<std::vector<int>>();
  a.deform_hidden = j.at("deform_hidden").get<std::vector<int>>();
  a.hyper_hidden = j.at("hyper_hidden");
  a.omega0 = j.at("omega0");
  a.latent_init_std = j.at("latent_init_std");
  a.hyper_out_scale = j.at("hyper_out_scale");
  if (a.latent_dim <= 0 || a.hyper_hidden <= 0) throw UsageError("latent_dim and hyper_hidden must be positive");
  return a;
}

inline json weights_json(const LossWeights& w) {
  return {{"sdf", w.sdf},         {"normal", w.normal},         {"latent", w.latent},
          {"smooth", w.smooth},   {"correction", w.correction}, {"delta", w.delta}};
}

inline LossWeights weights_from_json(const json& j) {
  LossWeights w;
  const auto sdf = j.at("sdf").get<std::vector<double>>();
  if (sdf.size() != 4) throw UsageError("weights.sdf needs four entries");
  std::copy(sdf.begin(), sdf.end(), w.sdf.begin());
  w.normal = j.at("normal");
  w.latent = j.at("latent");
  w.smooth = j.at("smooth");
  w.correction = j.at("correction");
  w.delta = j.at("delta");
  w.validate();
  return w;
}

inline json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_shapes", c.batch_shapes}, {"surface_points", c.surface_points},
          {"free_points", c.free_points}, {"lr", c.lr}, {"latent_lr", c.latent_lr},
          {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

inline TrainConfig train_from_json(const json& j, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = j.at("epochs");
  c.batch_shapes = j.at("batch_shapes");
  c.surface_points = j.at("surface_points");
  c.free_points = j.at("free_points");
  c.lr = j.at("lr");
  c.latent_lr = j.at("latent_lr");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.seed = seed;
  c.validate();
  return c;
}

inline json inference_json(const InferenceConfig& c) {
  return {{"iterations", c.iterations},     {"lr_shape", c.lr_shape},
          {"lr_pose", c.lr_pose},           {"eikonal_samples", c.eikonal_samples},
          {"latent_init", to_string(c.init)}, {"optimize_shape", c.optimize_shape},
          {"optimize_pose", c.optimize_pose}, {"mesh_resolution", c.mesh_resolution}};
}

inline InferenceConfig inference_from_json(const json& j, std::uint64_t seed) {
  InferenceConfig c;
  c.iterations = j.at("iterations");
  c.lr_shape = j.at("lr_shape");
  c.lr_pose = j.at("lr_pose");
  c.eikonal_samples = j.at("eikonal_samples");
  c.init = latent_init_from_string(j.at("latent_init"));
  c.optimize_shape = j.at("optimize_shape");
  c.optimize_pose = j.at("optimize_pose");
  c.mesh_resolution = j.at("mesh_resolution");
  c.seed = seed;
  c.validate();
  return c;
}

inline json estimator_defaults() {
  return {{"type", "noisy-oracle"}, {"rot_deg", 10.0}, {"trans", 0.05}, {"template_points", 4000},
          {"template_resolution", 64}, {"icp_iterations", 50}};
}

inline json evaluation_defaults() {
  return {{"tau", 0.01}, {"cube_side", 2.0}, {"points", 30000}, {"frame", "observation"}};
}

inline json default_config(const std::string& command) {
  if (command == "gen-data")
    return {{"output", "data"},
            {"category", "car"},
            {"count", 50},
            {"test_count", 20},
            {"seed", 0},
            {"surface_points", 4000},
            {"free_points", 4000},
            {"mesh_resolution", 128},
            {"views_per_shape", 1},
            {"render", {{"width", 64}, {"height", 64}, {"fov_deg", 50.0}, {"distance", 2.0}, {"noise_sigma", 0.0}}},
            {"occlusion_ratio", 0.0},
            {"jobs", 0}};
  if (command == "train")
    return {{"output", "prior"},     {"dataset", "data"}, {"seed", 0},
            {"arch", arch_json({})}, {"train", train_json({})}, {"weights", json::object()},
            {"resume", false}};
  if (command == "reconstruct" || command == "ablate-pose") {
    json c{{"output", command == "reconstruct" ? "recon" : "ablation"},
           {"prior", "prior"},
           {"dataset", "data"},
           {"split", "test"},
           {"seed", 0},
           {"max_shapes", 0},
           {"jobs", 0},
           {"estimator", estimator_defaults()},
           {"inference", inference_json({})}};
    if (command == "ablate-pose") c["evaluation"] = evaluation_defaults();
    return c;
  }
  if (command == "evaluate") {
    json c{{"output", "eval"}, {"predictions", "recon"}, {"dataset", "data"}, {"seed", 0}, {"jobs", 0},
           {"mesh_resolution", 128}};
    c.update(evaluation_defaults());
    return c;
  }
  throw UsageError("unknown command '" + command + "'");
}

/// Defaults overlaid with an optional config file and --set overrides.
inline json resolve_config(const std::string& command, const std::optional<std::filesystem::path>& file,
                           const std::vector<std::string>& sets) {
  json cfg = default_config(command);
  if (file) cfg = merge_config(cfg, read_json(*file));
  for (const auto& s : sets) apply_set(cfg, s);
  return cfg;
}

// --- dataset ------------------------------------------------------------------------

struct DatasetEntry {
  std::string id;
  std::string split;
  std::filesystem::path shape, samples;
  std::vector<std::filesystem::path> views;  // depth stems
};

struct Dataset {
  std::filesystem::path root;
  json manifest;
  std::string category;
  std::vector<DatasetEntry> entries;

  std::vector<const DatasetEntry*> split(const std::string& name) const {
    std::vector<const DatasetEntry*> out;
    for (const auto& e : entries)
      if (name == "all" || e.split == name) out.push_back(&e);
    return out;
  }
};

inline Dataset load_dataset(const std::filesystem::path& root) {
  Dataset d;
  d.root = root;
  if (!std::filesystem::exists(root / "manifest.json")) throw DataError("no dataset manifest in '" + root.string() + "'");
  d.manifest = read_json(root / "manifest.json");
  try {
    d.category = d.manifest.at("category");
    for (const auto& s : d.manifest.at("shapes")) {
      DatasetEntry e{s.at("id"), s.at("split"), root / s.at("shape").get<std::string>(),
                     root / s.at("samples").get<std::string>(), {}};
      for (const auto& v : s.at("views")) e.views.push_back(root / v.get<std::string>());
      d.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataError((root / "manifest.json").string() + ": " + e.what());
  }
  return d;
}

inline std::string shape_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

inline json cmd_gen_data(const json& cfg) {
  const auto out = prepare_output(cfg);
  const std::string category = cfg.at("category");
  const int count = cfg.at("count"), test_count = cfg.at("test_count");
  if (test_count < 0 || test_count > count) throw UsageError("test_count must lie in [0, count]");
  const std::uint64_t seed = cfg.at("seed");
  const int ns = cfg.at("surface_points"), nf = cfg.at("free_points"), views = cfg.at("views_per_shape");
  if (views < 0) throw UsageError("views_per_shape must be non-negative");
  const auto& r = cfg.at("render");
  const int w = r.at("width"), h = r.at("height");
  const double fov = r.at("fov_deg"), dist = r.at("distance"), noise = r.at("noise_sigma");
  const double occ = cfg.at("occlusion_ratio");
  SamplingOptions so;
  so.mesh_resolution = cfg.at("mesh_resolution");

  const auto shapes = make_family(category, count, seed);
  for (const char* sub : {"shapes", "samples", "depth"}) std::filesystem::create_directories(out / sub);
  std::vector<json> records(shapes.size());
  parallel_for(shapes.size(), jobs_from(cfg), [&](std::size_t i) {
    const std::string id = shape_id(i);
    write_json(out / "shapes" / (id + ".json"), to_json(shapes[i]));
    const ShapeSampleSet s = sample_shape(shapes[i], ns, nf, derive_seed(seed, "samples", i), so);
    save_samples(out / "samples" / (id + ".bin"), s);
    json rec{{"id", id},
             {"split", static_cast<int>(i) >= count - test_count ? "test" : "train"},
             {"shape", "shapes/" + id + ".json"},
             {"samples", "samples/" + id + ".bin"},
             {"views", json::array()}};
    for (int v = 0; v < views; ++v) {
      auto rng = make_rng(seed, "camera", i, static_cast<std::uint64_t>(v));
      const Camera cam{sample_hemisphere_camera(rng, dist), Intrinsics::from_fov(w, h, fov), w, h};
      DepthImage img = render_depth(shapes[i], cam, noise, derive_seed(seed, "depth-noise", i, v));
      if (occ > 0) img = occlude(img, occ, derive_seed(seed, "occlusion", i, v));
      const std::string stem = "depth/" + id + "_v" + std::to_string(v);
      save_depth(out / stem, img);
      rec["views"].push_back(stem);
    }
    records[i] = std::move(rec);
  });
  json manifest{{"version", kVersion},         {"category", category},     {"seed", seed},
                {"count", count},              {"test_count", test_count}, {"surface_points", ns},
                {"free_points", nf},           {"views_per_shape", views}, {"occlusion_ratio", occ},
                {"shapes", records}};
  write_json(out / "manifest.json", manifest);
  write_resolved_config(out, "gen-data", cfg);
  return manifest;
}

// --- training -----------------------------------------------------------------------

inline json prior_sidecar(const ShapePrior& p, const LossWeights& w, std::uint64_t seed) {
  return {{"version", kVersion}, {"category", p.category}, {"arch", arch_json(p.arch)},
          {"weights", weights_json(w)}, {"seed", seed}, {"instances", p.latents.size()}};
}

struct LoadedPrior {
  ShapePrior prior;
  LossWeights weights;
};

inline LoadedPrior load_prior_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "prior.bin") || !std::filesystem::exists(dir / "prior.json"))
    throw DataError("no trained prior in '" + dir.string() + "' (expected prior.bin and prior.json)");
  const json side = read_json(dir / "prior.json");
  try {
    return {load_prior(dir / "prior.bin", arch_from_json(side.at("arch")), side.at("category")),
            weights_from_json(side.at("weights"))};
  } catch (const json::exception& e) {
    throw DataError((dir / "prior.json").string() + ": " + e.what());
  }
}

inline void save_prior_dir(const std::filesystem::path& dir, const ShapePrior& p, const LossWeights& w,
                           std::uint64_t seed) {
  auto tmp = dir / "prior.bin.tmp";
  save_prior(tmp, p);
  std::filesystem::rename(tmp, dir / "prior.bin");
  write_json(dir / "prior.json", prior_sidecar(p, w, seed));
}

inline std::vector<EpochRecord> read_history_csv(const std::filesystem::path& p) {
  std::vector<EpochRecord> out;
  std::ifstream is(p);
  if (!is) return out;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> v;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) v.push_back(std::strtod(tok.c_str(), nullptr));
    if (v.size() != 10) throw DataError(p.string() + ": malformed history row");
    EpochRecord r;
    r.epoch = static_cast<int>(v[0]);
    auto& t = r.terms;
    t.sdf_value = v[1], t.sdf_normal = v[2], t.sdf_eikonal = v[3], t.sdf_offsurface = v[4];
    t.normal = v[5], t.latent = v[6], t.smooth = v[7], t.correction = v[8], t.total = v[9];
    out.push_back(r);
  }
  return out;
}

/// Trains on the dataset's train split. Prior, optimizer state and history
/// are checkpointed after every epoch, so an interrupted run can resume.
inline json cmd_train(const json& cfg) {
  const auto out = prepare_output(cfg);
  const Dataset ds = load_dataset(cfg.at("dataset").get<std::string>());
  const std::uint64_t seed = cfg.at("seed");
  const PriorArch arch = arch_from_json(cfg.at("arch"));
  const TrainConfig tc = train_from_json(cfg.at("train"), seed);
  const LossWeights w = weights_from_json(merge_config(weights_json(LossWeights::for_category(ds.category)),
                                                      cfg.at("weights"), "weights"));
  const auto train = ds.split("train");
  if (train.empty()) throw DataError("dataset has no training shapes");
  std::vector<ShapeSampleSet> data;
  for (const auto* e : train) data.push_back(load_samples(e->samples));

  ShapePrior prior = make_prior(arch, ds.category, data.size(), seed);
  std::optional<TrainState> resume;
  std::vector<EpochRecord> history;
  if (cfg.at("resume").get<bool>() && std::filesystem::exists(out / "state.bin")) {
    prior = load_prior_dir(out).prior;
    if (prior.latents.size() != data.size()) throw DataError("checkpoint does not match the dataset");
    resume = load_train_state(out / "state.bin", tc);
    history = read_history_csv(out / "history.csv");
    history.resize(static_cast<std::size_t>(std::min<int>(resume->epoch, static_cast<int>(history.size()))));
  }
  write_resolved_config(out, "train", cfg);
  auto checkpoint = [&](const ShapePrior& p, const TrainState& st) {
    save_prior_dir(out, p, w, seed);
    save_train_state(out / "state.bin.tmp", st);
    std::filesystem::rename(out / "state.bin.tmp", out / "state.bin");
    std::ostringstream os;
    write_history_csv(os, history);
    write_text_atomic(out / "history.csv", os.str());
  };
  const FitResult res = fit(prior, data, tc, w, std::move(resume),
                            [&](const EpochRecord& r, const ShapePrior& p, const TrainState& st) {
                              history.push_back(r);
                              checkpoint(p, st);
                              return true;
                            });
  checkpoint(prior, res.state);
  return {{"epochs", res.state.epoch}, {"final_loss", history.empty() ? 0.0 : history.back().terms.total}};
}

// --- reconstruction -----------------------------------------------------------------

inline std::unique_ptr<PoseEstimator> make_estimator(const json& e, const DepthImage& img,
                                                     const PointCloud& canonical_template, std::uint64_t seed) {
  const std::string type = e.at("type");
  if (type == "identity") return std::make_unique<IdentityEstimator>();
  if (type == "pca") return std::make_unique<PcaEstimator>();
  if (type == "icp") {
    IcpOptions o;
    o.max_iterations = e.at("icp_iterations");
    return std::make_unique<IcpEstimator>(canonical_template, o);
  }
  if (type == "noisy-oracle") return std::make_unique<NoisyOracleEstimator>(img.pose, e.at("rot_deg"), e.at("trans"), seed);
  throw UsageError("unknown estimator '" + type + "' (expected identity, pca, icp or noisy-oracle)");
}

/// Surface samples of the prior's mean shape, the stand-in for the category
/// template when aligning estimator frames.
inline PointCloud template_cloud(const ShapePrior& prior, int points, int resolution) {
  const TriangleMesh m = extract_mesh(prior, initial_latent(prior, LatentInit::Mean, 0), resolution);
  if (m.empty()) throw NumericError("the prior's mean shape has no surface");
  PointCloud pc = sample_mesh_surface(m, static_cast<std::size_t>(points), 0);
  pc.frame = Frame::Canonical;
  return pc;
}

struct ViewJob {
  std::string id;  // "<shape>_v<k>"
  std::filesystem::path depth;
  std::size_t index = 0;
};

inline std::vector<ViewJob> view_jobs(const Dataset& ds, const std::string& split, int max_shapes) {
  std::vector<ViewJob> jobs;
  auto entries = ds.split(split);
  if (max_shapes > 0 && entries.size() > static_cast<std::size_t>(max_shapes)) entries.resize(max_shapes);
  for (const auto* e : entries)
    for (const auto& v : e->views) jobs.push_back({v.filename().string(), v, jobs.size()});
  return jobs;
}

/// Writes the bundle into a scratch directory and renames it into place.
inline void write_bundle_atomic(const std::filesystem::path& dir, const ReconstructionResult& r) {
  auto tmp = dir;
  tmp += ".tmp";
  std::filesystem::remove_all(tmp);
  write_result_bundle(tmp, r);
  std::filesystem::remove_all(dir);
  std::filesystem::rename(tmp, dir);
}

struct ReconstructSummary {
  std::vector<std::string> done;
  json failures = json::array();
  int exit_code = kOk;
};

inline ReconstructSummary run_reconstruct(const json& cfg, const std::filesystem::path& out, bool optimize_pose) {
  const Dataset ds = load_dataset(cfg.at("dataset").get<std::string>());
  const LoadedPrior lp = load_prior_dir(cfg.at("prior").get<std::string>());
  if (lp.prior.category != ds.category)
    throw DataError("prior category '" + lp.prior.category + "' does not match dataset '" + ds.category + "'");
  const std::uint64_t seed = cfg.at("seed");
  const json& est_cfg = cfg.at("estimator");
  InferenceConfig ic = inference_from_json(cfg.at("inference"), seed);
  ic.optimize_pose = optimize_pose;
  const auto jobs = view_jobs(ds, cfg.at("split"), cfg.at("max_shapes"));
  if (jobs.empty()) throw DataError("no depth views in split '" + cfg.at("split").get<std::string>() + "'");

  std::optional<PointCloud> templ;
  const std::string type = est_cfg.at("type");
  if (type == "pca" || type == "icp")
    templ = template_cloud(lp.prior, est_cfg.at("template_points"), est_cfg.at("template_resolution"));
  FrameAlignCache align_cache;

  std::filesystem::create_directories(out);
  std::vector<std::optional<std::pair<std::string, std::exception_ptr>>> failed(jobs.size());
  parallel_for(jobs.size(), jobs_from(cfg), [&](std::size_t k) {
    const ViewJob& job = jobs[k];
    try {
      const DepthImage img = detail::run_stage("load_depth", [&] { return load_depth(job.depth); });
      const auto est = make_estimator(est_cfg, img, templ ? *templ : PointCloud{},
                                      derive_seed(seed, "estimator", job.index));
      const Pose align = detail::run_stage("frame_align", [&] {
        return templ ? align_cache.get(*est, lp.prior.category, *templ) : Pose::identity();
      });
      InferenceConfig c = ic;
      c.seed = derive_seed(seed, "inference", job.index);
      const ReconstructionResult r = reconstruct(lp.prior, img, *est, align, c, lp.weights);
      write_bundle_atomic(out / job.id, r);
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception& e) {
      failed[k] = std::make_pair(std::string(e.what()), std::current_exception());
    }
  });

  ReconstructSummary s;
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    if (!failed[k]) {
      s.done.push_back(jobs[k].id);
      continue;
    }
    const StageError* se = nullptr;
    try {
      std::rethrow_exception(failed[k]->second);
    } catch (const StageError& e) {
      se = &e;
      s.failures.push_back({{"id", jobs[k].id}, {"stage", e.stage()}, {"error", failed[k]->first}});
    } catch (...) {
      s.failures.push_back({{"id", jobs[k].id}, {"stage", "unknown"}, {"error", failed[k]->first}});
    }
    if (s.exit_code == kOk) s.exit_code = exit_code_for(failed[k]->second);
  }
  write_json(out / "failures.json", s.failures);
  return s;
}

inline json cmd_reconstruct(const json& cfg, int* exit_code = nullptr) {
  const auto out = prepare_output(cfg);
  write_resolved_config(out, "reconstruct", cfg);
  const ReconstructSummary s = run_reconstruct(cfg, out, cfg.at("inference").at("optimize_pose"));
  if (exit_code) *exit_code = s.exit_code;
  return {{"reconstructed", s.done.size()}, {"failed", s.failures.size()}};
}

// --- evaluation ---------------------------------------------------------------------

struct EvalSettings {
  double tau = 0.01, cube_side = 2.0;
  int points = 30000;
  bool observation_frame = true;
  int mesh_resolution = 128;
};

inline EvalSettings eval_settings(const json& j, int mesh_resolution) {
  EvalSettings s;
  s.tau = j.at("tau");
  s.cube_side = j.at("cube_side");
  s.points = j.at("points");
  const std::string frame = j.at("frame");
  if (frame != "observation" && frame != "canonical")
    throw UsageError("evaluation frame must be 'observation' or 'canonical'");
  s.observation_frame = frame == "observation";
  s.mesh_resolution = mesh_resolution;
  if (!(s.tau > 0) || s.points <= 0) throw UsageError("tau and points must be positive");
  return s;
}

/// Scores every bundle in `pred_dir` against the analytic ground truth. In the
/// observation frame the prediction is placed with its own pose and the truth
/// with the true pose, so pose errors show up in the scores.
inline EvalReport evaluate_predictions(const Dataset& ds, const std::filesystem::path& pred_dir,
                                       const EvalSettings& es, std::uint64_t seed, int jobs) {
  std::vector<std::pair<const DatasetEntry*, std::filesystem::path>> items;
  for (const auto& e : ds.entries)
    for (const auto& v : e.views) {
      const auto dir = pred_dir / v.filename();
      if (std::filesystem::exists(dir / "mesh.obj")) items.emplace_back(&e, v);
    }
  if (items.empty()) throw DataError("no reconstructions found in '" + pred_dir.string() + "'");
  EvalReport rep;
  rep.tau = es.tau;
  rep.shapes.resize(items.size());
  SamplingOptions so;
  so.mesh_resolution = es.mesh_resolution;
  parallel_for(items.size(), jobs, [&](std::size_t k) {
    const auto& [entry, stem] = items[k];
    const std::string id = stem.filename().string();
    const auto dir = pred_dir / id;
    const AnalyticShape shape = shape_from_json(read_json(entry->shape));
    const ShapeSampleSet gt = sample_shape(shape, es.points, 1, derive_seed(seed, "eval-gt", k), so);
    PointCloud g;
    for (Eigen::Index i = 0; i < gt.surface_count(); ++i) g.points.push_back(gt.surface_points.col(i));
    const TriangleMesh mesh = read_obj(dir / "mesh.obj");
    if (mesh.empty()) throw DataError(id + ": empty mesh");
    PointCloud p = sample_mesh_surface(mesh, static_cast<std::size_t>(es.points), derive_seed(seed, "eval-pred", k));
    const Pose est = json_pose(read_json(dir / "pose.json").at("canonical_from_camera"));
    const DepthImage img = load_depth(stem);
    ShapeRecord r;
    r.id = id;
    r.category = ds.category;
    if (es.observation_frame) {
      p = transform(p, est.inverse(), Frame::Camera);
      g = transform(g, img.pose, Frame::Camera);
    }
    const PairScore sc = score_normalized(p, g, es.tau, es.cube_side);
    r.chamfer_x1e4 = sc.chamfer_x1e4;
    r.f1 = sc.f1;
    r.pred_points = p.size();
    r.gt_points = g.size();
    r.pose = pose_error(est.inverse(), img.pose);
    rep.shapes[k] = r;
  });
  return rep;
}

inline void write_report(const std::filesystem::path& dir, const EvalReport& rep) {
  write_json(dir / "report.json", rep.to_json());
  write_text_atomic(dir / "report.txt", rep.table());
}

inline json cmd_evaluate(const json& cfg) {
  const auto out = prepare_output(cfg);
  write_resolved_config(out, "evaluate", cfg);
  const Dataset ds = load_dataset(cfg.at("dataset").get<std::string>());
  const EvalReport rep = evaluate_predictions(ds, cfg.at("predictions").get<std::string>(),
                                             eval_settings(cfg, cfg.at("mesh_resolution")), cfg.at("seed"),
                                             jobs_from(cfg));
  write_report(out, rep);
  return rep.to_json();
}

/// Same inputs and seeds, inference run with the pose frozen and optimized.
inline json cmd_ablate_pose(const json& cfg, int* exit_code = nullptr) {
  const auto out = prepare_output(cfg);
  write_resolved_config(out, "ablate-pose", cfg);
  const Dataset ds = load_dataset(cfg.at("dataset").get<std::string>());
  const EvalSettings es = eval_settings(cfg.at("evaluation"), cfg.at("inference").at("mesh_resolution"));
  const std::uint64_t seed = cfg.at("seed");
  json result;
  std::map<std::string, EvalReport> reports;
  int code = kOk;
  for (const auto& [name, opt] : {std::pair<std::string, bool>{"frozen", false}, {"optimized", true}}) {
    const ReconstructSummary s = run_reconstruct(cfg, out / name, opt);
    if (code == kOk) code = s.exit_code;
    reports[name] = evaluate_predictions(ds, out / name, es, seed, jobs_from(cfg));
    write_report(out / name, reports[name]);
    result[name] = reports[name].to_json();
  }
  // Pair shapes by id; only views reconstructed in both runs count.
  std::map<std::string, double> frozen;
  for (const auto& r : reports["frozen"].shapes) frozen[r.id] = r.f1;
  std::size_t paired = 0, not_worse = 0;
  for (const auto& r : reports["optimized"].shapes)
    if (auto it = frozen.find(r.id); it != frozen.end()) {
      ++paired;
      if (r.f1 >= it->second) ++not_worse;
    }
  const auto sf = reports["frozen"].summarize(), so = reports["optimized"].summarize();
  result["summary"] = {{"paired", paired},
                       {"optimized_not_worse_fraction", paired ? double(not_worse) / double(paired) : 0.0},
                       {"frozen_f1_median", sf.f1_median},
                       {"optimized_f1_median", so.f1_median},
                       {"optimized_pose_deg_median", so.pose_deg_median.value_or(0.0)},
                       {"optimized_pose_trans_median", so.pose_trans_median.value_or(0.0)}};
  write_json(out / "ablation.json", result);
  if (exit_code) *exit_code = code;
  return result;
}

}  // namespace dif::cli
