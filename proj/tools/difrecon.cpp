#include "dif/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  int jobs = 0;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "Override a config value, key.path=value (repeatable)");
  sub->add_option("--jobs", c.jobs, "Worker threads (default: DIF_JOBS or 1)")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace dif::cli;
  CLI::App app{"Shape reconstruction from single depth views with a deformed implicit prior"};
  app.set_version_flag("--version", dif::kVersion);
  app.require_subcommand(1);
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the resolved config and exit");

  struct Sub {
    const char* name;
    const char* help;
    Common opts;
  };
  std::vector<Sub> subs{{"gen-data", "Generate a synthetic dataset", {}},
                        {"train", "Train a shape prior", {}},
                        {"reconstruct", "Reconstruct shapes from depth views", {}},
                        {"evaluate", "Score reconstructions against ground truth", {}},
                        {"ablate-pose", "Compare frozen and optimized poses", {}}};
  for (auto& s : subs) add_common(app.add_subcommand(s.name, s.help), s.opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  for (auto& s : subs) {
    if (!app.got_subcommand(s.name)) continue;
    try {
      std::optional<std::filesystem::path> file;
      if (!s.opts.config.empty()) file = s.opts.config;
      nlohmann::json cfg = resolve_config(s.name, file, s.opts.sets);
      if (s.opts.jobs > 0) {
        if (!cfg.contains("jobs")) throw UsageError(std::string(s.name) + " does not take --jobs");
        cfg["jobs"] = s.opts.jobs;
      }
      if (print_config) {
        std::cout << cfg.dump(2) << '\n';
        return kOk;
      }
      const std::string cmd = s.name;
      int code = kOk;
      nlohmann::json summary;
      if (cmd == "gen-data") {
        const auto m = cmd_gen_data(cfg);
        summary = {{"shapes", m.at("count")}, {"output", cfg.at("output")}};
      } else if (cmd == "train") {
        summary = cmd_train(cfg);
      } else if (cmd == "reconstruct") {
        summary = cmd_reconstruct(cfg, &code);
      } else if (cmd == "evaluate") {
        summary = cmd_evaluate(cfg).at("categories");
        std::ifstream table(std::filesystem::path(cfg.at("output").get<std::string>()) / "report.txt");
        std::cout << table.rdbuf();
      } else {
        summary = cmd_ablate_pose(cfg, &code).at("summary");
      }
      std::cout << summary.dump() << '\n';
      return code;
    } catch (...) {
      const auto e = std::current_exception();
      try {
        std::rethrow_exception(e);
      } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
      }
      return exit_code_for(e);
    }
  }
  return kUsage;
}
