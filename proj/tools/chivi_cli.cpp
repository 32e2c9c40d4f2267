#include "experiments.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace chivi;
using namespace chivi::cli;

#ifndef CHIVI_SCHEMA_PATH
#define CHIVI_SCHEMA_PATH "share/config_schema.json"
#endif

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  long long seed = -1;
  bool paper_scale = false;
};

RunConfig load_and_validate(const CommonArgs& args) {
  const json config = load_json(args.config_path);
  const json schema = load_json(CHIVI_SCHEMA_PATH);
  validate_config(config, schema);
  RunConfig cfg = parse_run_config(config);
  if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
  if (args.seed >= 0) cfg.seed = static_cast<std::uint64_t>(args.seed);
  if (args.paper_scale) cfg.paper_scale = true;
  return cfg;
}

int do_validate(const CommonArgs& args) {
  const RunConfig cfg = load_and_validate(args);
  std::cout << "config ok: experiment " << cfg.experiment << ", seed "
            << cfg.seed << "\n";
  return 0;
}

int do_run(const CommonArgs& args) {
  RunConfig cfg = load_and_validate(args);

  // fail on missing inputs before any compute
  for (const char* key : {"csv", "events_csv"})
    if (cfg.model.contains(key)) {
      const auto path = cfg.model[key].get<std::string>();
      if (!std::filesystem::exists(path))
        throw std::runtime_error("data file not found: " + path);
    }
  if (cfg.paper_scale)
    std::cerr << "warning: paper-scale settings selected; expect a long run\n";

  std::filesystem::create_directories(cfg.output_dir);

  // marked incomplete until the experiment finishes
  RunMeta meta;
  meta.config = resolved_config(cfg);
  meta.seed = cfg.seed;
  write_run_meta(cfg.output_dir, meta);

  ExperimentResult result = dispatch_experiment(cfg, cfg.output_dir);
  meta.warnings = result.meta.warnings;
  meta.notes = result.meta.notes;
  meta.status = "complete";
  write_run_meta(cfg.output_dir, meta);

  for (const auto& w : meta.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "wrote " << cfg.output_dir << "\n";
  return result.exit_code;
}

int do_report(const std::string& dir) {
  const auto meta_path = dir + "/run_meta.json";
  if (!std::filesystem::exists(meta_path))
    throw std::runtime_error("no run_meta.json under " + dir);
  const json meta = load_json(meta_path);
  std::cout << "experiment: " << meta["config"].value("experiment", "?")
            << "\nstatus: " << meta.value("status", "?") << "\nseed: "
            << meta.value("seed", 0ull) << "\n";
  for (const auto& w : meta.value("warnings", std::vector<std::string>{}))
    std::cout << "warning: " << w << "\n";

  const auto table_path = dir + "/table.txt";
  if (std::filesystem::exists(table_path)) {
    std::ifstream in(table_path);
    std::cout << "\n" << in.rdbuf();
  }
  const auto report_path = dir + "/report.json";
  if (std::filesystem::exists(report_path)) {
    const json report = load_json(report_path);
    std::cout << "\nproperty checks: " << report["checks"].size()
              << ", failures: " << report.value("failures", 0) << "\n";
    for (const auto& c : report["checks"])
      if (!c.value("pass", true))
        std::cout << "failed: " << c.value("name", "?") << " (slack "
                  << c.value("slack", 0.0) << ")\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"chi-divergence variational inference experiment runner"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string report_dir;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config_path, "JSON run configuration")
        ->required();
    sub->add_option("--out", args.out_dir, "output directory override");
    sub->add_option("--seed", args.seed, "seed override");
    sub->add_flag("--paper-scale", args.paper_scale,
                  "use paper-scale repeats and grids");
  };

  auto* run_cmd = app.add_subcommand("run", "execute an experiment");
  add_common(run_cmd);
  auto* validate_cmd =
      app.add_subcommand("validate", "check a config against the schema");
  add_common(validate_cmd);
  auto* report_cmd =
      app.add_subcommand("report", "summarize an output directory");
  report_cmd->add_option("--out", report_dir, "output directory to summarize")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) return do_run(args);
    if (validate_cmd->parsed()) return do_validate(args);
    return do_report(report_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
