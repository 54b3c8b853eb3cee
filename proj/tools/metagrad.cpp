// Command-line front end: train, attribute, lds, gradcheck, probe.
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "metagrad/experiment.hpp"

namespace {

using namespace metagrad;

struct Common {
  std::string config_path;
  std::string run_dir;
  std::string out_dir;
  unsigned workers = 0;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool needs_run) {
  cmd->add_option("-c,--config", c.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  if (needs_run)
    cmd->add_option("-r,--run", c.run_dir,
                    "run artifact directory (default <out>/<task>/run)");
  cmd->add_option("-o,--outdir", c.out_dir,
                  "output root (default: config output_dir, "
                  "$METAGRAD_OUTPUT_ROOT, metagrad-out)");
  cmd->add_option("-j,--workers", c.workers, "worker threads");
  cmd->add_option("--set", c.overrides, "override a config key: key.path=value");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig config = load_config(c.config_path, c.overrides);
  if (!c.out_dir.empty()) config.output_dir = c.out_dir;
  if (c.workers > 0) config.workers = c.workers;
  return config;
}

fs::path run_dir(const Common& c, const ExperimentConfig& config) {
  if (!c.run_dir.empty()) return c.run_dir;
  return output_root(config) / config.task_id / "run";
}

int run(int argc, char** argv) {
  CLI::App app{"Exact data-weight influence by replaying the training trajectory"};
  app.require_subcommand(1);
  Common common;
  auto* train = app.add_subcommand("train", "train at w = 1 and store checkpoints");
  add_common(train, common, true);
  auto* attribute =
      app.add_subcommand("attribute", "influence vectors for every measurement");
  add_common(attribute, common, true);
  auto* lds = app.add_subcommand("lds", "linear datamodeling score sweep");
  add_common(lds, common, true);
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference derivative checks");
  add_common(gradcheck, common, false);
  auto* probe = app.add_subcommand("probe", "smoothness probe along one weight");
  add_common(probe, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::Config);
  }

  const ExperimentConfig config = load(common);
  const fs::path out = output_root(config);
  if (train->parsed()) {
    const auto art = cmd_train(config, run_dir(common, config));
    std::printf("trained %s: %zu steps in %.3fs -> %s\n", config.task_id.c_str(),
                static_cast<std::size_t>(art.final_state.step), art.seconds,
                art.run_dir.string().c_str());
  } else if (attribute->parsed()) {
    const auto res = cmd_attribute(config, run_dir(common, config), out);
    for (std::size_t k = 0; k < res.csv_files.size(); ++k)
      std::printf("%s  %s\n", res.csv_files[k].string().c_str(),
                  res.budgets[k].message.c_str());
  } else if (lds->parsed()) {
    const auto sweep = cmd_lds(config, run_dir(common, config), out);
    for (std::size_t m = 0; m < sweep.methods.size(); ++m)
      for (const auto& r : sweep.reports[m])
        std::printf("%-10s p=%-5g LDS=%.4f  CI95=[%.4f, %.4f]\n",
                    sweep.methods[m].c_str(), r.drop_fraction, r.mean,
                    r.interval.low, r.interval.high);
    std::printf("summary: %s\n", sweep.summary_json.string().c_str());
  } else if (gradcheck->parsed()) {
    bool ok = true;
    for (const auto& row : cmd_gradcheck(config, out)) {
      std::printf("%-18s max_rel_err=%.3e tol=%.1e %s\n", row.check.c_str(),
                  row.max_rel_error, row.tolerance, row.pass ? "PASS" : "FAIL");
      ok = ok && row.pass;
    }
    if (!ok) return kExitCheckFailed;
  } else if (probe->parsed()) {
    const auto res = cmd_probe(config, out);
    for (const auto& d : res.probe.doublings)
      std::printf("eps=%g  ratio=%.6f\n", d.epsilon, d.ratio);
    if (res.probe.extrapolated_slope)
      std::printf("slope=%.12g influence=%.12g\n", *res.probe.extrapolated_slope,
                  res.influence);
    std::printf("csv: %s\n", res.csv.string().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const metagrad::DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << '\n';
    return metagrad::exit_code(metagrad::ErrorKind::Divergence);
  } catch (const metagrad::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return metagrad::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
