// Config-driven experiment runner behind the command-line tool.
#ifndef METAGRAD_EXPERIMENT_HPP
#define METAGRAD_EXPERIMENT_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "metagrad/attribution.hpp"
#include "metagrad/baselines.hpp"

namespace metagrad {

namespace fs = std::filesystem;

struct MeasurementSpec {
  /// "test-loss" (one test example) or "mean-test-loss".
  std::string kind = "test-loss";
  std::size_t index = 0;
  double scale = 1.0;
};

struct ExperimentConfig {
  std::string task_id = "task";

  // Dataset: either CSV files or a synthetic generator.
  std::optional<SyntheticSpec> synthetic;
  std::string train_csv, test_csv;
  TaskKind csv_task = TaskKind::Regression;
  int csv_classes = 0;

  ModelFamily model = Mlp{};
  UpdateRule rule;

  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::uint64_t shuffle_seed = 0;
  std::uint64_t init_seed = 0;
  bool shuffle = true;
  RetentionPolicy policy = RetentionPolicy::Bisection;

  std::vector<MeasurementSpec> measurements;

  std::vector<double> drop_fractions{0.01};
  std::size_t subsets = 64;
  std::uint64_t subset_seed = 0;
  std::vector<std::string> methods{"magic"};
  std::size_t bootstrap_resamples = 1000;
  std::uint64_t bootstrap_seed = 0;
  Index trak_projection_dim = 32;
  std::uint64_t trak_seed = 0;
  bool compensated_sum = false;
  /// "reweight" keeps the full-pool batch schedule with zero weights;
  /// "resample" rebuilds the schedule over the surviving examples.
  std::string ground_truth_mode = "reweight";

  std::size_t gradcheck_trials = 20;
  double gradcheck_tolerance = 1e-5;
  std::size_t gradcheck_influence_coords = 4;
  std::uint64_t gradcheck_seed = 0;

  std::size_t probe_index = 0;
  std::size_t probe_measurement = 0;
  std::vector<double> probe_epsilons{0.0, 1e-3, 2e-3, 4e-3, 8e-3};

  std::string output_dir;
  unsigned workers = 1;

  /// Canonical JSON text of the effective config and its digest.
  std::string canonical;
  std::string hash;
};

/// Parses a JSON config. Unknown keys, wrong types and out-of-domain values
/// raise ErrorKind::Config with a "origin:line:" prefix where the offending
/// key can be located. `overrides` are "dotted.key=json-value" pairs applied
/// before validation.
ExperimentConfig parse_config(const std::string& text,
                              const std::string& origin = "<config>",
                              const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const fs::path& path,
                             const std::vector<std::string>& overrides = {});

struct Experiment {
  TrainPlan plan;
  Dataset test;
  std::vector<MeasurementFn> measurements;
};

Experiment build_experiment(const ExperimentConfig& config);

/// Output root: the config's output_dir, else $METAGRAD_OUTPUT_ROOT, else
/// "metagrad-out".
fs::path output_root(const ExperimentConfig& config);

std::string format_double(double value);

/// Digest of a file's bytes.
std::string file_hash(const fs::path& path);

struct TrainArtifact {
  fs::path run_dir;
  OptimizerState final_state;
  std::string manifest_content_hash;
  double seconds = 0.0;
};

/// Trains at w = 1 and writes `<run_dir>/store/` and `<run_dir>/manifest.json`.
TrainArtifact cmd_train(const ExperimentConfig& config, const fs::path& run_dir);

struct AttributeOutput {
  std::vector<InfluenceVector> influences;
  std::vector<BudgetReport> budgets;
  std::vector<fs::path> csv_files;
};

/// One influence CSV (every configured method) and one budget JSON per
/// measurement, under `<out_dir>/<task_id>/<measurement>/`. Fails with
/// ErrorKind::Config on fingerprint mismatch and ErrorKind::Budget when the
/// audit fails.
AttributeOutput cmd_attribute(const ExperimentConfig& config,
                              const fs::path& run_dir, const fs::path& out_dir);

struct LdsSweep {
  /// Indexed [method][drop fraction].
  std::vector<std::string> methods;
  std::vector<double> drop_fractions;
  std::vector<std::vector<LdsReport>> reports;
  fs::path summary_json;
};

LdsSweep cmd_lds(const ExperimentConfig& config, const fs::path& run_dir,
                 const fs::path& out_dir);

struct GradcheckRow {
  std::string check;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

std::vector<GradcheckRow> cmd_gradcheck(const ExperimentConfig& config,
                                        const fs::path& out_dir);

struct ProbeOutput {
  SmoothnessProbe probe;
  double influence = 0.0;
  fs::path csv;
};

ProbeOutput cmd_probe(const ExperimentConfig& config, const fs::path& out_dir);

/// Process exit code for an error kind: 2 config, 3 divergence, 4 budget,
/// 5 undefined metric, 6 I/O, 7 invalid argument.
int exit_code(ErrorKind kind);
inline constexpr int kExitCheckFailed = 8;

}  // namespace metagrad

#endif  // METAGRAD_EXPERIMENT_HPP
