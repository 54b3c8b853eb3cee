// Predictive data attribution: the first-order Taylor predictor, subset
// sampling, retraining ground truth, the linear datamodeling score (LDS) and
// the smoothness probe.
#ifndef METAGRAD_ATTRIBUTION_HPP
#define METAGRAD_ATTRIBUTION_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metagrad/replay.hpp"

namespace metagrad {

/// f̂(w) = f(1) + influenceᵀ(w − 1).
class TaylorPredictor {
 public:
  explicit TaylorPredictor(InfluenceVector influence)
      : influence_(std::move(influence)) {}
  TaylorPredictor(VectorXd influence, double center_output)
      : influence_{std::move(influence), center_output, {}, {}} {}

  double predict(const DataWeights& w) const;
  double center_output() const { return influence_.center_output; }
  const VectorXd& coefficients() const { return influence_.values; }

 private:
  InfluenceVector influence_;
};

struct SubsetSample {
  DataWeights weights;
  /// Zeroed indices, ascending.
  std::vector<std::size_t> dropped;
  double drop_fraction = 0.0;
  std::uint64_t seed = 0;
};

/// ⌊pN⌋, robust to p·N landing a hair below an integer in binary floating
/// point (e.g. 0.29·100).
std::size_t drop_count(std::size_t n, double p);

/// m weight vectors over N examples, each with exactly ⌊pN⌋ zeros chosen
/// uniformly without replacement. Subset j uses a seed derived from
/// (seed, j).
std::vector<SubsetSample> sample_subsets(std::size_t n, double p,
                                         std::size_t m, std::uint64_t seed);

/// Entry (j, k) = f_k(w^(j)): one retraining per subset, measured under every
/// φ_k. Subsets are distributed over `workers` threads; results are ordered
/// by subset index.
MatrixXd ground_truth(const TrainPlan& plan,
                      const std::vector<MeasurementFn>& phis,
                      const std::vector<SubsetSample>& subsets,
                      unsigned workers = 1);

VectorXd ground_truth(const TrainPlan& plan, const MeasurementFn& phi,
                      const std::vector<SubsetSample>& subsets,
                      unsigned workers = 1);

/// Average ranks (1-based); tied values share the mean of their positions.
VectorXd average_ranks(const VectorXd& x);

/// Spearman correlation of predicted vs. true outputs. Throws UndefinedMetric
/// when either vector has zero rank variance or fewer than two entries.
double lds(const VectorXd& predicted, const VectorXd& truth);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap of the task-averaged LDS, resampling subsets (rows)
/// with replacement. Resamples with an undefined correlation are skipped.
Interval bootstrap_mean_lds(const MatrixXd& predicted, const MatrixXd& truth,
                            std::size_t resamples, std::uint64_t seed,
                            double level = 0.95);

struct LdsReport {
  std::vector<std::string> task_names;
  /// Per-task Spearman ρ; nullopt when undefined.
  std::vector<std::optional<double>> per_task;
  /// Mean over defined tasks (NaN if none).
  double mean = 0.0;
  Interval interval;
  /// m × tasks.
  MatrixXd predicted;
  MatrixXd truth;
  double drop_fraction = 0.0;
  std::size_t subset_count = 0;
};

LdsReport make_lds_report(std::vector<std::string> task_names,
                          MatrixXd predicted, MatrixXd truth,
                          double drop_fraction,
                          std::size_t bootstrap_resamples = 1000,
                          std::uint64_t bootstrap_seed = 0);

/// Predictions of a Taylor predictor per subset.
VectorXd predict_subsets(const TaylorPredictor& predictor,
                         const std::vector<SubsetSample>& subsets);

struct SmoothnessProbe {
  std::size_t index = 0;
  std::vector<double> epsilons;
  /// Δ(ε) = f(1 + ε e_i) − f(1), NaN where retraining diverged.
  std::vector<double> deltas;
  std::vector<std::string> errors;
  struct Doubling {
    double epsilon;
    double ratio;  ///< Δ(2ε) / Δ(ε)
  };
  std::vector<Doubling> doublings;
  /// 2Δ(ε)/ε − Δ(2ε)/(2ε) at the smallest positive ε with a 2ε partner.
  std::optional<double> extrapolated_slope;
};

SmoothnessProbe smoothness_probe(const TrainPlan& plan,
                                 const MeasurementFn& phi, std::size_t index,
                                 const std::vector<double>& epsilons);

}  // namespace metagrad

#endif  // METAGRAD_ATTRIBUTION_HPP
