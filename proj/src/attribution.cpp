#include "metagrad/attribution.hpp"

#include <algorithm>
#include <numeric>

#include "metagrad/parallel.hpp"

namespace metagrad {

double TaylorPredictor::predict(const DataWeights& w) const {
  require(w.size() == influence_.values.size(),
          "predict: weight vector length does not match the influence vector");
  return influence_.center_output +
         influence_.values.dot(w - DataWeights::Ones(w.size()));
}

std::size_t drop_count(std::size_t n, double p) {
  return static_cast<std::size_t>(
      std::floor(p * static_cast<double>(n) + 1e-9));
}

std::vector<SubsetSample> sample_subsets(std::size_t n, double p,
                                         std::size_t m, std::uint64_t seed) {
  require(p > 0.0 && p < 1.0, "drop fraction must lie in (0, 1)");
  const std::size_t k = drop_count(n, p);
  require(k >= 1, "drop fraction drops no examples (floor(pN) = 0)");
  std::vector<SubsetSample> out;
  out.reserve(m);
  std::vector<std::size_t> pool(n);
  for (std::size_t j = 0; j < m; ++j) {
    SubsetSample s;
    s.seed = derive_seed(seed, j);
    s.drop_fraction = p;
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    Rng rng(s.seed);
    // Partial Fisher-Yates: the first k slots become a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i)
      std::swap(pool[i], pool[i + rng.below(n - i)]);
    s.dropped.assign(pool.begin(), pool.begin() + static_cast<long>(k));
    std::sort(s.dropped.begin(), s.dropped.end());
    s.weights = DataWeights::Ones(static_cast<Index>(n));
    for (std::size_t i : s.dropped) s.weights[static_cast<Index>(i)] = 0.0;
    out.push_back(std::move(s));
  }
  return out;
}

MatrixXd ground_truth(const TrainPlan& plan,
                      const std::vector<MeasurementFn>& phis,
                      const std::vector<SubsetSample>& subsets,
                      unsigned workers) {
  MatrixXd out(static_cast<Index>(subsets.size()),
               static_cast<Index>(phis.size()));
  parallel_for(subsets.size(), workers, [&](std::size_t j) {
    const OptimizerState s = [&] {
      try {
        return train(plan, subsets[j].weights);
      } catch (const DivergenceError& e) {
        throw DivergenceError(
            "subset " + std::to_string(j) + ": " + e.what(), e.step());
      }
    }();
    for (std::size_t k = 0; k < phis.size(); ++k)
      out(static_cast<Index>(j), static_cast<Index>(k)) =
          measure(phis[k], plan.model, s.params);
  });
  return out;
}

VectorXd ground_truth(const TrainPlan& plan, const MeasurementFn& phi,
                      const std::vector<SubsetSample>& subsets,
                      unsigned workers) {
  return ground_truth(plan, std::vector<MeasurementFn>{phi}, subsets, workers)
      .col(0);
}

VectorXd average_ranks(const VectorXd& x) {
  const auto n = static_cast<std::size_t>(x.size());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[static_cast<Index>(a)] < x[static_cast<Index>(b)];
  });
  VectorXd ranks(x.size());
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && x[static_cast<Index>(order[j + 1])] ==
                            x[static_cast<Index>(order[i])])
      ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      ranks[static_cast<Index>(order[k])] = rank;
    i = j + 1;
  }
  return ranks;
}

double lds(const VectorXd& predicted, const VectorXd& truth) {
  require(predicted.size() == truth.size(),
          "lds: predicted and true vectors differ in length");
  if (predicted.size() < 2)
    fail(ErrorKind::UndefinedMetric, "Spearman correlation needs >= 2 pairs");
  if (!predicted.allFinite() || !truth.allFinite())
    fail(ErrorKind::UndefinedMetric, "Spearman correlation of non-finite data");
  const VectorXd a = average_ranks(predicted);
  const VectorXd b = average_ranks(truth);
  const VectorXd da = a.array() - a.mean();
  const VectorXd db = b.array() - b.mean();
  const double va = da.squaredNorm(), vb = db.squaredNorm();
  if (va == 0.0 || vb == 0.0)
    fail(ErrorKind::UndefinedMetric,
         "Spearman correlation undefined: a vector has zero rank variance");
  return std::clamp(da.dot(db) / std::sqrt(va * vb), -1.0, 1.0);
}

namespace {

std::optional<double> mean_lds(const MatrixXd& predicted,
                               const MatrixXd& truth) {
  double total = 0.0;
  int defined = 0;
  for (Index k = 0; k < predicted.cols(); ++k) {
    try {
      total += lds(predicted.col(k), truth.col(k));
      ++defined;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::UndefinedMetric) throw;
    }
  }
  if (defined == 0) return std::nullopt;
  return total / defined;
}

double percentile(std::vector<double> sorted_values, double q) {
  std::sort(sorted_values.begin(), sorted_values.end());
  const double pos = q * static_cast<double>(sorted_values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted_values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted_values[lo] + frac * (sorted_values[hi] - sorted_values[lo]);
}

}  // namespace

Interval bootstrap_mean_lds(const MatrixXd& predicted, const MatrixXd& truth,
                            std::size_t resamples, std::uint64_t seed,
                            double level) {
  require(predicted.rows() == truth.rows() && predicted.cols() == truth.cols(),
          "bootstrap: shape mismatch");
  require(level > 0.0 && level < 1.0, "bootstrap level must lie in (0, 1)");
  const Index m = predicted.rows();
  Rng rng(seed);
  std::vector<double> stats;
  stats.reserve(resamples);
  MatrixXd p(m, predicted.cols()), t(m, truth.cols());
  for (std::size_t r = 0; r < resamples; ++r) {
    for (Index j = 0; j < m; ++j) {
      const auto src = static_cast<Index>(rng.below(static_cast<std::uint64_t>(m)));
      p.row(j) = predicted.row(src);
      t.row(j) = truth.row(src);
    }
    if (auto v = mean_lds(p, t)) stats.push_back(*v);
  }
  if (stats.empty())
    fail(ErrorKind::UndefinedMetric, "bootstrap produced no defined resample");
  const double tail = 0.5 * (1.0 - level);
  return {percentile(stats, tail), percentile(stats, 1.0 - tail)};
}

LdsReport make_lds_report(std::vector<std::string> task_names,
                          MatrixXd predicted, MatrixXd truth,
                          double drop_fraction,
                          std::size_t bootstrap_resamples,
                          std::uint64_t bootstrap_seed) {
  require(predicted.rows() == truth.rows() && predicted.cols() == truth.cols(),
          "lds report: shape mismatch");
  require(static_cast<Index>(task_names.size()) == predicted.cols(),
          "lds report: one name per task required");
  LdsReport r;
  r.task_names = std::move(task_names);
  r.drop_fraction = drop_fraction;
  r.subset_count = static_cast<std::size_t>(predicted.rows());
  double total = 0.0;
  int defined = 0;
  for (Index k = 0; k < predicted.cols(); ++k) {
    try {
      const double rho = lds(predicted.col(k), truth.col(k));
      r.per_task.emplace_back(rho);
      total += rho;
      ++defined;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::UndefinedMetric) throw;
      r.per_task.emplace_back(std::nullopt);
    }
  }
  r.mean = defined ? total / defined : std::numeric_limits<double>::quiet_NaN();
  if (defined > 0 && bootstrap_resamples > 0) {
    r.interval = bootstrap_mean_lds(predicted, truth, bootstrap_resamples,
                                    bootstrap_seed);
  } else {
    r.interval = {r.mean, r.mean};
  }
  r.predicted = std::move(predicted);
  r.truth = std::move(truth);
  return r;
}

VectorXd predict_subsets(const TaylorPredictor& predictor,
                         const std::vector<SubsetSample>& subsets) {
  VectorXd out(static_cast<Index>(subsets.size()));
  for (std::size_t j = 0; j < subsets.size(); ++j)
    out[static_cast<Index>(j)] = predictor.predict(subsets[j].weights);
  return out;
}

SmoothnessProbe smoothness_probe(const TrainPlan& plan,
                                 const MeasurementFn& phi, std::size_t index,
                                 const std::vector<double>& epsilons) {
  require(index < plan.pool_size(), "probe index out of range");
  SmoothnessProbe probe;
  probe.index = index;
  probe.epsilons = epsilons;
  const DataWeights ones = ones_weights(plan.pool_size());
  const double center = model_output(plan, phi, ones);
  for (double eps : epsilons) {
    require(std::isfinite(eps), "probe epsilon must be finite");
    if (eps == 0.0) {
      probe.deltas.push_back(0.0);
      probe.errors.emplace_back();
      continue;
    }
    DataWeights w = ones;
    w[static_cast<Index>(index)] += eps;
    try {
      probe.deltas.push_back(model_output(plan, phi, w) - center);
      probe.errors.emplace_back();
    } catch (const DivergenceError& e) {
      probe.deltas.push_back(std::numeric_limits<double>::quiet_NaN());
      probe.errors.emplace_back(e.what());
    }
  }
  std::optional<double> smallest;
  for (std::size_t a = 0; a < epsilons.size(); ++a) {
    if (epsilons[a] == 0.0) continue;
    for (std::size_t b = 0; b < epsilons.size(); ++b) {
      if (epsilons[b] != 2.0 * epsilons[a]) continue;
      const double da = probe.deltas[a], db = probe.deltas[b];
      probe.doublings.push_back({epsilons[a], db / da});
      if (epsilons[a] > 0.0 && std::isfinite(da) && std::isfinite(db) &&
          (!smallest || epsilons[a] < *smallest)) {
        smallest = epsilons[a];
        const double e = epsilons[a];
        probe.extrapolated_slope = 2.0 * da / e - db / (2.0 * e);
      }
    }
  }
  std::sort(probe.doublings.begin(), probe.doublings.end(),
            [](const auto& x, const auto& y) { return x.epsilon < y.epsilon; });
  return probe;
}

}  // namespace metagrad
