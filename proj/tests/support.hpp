// Shared fixtures and finite-difference oracles for the unit tests.
#ifndef METAGRAD_TESTS_SUPPORT_HPP
#define METAGRAD_TESTS_SUPPORT_HPP

#include <filesystem>
#include <string>

#include "metagrad/replay.hpp"

namespace testing {

using namespace metagrad;

inline VectorXd random_vector(Rng& rng, Index n, double scale = 1.0) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

/// Fourth-order central differences of a scalar function.
template <typename F>
VectorXd fd_gradient(F&& f, const VectorXd& x, double h) {
  VectorXd g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    auto at = [&](double step) {
      VectorXd moved = x;
      moved[i] += step;
      return f(moved);
    };
    g[i] = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
  }
  return g;
}

/// Second-order central differences, exactly as a reader would write them.
template <typename F>
VectorXd central_gradient(F&& f, const VectorXd& x, double h) {
  VectorXd g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    VectorXd up = x, down = x;
    up[i] += h;
    down[i] -= h;
    g[i] = (f(up) - f(down)) / (2.0 * h);
  }
  return g;
}

/// Relative error with the denominator floored at `rel_floor` times the
/// reference's largest magnitude.
inline double scaled_error(const VectorXd& value, const VectorXd& reference,
                           double rel_floor = 1e-3) {
  const double scale = reference.cwiseAbs().maxCoeff();
  return max_relative_error(value, reference,
                            std::max(rel_floor * scale, 1e-300));
}

inline Example example(std::initializer_list<double> x, double y) {
  VectorXd f(static_cast<Index>(x.size()));
  Index i = 0;
  for (double v : x) f[i++] = v;
  return {f, y};
}

inline Dataset two_class(std::size_t n, Index dim, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.generator = "gaussian-blobs";
  spec.n_train = n;
  spec.n_test = 8;
  spec.dim = dim;
  spec.noise = 0.05;
  spec.seed = seed;
  return make_synthetic(spec).train;
}

inline TrainTestSplit moons(std::size_t n, std::size_t n_test,
                            std::uint64_t seed) {
  SyntheticSpec spec;
  spec.generator = "moons";
  spec.n_train = n;
  spec.n_test = n_test;
  spec.noise = 0.1;
  spec.seed = seed;
  return make_synthetic(spec);
}

inline TrainTestSplit linear_gaussian(std::size_t n, Index dim,
                                      std::uint64_t seed, double noise = 0.1) {
  SyntheticSpec spec;
  spec.generator = "linear-gaussian";
  spec.n_train = n;
  spec.n_test = 8;
  spec.dim = dim;
  spec.noise = noise;
  spec.seed = seed;
  return make_synthetic(spec);
}

inline UpdateRule sgd(double lr, double weight_decay = 0.0) {
  UpdateRule r;
  r.kind = RuleKind::Sgd;
  r.schedule.max_lr = lr;
  r.weight_decay = weight_decay;
  return r;
}

inline UpdateRule momentum(double lr, double mu = 0.9) {
  UpdateRule r = sgd(lr);
  r.kind = RuleKind::SgdMomentum;
  r.momentum = mu;
  return r;
}

inline UpdateRule adam(double lr) {
  UpdateRule r = sgd(lr);
  r.kind = RuleKind::Adam;
  return r;
}

/// MLP 2-8-1 on moons with a logistic head.
inline TrainPlan mlp_plan(const UpdateRule& rule, std::size_t n,
                          std::size_t batch, std::size_t epochs,
                          std::uint64_t seed = 1) {
  auto split = moons(n, 4, seed);
  Mlp mlp;
  mlp.widths = {2, 8, 1};
  mlp.head = Head::Logistic;
  return make_plan(std::move(split.train), mlp, rule,
                   BatchSchedule(n, batch, epochs, seed + 10), seed + 20);
}

inline MeasurementFn test_loss(const TrainPlan& plan, std::uint64_t seed = 5) {
  // A fresh draw stands in for a held-out point.
  SyntheticSpec spec;
  spec.generator = plan.data.task_kind() == TaskKind::Regression
                       ? "linear-gaussian"
                       : "moons";
  spec.n_train = 1;
  spec.n_test = 1;
  spec.dim = plan.data.feature_dim();
  spec.seed = seed;
  return MeasurementFn::on_example(make_synthetic(spec).test[0], "phi");
}

inline VectorXd fd_influence_of(const TrainPlan& plan, const MeasurementFn& phi,
                                double h) {
  const DataWeights ones = ones_weights(plan.pool_size());
  VectorXd out(static_cast<Index>(plan.pool_size()));
  for (std::size_t i = 0; i < plan.pool_size(); ++i) {
    DataWeights up = ones, down = ones;
    up[static_cast<Index>(i)] += h;
    down[static_cast<Index>(i)] -= h;
    out[static_cast<Index>(i)] =
        (model_output(plan, phi, up) - model_output(plan, phi, down)) / (2 * h);
  }
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("metagrad-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing

#endif  // METAGRAD_TESTS_SUPPORT_HPP
