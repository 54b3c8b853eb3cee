#include "metagrad/baselines.hpp"

#include "metagrad/parallel.hpp"

namespace metagrad {

std::string to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::FiniteDifference: return "finite-difference";
    case BaselineKind::ConvexIj: return "convex-ij";
    case BaselineKind::TrakLite: return "trak-lite";
    case BaselineKind::GradDot: return "grad-dot";
  }
  return "unknown";
}

InfluenceVector fd_influence(const TrainPlan& plan, const MeasurementFn& phi,
                             double h, unsigned workers) {
  require(h > 0.0, "finite-difference step must be positive");
  const DataWeights ones = ones_weights(plan.pool_size());
  InfluenceVector out;
  out.values.resize(static_cast<Index>(plan.pool_size()));
  out.center_output = model_output(plan, phi, ones);
  out.plan_fingerprint = fingerprint(plan);
  out.measurement_fingerprint = fingerprint(phi);
  parallel_for(plan.pool_size(), workers, [&](std::size_t i) {
    DataWeights up = ones, down = ones;
    up[static_cast<Index>(i)] += h;
    down[static_cast<Index>(i)] -= h;
    out.values[static_cast<Index>(i)] =
        (model_output(plan, phi, up) - model_output(plan, phi, down)) /
        (2.0 * h);
  });
  return out;
}

namespace {

const LinearRegression& require_ridge(const TrainPlan& plan) {
  const auto* lin = std::get_if<LinearRegression>(&plan.model);
  require(lin != nullptr, "convex influence needs a linear-regression plan");
  require(plan.rule.kind == RuleKind::Sgd,
          "convex influence needs plain SGD so weight decay is an L2 penalty");
  return *lin;
}

MatrixXd design(const TrainPlan& plan, bool bias) {
  MatrixXd x(static_cast<Index>(plan.pool_size()), param_dim(plan.model));
  for (std::size_t i = 0; i < plan.pool_size(); ++i)
    x.row(static_cast<Index>(i)) =
        detail::linear_features<double>(plan.data[i].features, bias)
            .transpose();
  return x;
}

Eigen::LDLT<MatrixXd> ridge_hessian(const TrainPlan& plan, const MatrixXd& x) {
  const MatrixXd h =
      x.transpose() * x +
      plan.rule.weight_decay * MatrixXd::Identity(x.cols(), x.cols());
  Eigen::LDLT<MatrixXd> ldlt(h);
  const auto d = ldlt.vectorD();
  if (ldlt.info() != Eigen::Success || d.minCoeff() <= 1e-12 * d.maxCoeff() ||
      d.maxCoeff() <= 0.0)
    fail(ErrorKind::InvalidArgument,
         "ridge Hessian is singular (rank-deficient design with zero ridge)");
  return ldlt;
}

}  // namespace

VectorXd ridge_minimizer(const TrainPlan& plan) {
  const auto& lin = require_ridge(plan);
  const MatrixXd x = design(plan, lin.bias);
  VectorXd y(x.rows());
  for (Index i = 0; i < x.rows(); ++i)
    y[i] = plan.data[static_cast<std::size_t>(i)].target;
  return ridge_hessian(plan, x).solve(x.transpose() * y);
}

InfluenceVector convex_ij_influence(const TrainPlan& plan,
                                    const MeasurementFn& phi) {
  const auto& lin = require_ridge(plan);
  const MatrixXd x = design(plan, lin.bias);
  VectorXd y(x.rows());
  for (Index i = 0; i < x.rows(); ++i)
    y[i] = plan.data[static_cast<std::size_t>(i)].target;
  const auto ldlt = ridge_hessian(plan, x);
  const VectorXd theta = ldlt.solve(x.transpose() * y);
  // H⁻¹∇φ once; then each coordinate is a dot product with ∇ℓ_i = r_i x_i.
  const VectorXd solved = ldlt.solve(measure_grad(phi, plan.model, theta));
  const VectorXd residual = x * theta - y;
  InfluenceVector out;
  out.values = -(residual.array() * (x * solved).array()).matrix();
  out.center_output = measure(phi, plan.model, theta);
  out.plan_fingerprint = fingerprint(plan);
  out.measurement_fingerprint = fingerprint(phi);
  return out;
}

InfluenceVector trak_lite(const TrainPlan& plan, const MeasurementFn& phi,
                          const VectorXd& final_params, Index projection_dim,
                          std::uint64_t seed) {
  require(projection_dim >= 1, "projection_dim must be >= 1");
  const Index dim = param_dim(plan.model);
  require(final_params.size() == dim, "trak_lite: params size mismatch");
  const auto n = static_cast<Index>(plan.pool_size());

  MatrixXd projection(projection_dim, dim);
  Rng rng(derive_seed(seed, 0x7ea4));
  const double scale = 1.0 / std::sqrt(static_cast<double>(projection_dim));
  for (Index c = 0; c < dim; ++c)
    for (Index r = 0; r < projection_dim; ++r)
      projection(r, c) = (rng.next_u64() >> 63) ? scale : -scale;

  const bool scalar_output = output_dim(plan.model) == 1;
  MatrixXd features(n, projection_dim);
  VectorXd q(n);
  for (Index i = 0; i < n; ++i) {
    const Example& z = plan.data[static_cast<std::size_t>(i)];
    if (scalar_output) {
      features.row(i) =
          (projection * output_grad(plan.model, final_params, z.features))
              .transpose();
      const VectorXd o = output<double>(plan.model, final_params, z.features);
      q[i] = detail::head_grad(head_of(plan.model), o, z.target)[0];
    } else {
      features.row(i) =
          (projection * grad(plan.model, final_params, z)).transpose();
      q[i] = 1.0;
    }
  }
  MatrixXd gram = features.transpose() * features;
  const double ridge =
      kTrakRelativeRidge *
      std::max(gram.diagonal().mean(), std::numeric_limits<double>::min());
  gram.diagonal().array() += ridge;
  const VectorXd test = projection * measure_grad(phi, plan.model, final_params);
  const VectorXd solved = gram.ldlt().solve(test);

  InfluenceVector out;
  out.values = -((features * solved).array() * q.array()).matrix();
  out.center_output = measure(phi, plan.model, final_params);
  out.plan_fingerprint = fingerprint(plan);
  out.measurement_fingerprint = fingerprint(phi);
  if (!out.values.allFinite())
    throw DivergenceError("trak-lite produced non-finite scores");
  return out;
}

InfluenceVector grad_dot_scores(const TrainPlan& plan,
                                const MeasurementFn& phi,
                                const VectorXd& final_params) {
  const VectorXd test = measure_grad(phi, plan.model, final_params);
  InfluenceVector out;
  out.values.resize(static_cast<Index>(plan.pool_size()));
  for (std::size_t i = 0; i < plan.pool_size(); ++i)
    out.values[static_cast<Index>(i)] =
        -grad_dot(plan.model, final_params, plan.data[i], test);
  out.center_output = measure(phi, plan.model, final_params);
  out.plan_fingerprint = fingerprint(plan);
  out.measurement_fingerprint = fingerprint(phi);
  return out;
}

}  // namespace metagrad
