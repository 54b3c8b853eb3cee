// Reference influence estimators: finite differences through retraining,
// the closed-form infinitesimal jackknife for ridge regression, TRAK-lite and
// gradient similarity.
#ifndef METAGRAD_BASELINES_HPP
#define METAGRAD_BASELINES_HPP

#include <cstdint>
#include <string>

#include "metagrad/replay.hpp"

namespace metagrad {

enum class BaselineKind { FiniteDifference, ConvexIj, TrakLite, GradDot };

std::string to_string(BaselineKind kind);

/// Coordinate i = (f(1 + h e_i) − f(1 − h e_i)) / 2h, from 2N retrainings.
InfluenceVector fd_influence(const TrainPlan& plan, const MeasurementFn& phi,
                             double h, unsigned workers = 1);

/// Exact ridge minimizer θ* of Σ_i ½(θᵀx_i − y_i)² + (λ/2)‖θ‖², where λ is
/// the plan's weight decay.
VectorXd ridge_minimizer(const TrainPlan& plan);

/// ∂f/∂w_i = −∇φ(θ*)ᵀ H⁻¹ ∇ℓ(z_i; θ*), H = Σ_i ψ_i ψ_iᵀ + λI, at the exact
/// minimizer. Requires a linear-regression plan trained by plain SGD, whose
/// decoupled decay is then an L2 penalty. Singular H is rejected.
InfluenceVector convex_ij_influence(const TrainPlan& plan,
                                    const MeasurementFn& phi);

/// Ridge added to the projected Gram matrix by trak_lite, relative to its
/// mean diagonal.
inline constexpr double kTrakRelativeRidge = 1e-3;

/// Single-model TRAK. Features are per-example gradients of the scalar model
/// output at the final parameters, projected by a seeded ±1/√k matrix;
/// score_i = −(Pᵀ∇φ)ᵀ(ΦᵀΦ + λI)⁻¹ φ_i · q_i with q_i = ∂ℓ/∂o at z_i.
/// Models with vector outputs use the projected loss gradient with q_i = 1.
/// Scores are meaningful up to a monotone rescaling only.
InfluenceVector trak_lite(const TrainPlan& plan, const MeasurementFn& phi,
                          const VectorXd& final_params, Index projection_dim,
                          std::uint64_t seed);

/// score_i = −∇φ(θ_T) · ∇ℓ(z_i; θ_T).
InfluenceVector grad_dot_scores(const TrainPlan& plan,
                                const MeasurementFn& phi,
                                const VectorXd& final_params);

}  // namespace metagrad

#endif  // METAGRAD_BASELINES_HPP
