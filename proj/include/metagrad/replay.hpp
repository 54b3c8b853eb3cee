// Exact metagradient of f(w) = φ(A(w)) with respect to the data weights,
// by reverse-mode differentiation through every training step.
//
// With Δ_{t+1} = ∂f/∂s_{t+1} and g_t = Σ_{i∈B_t} ∇ℓ(z_i; θ_t) at w = 1:
//
//   u_t      = (∂h_t/∂g)ᵀ Δ_{t+1}
//   β_t[i]   = ∇ℓ(z_i; θ_t) · u_t                     for i ∈ B_t
//   Δ_t      = (∂h_t/∂s)ᵀ Δ_{t+1} + [Σ_{i∈B_t} H(z_i; θ_t) u_t on the θ block]
//
// and ∂f/∂w = Σ_t β_t, starting from Δ_T = (∇φ(θ_T), 0, ...).
#ifndef METAGRAD_REPLAY_HPP
#define METAGRAD_REPLAY_HPP

#include <span>
#include <string>
#include <vector>

#include "metagrad/trainer.hpp"

namespace metagrad {

struct InfluenceVector {
  VectorXd values;
  /// f(1_N).
  double center_output = 0.0;
  std::string plan_fingerprint;
  std::string measurement_fingerprint;
};

std::string fingerprint(const MeasurementFn& phi);

struct ReplayBudget {
  /// Forward training steps of the recorded pass plus all recomputation.
  long forward_steps_total = 0;
  long recompute_steps_total = 0;
  long peak_live_states = 0;
  /// Wall time spent in adjoint steps (not counted as training steps).
  double reverse_seconds = 0.0;
};

/// β_t restricted to B_t (aligned with the batch order) and Δ_t.
struct BatchAdjoint {
  std::vector<std::size_t> indices;
  VectorXd contributions;
  StateAdjoint previous;
};

BatchAdjoint replay_batch_adjoint(const TrainPlan& plan,
                                  const OptimizerState& s,
                                  std::span<const std::size_t> batch,
                                  const StateAdjoint& next);

struct ReplayOptions {
  /// Neumaier-compensated accumulation of β over steps.
  bool compensated_sum = false;
};

struct ReplayResult {
  InfluenceVector influence;
  ReplayBudget budget;
};

/// `store` must come from train_recorded(plan, 1_N). The store is not
/// modified; rematerialized states live on a private working stack.
ReplayResult replay_metagradient(const TrainPlan& plan,
                                 const MeasurementFn& phi,
                                 const CheckpointStore& store,
                                 const ReplayOptions& options = {});

/// Documented constant c in peak_live_states ≤ c·⌈log₂T⌉. The bisection
/// policy keeps at most ⌈log₂T⌉ + 1 states, which is ≤ 2⌈log₂T⌉ for T ≥ 2.
inline constexpr long kLiveStateConstant = 2;

struct BudgetReport {
  bool ok = true;
  long steps = 0;
  long recompute_steps = 0;
  long recompute_bound = 0;
  long peak_live_states = 0;
  long live_state_bound = 0;
  std::string message;
};

/// ⌈log₂ n⌉ for n ≥ 1.
long ceil_log2(long n);

/// Checks recompute ≤ T⌈log₂T⌉ + T and peak ≤ c·max(1, ⌈log₂T⌉).
BudgetReport audit_budget(const ReplayBudget& budget, long steps);

}  // namespace metagrad

#endif  // METAGRAD_REPLAY_HPP
