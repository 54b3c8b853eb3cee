#include "metagrad/replay.hpp"

#include <chrono>
#include <sstream>

namespace metagrad {

std::string fingerprint(const MeasurementFn& phi) {
  Fnv1a h;
  std::ostringstream meta;
  meta.precision(17);
  meta << static_cast<int>(phi.kind) << ';' << phi.scale << ';'
       << phi.payload.size();
  h.update(meta.str());
  for (const auto& z : phi.payload) {
    h.update(z.features.data(),
             static_cast<std::size_t>(z.features.size()) * sizeof(double));
    h.update(&z.target, sizeof(double));
  }
  return h.hex();
}

BatchAdjoint replay_batch_adjoint(const TrainPlan& plan,
                                  const OptimizerState& s,
                                  std::span<const std::size_t> batch,
                                  const StateAdjoint& next) {
  const Index dim = s.params.size();
  BatchAdjoint out;
  out.indices.assign(batch.begin(), batch.end());
  out.contributions.resize(static_cast<Index>(batch.size()));

  MatrixXd per_sample(dim, static_cast<Index>(batch.size()));
  VectorXd g = VectorXd::Zero(dim);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    per_sample.col(static_cast<Index>(k)) =
        grad(plan.model, s.params, plan.data[batch[k]]);
    g += per_sample.col(static_cast<Index>(k));
  }

  auto adj = vjp(plan.rule, s, g, next);
  // ∂g_t/∂w_i = ∇ℓ(z_i; θ_t).
  out.contributions = per_sample.transpose() * adj.grad;
  // ∂g_t/∂θ_t = Σ_i H(z_i; θ_t), routed into the parameter adjoint.
  for (std::size_t k = 0; k < batch.size(); ++k)
    adj.state.params += hvp(plan.model, s.params, plan.data[batch[k]],
                            adj.grad);
  out.previous = std::move(adj.state);
  if (!out.previous.all_finite() || !out.contributions.allFinite())
    throw DivergenceError("non-finite adjoint in reverse pass", s.step);
  return out;
}

ReplayResult replay_metagradient(const TrainPlan& plan,
                                 const MeasurementFn& phi,
                                 const CheckpointStore& store,
                                 const ReplayOptions& options) {
  const long steps = plan.steps();
  if (store.total_steps() != steps)
    fail(ErrorKind::Io, "checkpoint store was recorded for " +
                            std::to_string(store.total_steps()) +
                            " steps, plan has " + std::to_string(steps));
  const OptimizerState& final_state = store.final_state();
  if (final_state.step != steps)
    fail(ErrorKind::Io, "checkpoint store final state is at step " +
                            std::to_string(final_state.step));

  const auto n = static_cast<Index>(plan.pool_size());
  const DataWeights ones = ones_weights(plan.pool_size());

  ReplayResult result;
  InfluenceVector& infl = result.influence;
  ReplayBudget& budget = result.budget;
  infl.values = VectorXd::Zero(n);
  infl.center_output = measure(phi, plan.model, final_state.params);
  infl.plan_fingerprint = fingerprint(plan);
  infl.measurement_fingerprint = fingerprint(phi);
  VectorXd compensation = VectorXd::Zero(n);

  StateAdjoint delta =
      StateAdjoint::zero(plan.rule, final_state.params.size());
  // The reverse pass runs on the unscaled measurement; the scale is applied
  // once to the result, so scaling φ scales every coordinate exactly.
  MeasurementFn unit = phi;
  unit.scale = 1.0;
  delta.params = measure_grad(unit, plan.model, final_state.params);
  if (!delta.params.allFinite())
    throw DivergenceError("non-finite measurement gradient", steps);

  std::vector<OptimizerState> live;
  live.reserve(store.size());
  for (const auto& [step, s] : store.states()) live.push_back(s);
  budget.peak_live_states = static_cast<long>(live.size());

  using Clock = std::chrono::steady_clock;
  Clock::duration reverse_time{};
  long end = steps;
  while (end > 0) {
    if (live.empty() || live.back().step >= end)
      fail(ErrorKind::Io, "missing checkpoint for step " +
                              std::to_string(end - 1) +
                              " (checkpoint store is incomplete)");
    const OptimizerState& top = live.back();
    if (top.step + 1 < end) {
      const long mid = bisection_split(top.step, end);
      OptimizerState s = advance(plan, top, ones, mid - top.step);
      budget.recompute_steps_total += mid - top.step;
      live.push_back(std::move(s));
      budget.peak_live_states =
          std::max(budget.peak_live_states, static_cast<long>(live.size()));
      continue;
    }
    const auto started = Clock::now();
    BatchAdjoint step =
        replay_batch_adjoint(plan, top, plan.schedule.batch(top.step), delta);
    for (std::size_t k = 0; k < step.indices.size(); ++k) {
      const Index i = static_cast<Index>(step.indices[k]);
      const double c = step.contributions[static_cast<Index>(k)];
      if (options.compensated_sum) {
        const double sum = infl.values[i] + c;
        compensation[i] += std::abs(infl.values[i]) >= std::abs(c)
                               ? (infl.values[i] - sum) + c
                               : (c - sum) + infl.values[i];
        infl.values[i] = sum;
      } else {
        infl.values[i] += c;
      }
    }
    delta = std::move(step.previous);
    reverse_time += Clock::now() - started;
    live.pop_back();
    --end;
  }
  if (options.compensated_sum) infl.values += compensation;
  if (phi.scale != 1.0) infl.values *= phi.scale;

  budget.forward_steps_total = steps + budget.recompute_steps_total;
  budget.reverse_seconds =
      std::chrono::duration<double>(reverse_time).count();
  return result;
}

long ceil_log2(long n) {
  require(n >= 1, "ceil_log2 needs n >= 1");
  long bits = 0;
  while ((1L << bits) < n) ++bits;
  return bits;
}

BudgetReport audit_budget(const ReplayBudget& budget, long steps) {
  BudgetReport r;
  r.steps = steps;
  r.recompute_steps = budget.recompute_steps_total;
  r.peak_live_states = budget.peak_live_states;
  if (steps <= 0) {
    r.ok = budget.recompute_steps_total == 0;
    r.message = r.ok ? "ok" : "recomputation with no training steps";
    return r;
  }
  const long lg = ceil_log2(steps);
  r.recompute_bound = steps * lg + steps;
  r.live_state_bound = kLiveStateConstant * std::max(1L, lg);
  std::ostringstream msg;
  if (r.recompute_steps > r.recompute_bound) {
    r.ok = false;
    msg << "recompute steps " << r.recompute_steps << " exceed "
        << r.recompute_bound << "; ";
  }
  if (r.peak_live_states > r.live_state_bound) {
    r.ok = false;
    msg << "peak live states " << r.peak_live_states << " exceed "
        << r.live_state_bound << "; ";
  }
  r.message = r.ok ? "ok" : msg.str();
  return r;
}

}  // namespace metagrad
