#include "metagrad/trainer.hpp"

#include <sstream>

namespace metagrad {

BatchSchedule::BatchSchedule(std::size_t n, std::size_t batch_size,
                             std::size_t epochs, std::uint64_t seed,
                             bool shuffle)
    : n_(n) {
  require(n >= 1, "batch schedule needs N >= 1");
  require(batch_size >= 1, "batch size must be >= 1");
  order_.reserve(n * epochs);
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    if (shuffle) {
      Rng rng(derive_seed(seed, e));
      rng.shuffle(perm);
    }
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t stop = std::min(n, start + batch_size);
      order_.insert(order_.end(), perm.begin() + static_cast<long>(start),
                    perm.begin() + static_cast<long>(stop));
      offsets_.push_back(order_.size());
    }
  }
}

BatchSchedule BatchSchedule::from_batches(
    std::size_t n, std::vector<std::vector<std::size_t>> batches) {
  BatchSchedule s;
  s.n_ = n;
  for (const auto& b : batches) {
    for (std::size_t i : b) require(i < n, "batch index out of range");
    s.order_.insert(s.order_.end(), b.begin(), b.end());
    s.offsets_.push_back(s.order_.size());
  }
  return s;
}

std::span<const std::size_t> BatchSchedule::batch(long t) const {
  require(t >= 0 && t < steps(), "batch index t out of range");
  const auto begin = offsets_[static_cast<std::size_t>(t)];
  const auto end = offsets_[static_cast<std::size_t>(t) + 1];
  return {order_.data() + begin, end - begin};
}

void validate(const TrainPlan& plan) {
  validate(plan.model, plan.data);
  validate(plan.rule);
  require(plan.schedule.pool_size() == plan.data.size(),
          "batch schedule was built for a different pool size");
}

TrainPlan make_plan(Dataset data, ModelFamily model, UpdateRule rule,
                    BatchSchedule schedule, std::uint64_t init_seed) {
  rule.schedule.total_steps = schedule.steps();
  TrainPlan plan{std::move(data), std::move(model), rule, std::move(schedule),
                 init_seed};
  validate(plan);
  return plan;
}

std::string fingerprint(const TrainPlan& plan) {
  Fnv1a h;
  h.update(describe(plan.model)).update(describe(plan.rule));
  std::ostringstream meta;
  meta.precision(17);
  const auto& lr = plan.rule.schedule;
  meta << lr.start_factor << ',' << lr.peak_fraction << ',' << lr.end_factor
       << ',' << lr.total_steps << ';' << plan.init_seed << ';'
       << plan.steps() << ';' << plan.data.size();
  h.update(meta.str());
  for (long t = 0; t < plan.steps(); ++t) {
    const auto b = plan.schedule.batch(t);
    h.update(b.data(), b.size() * sizeof(std::size_t));
    h.update("|");
  }
  for (const auto& z : plan.data.examples()) {
    h.update(z.features.data(),
             static_cast<std::size_t>(z.features.size()) * sizeof(double));
    h.update(&z.target, sizeof(double));
  }
  return h.hex();
}

OptimizerState initial_state(const TrainPlan& plan) {
  return OptimizerState::initial(plan.rule,
                                 initial_params(plan.model, plan.init_seed));
}

VectorXd weighted_grad(const TrainPlan& plan, const OptimizerState& s,
                       const DataWeights& w, long t) {
  require(w.size() == static_cast<Index>(plan.pool_size()),
          "data weights must have one entry per training example");
  VectorXd g = VectorXd::Zero(s.params.size());
  try {
    for (std::size_t i : plan.schedule.batch(t))
      g += w[static_cast<Index>(i)] * grad(plan.model, s.params, plan.data[i]);
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.what(), t);
  }
  if (!g.allFinite())
    throw DivergenceError("non-finite minibatch gradient", t);
  return g;
}

OptimizerState advance(const TrainPlan& plan, OptimizerState s,
                       const DataWeights& w, long count) {
  require(s.step + count <= plan.steps(), "advance past the final step");
  for (long k = 0; k < count; ++k)
    s = apply(plan.rule, s, weighted_grad(plan, s, w, s.step));
  return s;
}

OptimizerState train(const TrainPlan& plan, const DataWeights& w) {
  return advance(plan, initial_state(plan), w, plan.steps());
}

std::pair<OptimizerState, CheckpointStore> train_recorded(
    const TrainPlan& plan, const DataWeights& w, RetentionPolicy policy) {
  CheckpointStore store(policy, plan.steps());
  OptimizerState s = initial_state(plan);
  for (long t = 0; t < plan.steps(); ++t) {
    if (store.wants(t)) store.put(s);
    s = apply(plan.rule, s, weighted_grad(plan, s, w, t));
  }
  store.set_final(s);
  return {std::move(s), std::move(store)};
}

double model_output(const TrainPlan& plan, const MeasurementFn& phi,
                    const DataWeights& w) {
  return measure(phi, plan.model, train(plan, w).params);
}

}  // namespace metagrad
