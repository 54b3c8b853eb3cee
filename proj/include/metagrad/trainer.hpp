// The deterministic iterative learning algorithm A(w): fixed initialization,
// fixed batch schedule and w-weighted minibatch gradients.
#ifndef METAGRAD_TRAINER_HPP
#define METAGRAD_TRAINER_HPP

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metagrad/checkpoint.hpp"
#include "metagrad/dataset.hpp"
#include "metagrad/measurement.hpp"
#include "metagrad/model.hpp"
#include "metagrad/optim.hpp"

namespace metagrad {

/// Per-example importance weights; the reference point is all ones.
using DataWeights = VectorXd;

inline DataWeights ones_weights(std::size_t n) {
  return DataWeights::Ones(static_cast<Index>(n));
}

/// Minibatch index lists B_0..B_{T-1}. Each epoch visits a seeded permutation
/// of [0, N) in consecutive chunks of batch_size; a short final chunk is kept.
/// The schedule depends only on (seed, N, batch_size, epochs), never on the
/// data weights.
class BatchSchedule {
 public:
  BatchSchedule() = default;
  BatchSchedule(std::size_t n, std::size_t batch_size, std::size_t epochs,
                std::uint64_t seed, bool shuffle = true);

  /// Explicit schedule, mostly for tests.
  static BatchSchedule from_batches(std::size_t n,
                                    std::vector<std::vector<std::size_t>> batches);

  long steps() const { return static_cast<long>(offsets_.size()) - 1; }
  std::size_t pool_size() const { return n_; }
  std::span<const std::size_t> batch(long t) const;

 private:
  std::size_t n_ = 0;
  std::vector<std::size_t> order_;
  std::vector<std::size_t> offsets_{0};
};

struct TrainPlan {
  Dataset data;
  ModelFamily model;
  UpdateRule rule;
  BatchSchedule schedule;
  std::uint64_t init_seed = 0;

  long steps() const { return schedule.steps(); }
  std::size_t pool_size() const { return data.size(); }
};

/// Builds a plan, pinning the learning-rate schedule length to T and
/// validating every component against the others.
TrainPlan make_plan(Dataset data, ModelFamily model, UpdateRule rule,
                    BatchSchedule schedule, std::uint64_t init_seed);

void validate(const TrainPlan& plan);

/// Stable hex digest of everything that determines A(w).
std::string fingerprint(const TrainPlan& plan);

OptimizerState initial_state(const TrainPlan& plan);

/// g_t(s, w) = Σ_{i∈B_t} w_i ∇ℓ(z_i; s), summed in batch order. No averaging:
/// a mean-style objective is expressed through the learning rate instead.
VectorXd weighted_grad(const TrainPlan& plan, const OptimizerState& s,
                       const DataWeights& w, long t);

/// Runs `count` steps starting from `s`.
OptimizerState advance(const TrainPlan& plan, OptimizerState s,
                       const DataWeights& w, long count);

OptimizerState train(const TrainPlan& plan, const DataWeights& w);

std::pair<OptimizerState, CheckpointStore> train_recorded(
    const TrainPlan& plan, const DataWeights& w,
    RetentionPolicy policy = RetentionPolicy::Bisection);

/// f(w) = φ(A(w)).
double model_output(const TrainPlan& plan, const MeasurementFn& phi,
                    const DataWeights& w);

}  // namespace metagrad

#endif  // METAGRAD_TRAINER_HPP
