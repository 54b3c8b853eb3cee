#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support.hpp"

using namespace metagrad;
using namespace testing;

namespace {

/// ℓ(z; θ) = ½(θ − 1)² as a one-feature linear model with x = 1, y = 1.
TrainPlan scalar_plan(double lr, std::size_t steps) {
  Dataset data({example({1.0}, 1.0)}, TaskKind::Regression);
  return make_plan(std::move(data), LinearRegression{1, false}, sgd(lr),
                   BatchSchedule(1, 1, steps, 0), 0);
}

/// ∂θ_T/∂w by forward-mode propagation for linear regression under SGD:
/// J_{t+1} = (1 − ηλ)J_t − η Σ_{i∈B_t} (x_i x_iᵀ J_t + r_i x_i e_iᵀ).
MatrixXd forward_jacobian(const TrainPlan& plan) {
  const Index dim = param_dim(plan.model);
  const auto n = static_cast<Index>(plan.pool_size());
  VectorXd theta = initial_params(plan.model, plan.init_seed);
  MatrixXd jac = MatrixXd::Zero(dim, n);
  for (long t = 0; t < plan.steps(); ++t) {
    const double lr = plan.rule.schedule.rate(t);
    MatrixXd next = (1.0 - lr * plan.rule.weight_decay) * jac;
    VectorXd g = VectorXd::Zero(dim);
    for (std::size_t i : plan.schedule.batch(t)) {
      const VectorXd& x = plan.data[i].features;
      const double r = x.dot(theta) - plan.data[i].target;
      next -= lr * x * (x.transpose() * jac);
      next.col(static_cast<Index>(i)) -= lr * r * x;
      g += r * x;
    }
    theta = (1.0 - lr * plan.rule.weight_decay) * theta - lr * g;
    jac = next;
  }
  return jac;
}

MatrixXd one_step_pairing_oracle(const TrainPlan& plan, const OptimizerState& s,
                                 std::span<const std::size_t> batch,
                                 const StateAdjoint& next, VectorXd* beta) {
  // f(s, w_B) = ⟨Δ_{t+1}, h(s, Σ_{i∈B} w_i ∇ℓ_i(s))⟩.
  auto value = [&](const OptimizerState& st, const VectorXd& wb) {
    VectorXd g = VectorXd::Zero(st.params.size());
    for (std::size_t k = 0; k < batch.size(); ++k)
      g += wb[static_cast<Index>(k)] *
           grad(plan.model, st.params, plan.data[batch[k]]);
    const OptimizerState out = apply(plan.rule, st, g);
    double total = next.params.dot(out.params);
    for (std::size_t b = 0; b < next.moments.size(); ++b)
      total += next.moments[b].dot(out.moments[b]);
    return total;
  };
  const VectorXd ones = VectorXd::Ones(static_cast<Index>(batch.size()));
  *beta = fd_gradient([&](const VectorXd& wb) { return value(s, wb); }, ones,
                      1e-4);
  const Index dim = s.params.size();
  MatrixXd blocks(dim, static_cast<Index>(1 + s.moments.size()));
  for (std::size_t b = 0; b <= s.moments.size(); ++b) {
    const VectorXd& base = b == 0 ? s.params : s.moments[b - 1];
    blocks.col(static_cast<Index>(b)) = fd_gradient(
        [&](const VectorXd& x) {
          OptimizerState moved = s;
          (b == 0 ? moved.params : moved.moments[b - 1]) = x;
          return value(moved, ones);
        },
        base, 1e-4);
  }
  return blocks;
}

}  // namespace

TEST_CASE("one-step scalar example") {
  const TrainPlan plan = scalar_plan(0.5, 1);
  const MeasurementFn phi = MeasurementFn::on_example(example({1.0}, 1.0));
  const auto [final_state, store] = train_recorded(plan, ones_weights(1));
  CHECK(final_state.params[0] == 0.5);
  const auto result = replay_metagradient(plan, phi, store);
  CHECK(result.influence.values[0] == -0.25);
  CHECK(fd_influence_of(plan, phi, 1e-4)[0] ==
        doctest::Approx(-0.25).epsilon(1e-9));
  CHECK(result.influence.center_output == 0.125);
}

TEST_CASE("constant measurement and unscheduled examples give zero") {
  const TrainPlan plan = mlp_plan(sgd(0.1), 12, 4, 2);
  const auto [final_state, store] = train_recorded(plan, ones_weights(12));
  const MeasurementFn zero = test_loss(plan).scaled(0.0);
  CHECK(replay_metagradient(plan, zero, store).influence.values.isZero(0.0));

  auto split = moons(6, 1, 3);
  Mlp mlp;
  mlp.head = Head::Logistic;
  const TrainPlan sparse = make_plan(
      split.train, mlp, adam(0.05),
      BatchSchedule::from_batches(6, {{0, 1}, {2, 4}, {1, 5}, {0, 2}}), 4);
  const auto [fs2, store2] = train_recorded(sparse, ones_weights(6));
  const auto infl =
      replay_metagradient(sparse, test_loss(sparse), store2).influence.values;
  CHECK(infl[3] == 0.0);
  CHECK(infl[0] != 0.0);
}

TEST_CASE("single-step kernel") {
  for (const auto& rule : {sgd(0.1), momentum(0.05), adam(0.01)}) {
    CAPTURE(describe(rule));
    const TrainPlan plan = mlp_plan(rule, 12, 4, 2);
    Rng rng(4);
    OptimizerState s = initial_state(plan);
    s = advance(plan, s, ones_weights(12), 1);
    if (rule.kind == RuleKind::Adam)
      s.moments[1] = (s.moments[1].array() + 0.01).matrix();
    const auto batch = plan.schedule.batch(s.step);
    const Index dim = s.params.size();

    const auto zero =
        replay_batch_adjoint(plan, s, batch, StateAdjoint::zero(rule, dim));
    CHECK(zero.contributions.isZero(0.0));
    CHECK(zero.previous.params.isZero(0.0));

    StateAdjoint next = StateAdjoint::zero(rule, dim);
    next.params = random_vector(rng, dim);
    for (auto& m : next.moments) m = random_vector(rng, dim);
    const BatchAdjoint adj = replay_batch_adjoint(plan, s, batch, next);

    if (rule.kind == RuleKind::Sgd) {
      const double lr = rule.schedule.rate(s.step);
      for (std::size_t k = 0; k < batch.size(); ++k) {
        const double expected =
            -lr * next.params.dot(grad(plan.model, s.params, plan.data[batch[k]]));
        CHECK(adj.contributions[static_cast<Index>(k)] ==
              doctest::Approx(expected).epsilon(1e-13));
      }
    }

    VectorXd beta;
    const MatrixXd blocks = one_step_pairing_oracle(plan, s, batch, next, &beta);
    CHECK(scaled_error(adj.contributions, beta) <= 1e-6);
    CHECK(scaled_error(adj.previous.params, blocks.col(0)) <= 1e-6);
    for (std::size_t b = 0; b < adj.previous.moments.size(); ++b)
      CHECK(scaled_error(adj.previous.moments[b],
                         blocks.col(static_cast<Index>(b + 1))) <= 1e-6);
  }
}

TEST_CASE("replay matches finite differences on MLP plans") {
  for (const auto& rule : {sgd(0.05), momentum(0.02), adam(0.01)}) {
    CAPTURE(describe(rule));
    const TrainPlan plan = mlp_plan(rule, 24, 6, 4);
    const MeasurementFn phi = test_loss(plan);
    const auto [final_state, store] = train_recorded(plan, ones_weights(24));
    const VectorXd exact = replay_metagradient(plan, phi, store).influence.values;
    const VectorXd fd = fd_influence_of(plan, phi, 1e-4);
    CHECK(scaled_error(exact, fd) <= 1e-5);
  }
}

TEST_CASE("per-step decomposition equals a monolithic forward-mode Jacobian") {
  auto split = linear_gaussian(5, 3, 8);
  for (std::size_t steps = 1; steps <= 3; ++steps) {
    CAPTURE(steps);
    const TrainPlan plan = make_plan(
        split.train, LinearRegression{3, false}, sgd(0.07, 0.3),
        BatchSchedule(5, 3, steps, 2), 0);
    const MeasurementFn phi = MeasurementFn::on_example(split.test[0]);
    const auto [final_state, store] = train_recorded(plan, ones_weights(5));
    const VectorXd monolithic =
        forward_jacobian(plan).transpose() *
        measure_grad(phi, plan.model, final_state.params);
    const VectorXd replay = replay_metagradient(plan, phi, store).influence.values;
    CHECK(max_relative_error(replay, monolithic, 1e-14) <= 1e-12);
  }
}

TEST_CASE("retention policy does not change the result") {
  for (const auto& rule : {sgd(0.05), adam(0.01)}) {
    const TrainPlan plan = mlp_plan(rule, 30, 4, 5);
    const MeasurementFn phi = test_loss(plan);
    const auto [f1, all] =
        train_recorded(plan, ones_weights(30), RetentionPolicy::RetainAll);
    const auto [f2, spine] =
        train_recorded(plan, ones_weights(30), RetentionPolicy::Bisection);
    const auto a = replay_metagradient(plan, phi, all);
    const auto b = replay_metagradient(plan, phi, spine);
    REQUIRE(a.influence.values.size() == b.influence.values.size());
    CHECK(std::memcmp(a.influence.values.data(), b.influence.values.data(),
                      sizeof(double) * 30) == 0);
    CHECK(a.budget.recompute_steps_total == 0);
    CHECK(b.budget.recompute_steps_total > 0);
  }
}

TEST_CASE("scaling the measurement scales the influence exactly") {
  const TrainPlan plan = mlp_plan(adam(0.01), 16, 4, 3);
  const MeasurementFn phi = test_loss(plan);
  const auto [final_state, store] = train_recorded(plan, ones_weights(16));
  const VectorXd base = replay_metagradient(plan, phi, store).influence.values;
  for (double c : {3.0, -0.7, 1e-3}) {
    const VectorXd scaled =
        replay_metagradient(plan, phi.scaled(c), store).influence.values;
    const VectorXd expected = c * base;
    CHECK(std::memcmp(scaled.data(), expected.data(),
                      sizeof(double) * 16) == 0);
  }
}

TEST_CASE("compensated summation agrees with plain accumulation") {
  const TrainPlan plan = mlp_plan(sgd(0.05), 16, 4, 6);
  const MeasurementFn phi = test_loss(plan);
  const auto [final_state, store] = train_recorded(plan, ones_weights(16));
  const VectorXd plain = replay_metagradient(plan, phi, store).influence.values;
  const VectorXd compensated =
      replay_metagradient(plan, phi, store, {.compensated_sum = true})
          .influence.values;
  CHECK(scaled_error(plain, compensated) <= 1e-12);
}

TEST_CASE("budget accounting") {
  auto run = [](std::size_t steps) {
    const TrainPlan plan = scalar_plan(0.01, steps);
    const MeasurementFn phi = MeasurementFn::on_example(example({1.0}, 0.0));
    const auto [final_state, store] = train_recorded(plan, ones_weights(1));
    return replay_metagradient(plan, phi, store).budget;
  };
  const ReplayBudget one = run(1);
  CHECK(one.recompute_steps_total == 0);
  CHECK(audit_budget(one, 1).ok);

  // Simulated schedule for T = 8: spine {0, 4, 6, 7} then bisection of each
  // segment keeps at most ⌈log₂8⌉ + 1 = 4 states alive.
  const ReplayBudget eight = run(8);
  CHECK(eight.peak_live_states <= kLiveStateConstant * 3);
  CHECK(eight.peak_live_states == 4);
  CHECK(eight.recompute_steps_total == 5);
  CHECK(audit_budget(eight, 8).ok);

  for (std::size_t t : {64, 256, 1024}) {
    CAPTURE(t);
    const ReplayBudget b = run(t);
    const long lg = ceil_log2(static_cast<long>(t));
    CHECK(b.recompute_steps_total <= static_cast<long>(t) * lg + static_cast<long>(t));
    CHECK(b.peak_live_states <= lg + 1);
    CHECK(b.forward_steps_total ==
          static_cast<long>(t) + b.recompute_steps_total);
    CHECK(audit_budget(b, static_cast<long>(t)).ok);
  }

  ReplayBudget bad;
  bad.recompute_steps_total = 1024 * 10 + 1025;
  bad.peak_live_states = 3;
  CHECK_FALSE(audit_budget(bad, 1024).ok);
  bad.recompute_steps_total = 0;
  bad.peak_live_states = 21;
  CHECK_FALSE(audit_budget(bad, 1024).ok);
  CHECK(ceil_log2(1) == 0);
  CHECK(ceil_log2(1024) == 10);
  CHECK(ceil_log2(1025) == 11);
}

TEST_CASE("replay fails on an incomplete store") {
  const TrainPlan plan = mlp_plan(sgd(0.1), 8, 2, 2);
  const auto [final_state, store] = train_recorded(plan, ones_weights(8));
  CheckpointStore broken(RetentionPolicy::Bisection, plan.steps());
  for (const auto& [step, s] : store.states())
    if (step != 0) broken.put(s);
  broken.set_final(final_state);
  try {
    replay_metagradient(plan, test_loss(plan), broken);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}
