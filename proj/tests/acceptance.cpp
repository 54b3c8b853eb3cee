// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "metagrad/experiment.hpp"

using namespace metagrad;

namespace {

const fs::path kSource = METAGRAD_SOURCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("metagrad-acceptance-" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool bit_identical(const VectorXd& a, const VectorXd& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

SyntheticSpec moons_spec(std::size_t n, std::size_t n_test, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.generator = "moons";
  spec.n_train = n;
  spec.n_test = n_test;
  spec.noise = 0.1;
  spec.seed = seed;
  return spec;
}

Mlp smooth_mlp() {
  Mlp mlp;
  mlp.widths = {2, 8, 1};
  mlp.activation = Activation::Tanh;
  mlp.head = Head::Logistic;
  return mlp;
}

UpdateRule rule_of(RuleKind kind, double lr) {
  UpdateRule r;
  r.kind = kind;
  r.schedule.max_lr = lr;
  r.eps_root = 1e-6;
  return r;
}

VectorXd central_differences(const TrainPlan& plan, const MeasurementFn& phi,
                             double h) {
  const std::size_t n = plan.pool_size();
  const DataWeights ones = ones_weights(n);
  VectorXd out(static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    DataWeights up = ones, down = ones;
    up[static_cast<Index>(i)] += h;
    down[static_cast<Index>(i)] -= h;
    out[static_cast<Index>(i)] =
        (model_output(plan, phi, up) - model_output(plan, phi, down)) / (2 * h);
  }
  return out;
}

// 1. Replay against central finite differences, SGD and Adam, T = 50. The
// relative error is unfloored, so every coordinate counts.
Outcome exactness() {
  const auto split = make_synthetic(moons_spec(64, 16, 21));
  const MeasurementFn phi = MeasurementFn::mean_loss(split.test, "phi");
  std::string detail;
  bool pass = true;
  double seconds = 0.0;
  for (const auto& [name, rule] :
       {std::pair{"sgd", rule_of(RuleKind::Sgd, 0.05)},
        std::pair{"adam", rule_of(RuleKind::Adam, 0.01)}}) {
    const auto start = std::chrono::steady_clock::now();
    const TrainPlan plan = make_plan(split.train, smooth_mlp(), rule,
                                     BatchSchedule(64, 32, 25, 4), 5);
    const auto [final_state, store] = train_recorded(plan, ones_weights(64));
    const VectorXd exact = replay_metagradient(plan, phi, store).influence.values;
    const VectorXd fd = central_differences(plan, phi, 1e-4);
    seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             start)
                   .count();
    const double err = max_relative_error(exact, fd);
    pass = pass && plan.steps() == 50 && err <= 1e-5;
    detail += fmt("%s T=%ld max_rel_err=%.2e; ", name, plan.steps(), err);
  }
  pass = pass && seconds < 120.0;
  detail += fmt("%.1fs (tol 1e-5, < 120s)", seconds);
  return {pass, detail};
}

// 2. Converged ridge regression against the closed-form jackknife.
Outcome convex_cross_validation() {
  SyntheticSpec spec;
  spec.generator = "linear-gaussian";
  spec.n_train = 200;
  spec.n_test = 4;
  spec.dim = 10;
  spec.noise = 0.1;
  spec.seed = 31;
  const auto split = make_synthetic(spec);
  const double lambda = 0.1;
  MatrixXd x(200, 10);
  for (std::size_t i = 0; i < 200; ++i)
    x.row(static_cast<Index>(i)) = split.train[i].features.transpose();
  const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(
      x.transpose() * x + lambda * MatrixXd::Identity(10, 10));
  const double top = eig.eigenvalues().maxCoeff();
  const double bottom = eig.eigenvalues().minCoeff();
  // Contraction 1 − λ_min/λ_max per step; run well past 1e−16 relative.
  const auto steps = static_cast<std::size_t>(
      std::ceil(40.0 / -std::log1p(-bottom / top)));
  UpdateRule rule = rule_of(RuleKind::Sgd, 1.0 / top);
  rule.weight_decay = lambda;
  const TrainPlan plan =
      make_plan(split.train, LinearRegression{10, false}, rule,
                BatchSchedule(200, 200, steps, 0, false), 0);
  const MeasurementFn phi = MeasurementFn::on_example(split.test[0], "phi");
  const auto [final_state, store] = train_recorded(plan, ones_weights(200));

  VectorXd objective_grad = lambda * final_state.params;
  for (std::size_t i = 0; i < 200; ++i)
    objective_grad += grad(plan.model, final_state.params, plan.data[i]);
  const double gnorm = objective_grad.norm();

  const VectorXd replay = replay_metagradient(plan, phi, store).influence.values;
  const VectorXd ij = convex_ij_influence(plan, phi).values;
  const double cos = cosine_similarity(replay, ij);
  const double err = max_relative_error(replay, ij);
  return {gnorm <= 1e-10 && cos >= 0.999 && err <= 1e-3,
          fmt("T=%zu grad_norm=%.2e cosine=%.9f max_rel_err=%.2e "
              "(tol 1e-10, 0.999, 1e-3)",
              steps, gnorm, cos, err)};
}

struct DeskResult {
  std::string task;
  LdsSweep sweep;
};

std::vector<DeskResult>& desk_results() {
  static std::vector<DeskResult> results = [] {
    std::vector<DeskResult> out;
    for (const char* name : {"desk_logreg", "desk_mlp"}) {
      const ExperimentConfig config =
          load_config(kSource / "configs" / (std::string(name) + ".json"));
      const fs::path dir = scratch(name);
      cmd_train(config, dir / "run");
      out.push_back({config.task_id, cmd_lds(config, dir / "run", dir)});
    }
    return out;
  }();
  return results;
}

const LdsReport& report(const LdsSweep& sweep, const std::string& method,
                        double p) {
  for (std::size_t m = 0; m < sweep.methods.size(); ++m) {
    if (sweep.methods[m] != method) continue;
    for (std::size_t k = 0; k < sweep.drop_fractions.size(); ++k)
      if (sweep.drop_fractions[k] == p) return sweep.reports[m][k];
  }
  fail(ErrorKind::InvalidArgument, "no report for " + method);
}

// 3. MAGIC LDS at p = 1% on both desk tasks.
Outcome desk_lds() {
  bool pass = true;
  std::string detail;
  for (const auto& r : desk_results()) {
    const LdsReport& rep = report(r.sweep, "magic", 0.01);
    const bool ok = rep.per_task.size() == 10 && rep.subset_count == 64 &&
                    rep.mean >= 0.95;
    pass = pass && ok;
    detail += fmt("%s LDS=%.4f (%zu tasks, m=%zu); ", r.task.c_str(), rep.mean,
                  rep.per_task.size(), rep.subset_count);
  }
  return {pass, detail + "tol >= 0.95"};
}

// 4. LDS non-increasing in p within the bootstrap intervals.
Outcome degradation() {
  bool pass = true;
  std::string detail;
  for (const auto& r : desk_results()) {
    detail += r.task + " [";
    double prev_high = 0.0;
    for (double p : {0.01, 0.05, 0.1, 0.2}) {
      const LdsReport& rep = report(r.sweep, "magic", p);
      if (p != 0.01 && rep.mean > prev_high) pass = false;
      prev_high = rep.interval.high;
      detail += fmt(" %.4f(%.4f,%.4f)", rep.mean, rep.interval.low,
                    rep.interval.high);
    }
    detail += " ]; ";
  }
  return {pass, detail};
}

// 5. MAGIC beats both baselines by at least 0.3 at p = 1%.
Outcome baseline_ordering() {
  bool pass = true;
  std::string detail;
  for (const auto& r : desk_results()) {
    const double magic = report(r.sweep, "magic", 0.01).mean;
    const double trak = report(r.sweep, "trak-lite", 0.01).mean;
    const double dot = report(r.sweep, "grad-dot", 0.01).mean;
    pass = pass && magic - trak >= 0.3 && magic - dot >= 0.3;
    detail += fmt("%s magic=%.3f trak-lite=%.3f grad-dot=%.3f; ", r.task.c_str(),
                  magic, trak, dot);
  }
  return {pass, detail + "margin >= 0.3"};
}

// 6. Budget audit and checkpoint-policy independence.
Outcome cost_envelope() {
  const auto split = make_synthetic(moons_spec(64, 1, 8));
  const MeasurementFn phi = MeasurementFn::on_example(split.test[0], "phi");
  bool pass = kLiveStateConstant <= 4;
  std::string detail = fmt("c=%ld; ", kLiveStateConstant);
  for (std::size_t epochs : {4, 16, 64}) {
    const TrainPlan plan = make_plan(split.train, smooth_mlp(),
                                     rule_of(RuleKind::Adam, 0.005),
                                     BatchSchedule(64, 4, epochs, 2), 3);
    const long t = plan.steps();
    const auto [final_a, bisect] =
        train_recorded(plan, ones_weights(64), RetentionPolicy::Bisection);
    const auto [final_b, all] =
        train_recorded(plan, ones_weights(64), RetentionPolicy::RetainAll);
    const ReplayResult r = replay_metagradient(plan, phi, bisect);
    const ReplayResult ref = replay_metagradient(plan, phi, all);
    const BudgetReport audit = audit_budget(r.budget, t);
    const bool same = bit_identical(r.influence.values, ref.influence.values) &&
                      r.influence.center_output == ref.influence.center_output;
    pass = pass && audit.ok && same;
    detail += fmt("T=%ld recompute=%ld/%ld peak=%ld/%ld %s; ", t,
                  audit.recompute_steps, audit.recompute_bound,
                  audit.peak_live_states, audit.live_state_bound,
                  same ? "policy-identical" : "POLICY-MISMATCH");
  }
  return {pass, detail};
}

// 7. Taylor center and exact measurement scaling.
Outcome taylor_center() {
  const Experiment ex = build_experiment(load_config(kSource / "configs" / "mlp_toy.json"));
  const auto [final_state, store] =
      train_recorded(ex.plan, ones_weights(ex.plan.pool_size()));
  bool pass = true;
  std::string detail;
  for (const auto& phi : ex.measurements) {
    const InfluenceVector infl = replay_metagradient(ex.plan, phi, store).influence;
    const TaylorPredictor pred(infl);
    const double at_one = pred.predict(ones_weights(ex.plan.pool_size()));
    const double trained = model_output(ex.plan, phi, ones_weights(ex.plan.pool_size()));
    pass = pass && std::memcmp(&at_one, &infl.center_output, sizeof(double)) == 0 &&
           std::memcmp(&trained, &infl.center_output, sizeof(double)) == 0;
    for (double c : {3.0, -0.7, 1e-3, 0.1}) {
      const VectorXd scaled =
          replay_metagradient(ex.plan, phi.scaled(c), store).influence.values;
      pass = pass && bit_identical(scaled, VectorXd(c * infl.values));
    }
  }
  detail = fmt("%zu measurements, c in {3, -0.7, 1e-3, 0.1}, bit-exact",
               ex.measurements.size());
  return {pass, detail};
}

// 8. Smoothness probe on the smooth MLP config.
Outcome smoothness() {
  const ExperimentConfig config = load_config(kSource / "configs" / "mlp_toy.json");
  const ProbeOutput out = cmd_probe(config, scratch("probe"));
  if (out.probe.doublings.empty() || !out.probe.extrapolated_slope)
    return {false, "probe produced no doubling"};
  const double ratio = out.probe.doublings.front().ratio;
  const double rel = std::abs(*out.probe.extrapolated_slope - out.influence) /
                     std::abs(out.influence);
  return {ratio >= 1.8 && ratio <= 2.2 && rel <= 1e-3,
          fmt("eps=%g ratio=%.6f slope_rel_err=%.2e (tol [1.8, 2.2], 1e-3)",
              out.probe.doublings.front().epsilon, ratio, rel)};
}

// 9. Byte-identical reruns and bit-identical checkpoint replay.
Outcome determinism() {
  const ExperimentConfig config = load_config(kSource / "configs" / "mlp_toy.json");
  std::vector<fs::path> roots;
  for (const char* name : {"rerun-a", "rerun-b"}) {
    const fs::path dir = scratch(name);
    cmd_train(config, dir / "run");
    cmd_attribute(config, dir / "run", dir);
    cmd_lds(config, dir / "run", dir);
    cmd_gradcheck(config, dir);
    cmd_probe(config, dir);
    roots.push_back(dir);
  }
  std::size_t files = 0, mismatched = 0;
  for (const auto& entry : fs::recursive_directory_iterator(roots[0])) {
    if (entry.path().extension() != ".csv") continue;
    ++files;
    if (slurp(entry.path()) != slurp(roots[1] / fs::relative(entry.path(), roots[0])))
      ++mismatched;
  }

  const Experiment ex = build_experiment(config);
  const DataWeights ones = ones_weights(ex.plan.pool_size());
  const auto [final_state, all] =
      train_recorded(ex.plan, ones, RetentionPolicy::RetainAll);
  std::size_t replays = 0, diverged = 0;
  for (const auto& [step, s] : all.states()) {
    ++replays;
    if (!advance(ex.plan, s, ones, ex.plan.steps() - step).bit_equal(final_state))
      ++diverged;
    else if (step + 1 < ex.plan.steps() &&
             !advance(ex.plan, s, ones, 1).bit_equal(all.at(step + 1)))
      ++diverged;
  }
  return {files > 0 && mismatched == 0 && diverged == 0,
          fmt("%zu CSVs compared, %zu differ; %zu checkpoints replayed, %zu "
              "differ",
              files, mismatched, replays, diverged)};
}

}  // namespace

int main() {
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, exactness},        {2, convex_cross_validation},
      {3, desk_lds},         {4, degradation},
      {5, baseline_ordering}, {6, cost_envelope},
      {7, taylor_center},    {8, smoothness},
      {9, determinism}};
  int failures = 0;
  for (const auto& [id, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %d: %s  %s\n", id, o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
