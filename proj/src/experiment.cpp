#include "metagrad/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "metagrad/parallel.hpp"

namespace metagrad {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

/// Best-effort mapping from a key path to a line in the source text: each
/// path component is searched as a quoted key after the previous match.
class Locator {
 public:
  Locator(const std::string& text, std::string origin)
      : text_(text), origin_(std::move(origin)) {}

  std::string where(const std::vector<std::string>& path) const {
    std::size_t pos = 0;
    bool found = !path.empty();
    for (const auto& key : path) {
      if (!key.empty() && key.front() == '[') continue;
      const auto hit = text_.find('"' + key + '"', pos);
      if (hit == std::string::npos) {
        found = false;
        break;
      }
      pos = hit + 1;
    }
    if (!found) return origin_;
    const auto line = 1 + std::count(text_.begin(),
                                     text_.begin() + static_cast<long>(pos), '\n');
    return origin_ + ":" + std::to_string(line);
  }

  std::string line_of_offset(std::size_t offset) const {
    offset = std::min(offset, text_.size());
    const auto line = 1 + std::count(text_.begin(),
                                     text_.begin() + static_cast<long>(offset),
                                     '\n');
    return origin_ + ":" + std::to_string(line);
  }

 private:
  const std::string& text_;
  std::string origin_;
};

std::string join_path(const std::vector<std::string>& path) {
  std::string out;
  for (const auto& p : path) {
    if (!p.empty() && p.front() == '[') {
      out += p;
    } else {
      out += (out.empty() ? "" : ".") + p;
    }
  }
  return out.empty() ? "<root>" : out;
}

class Section {
 public:
  Section(const json& node, std::vector<std::string> path, const Locator& loc)
      : node_(node), path_(std::move(path)), loc_(loc) {
    if (!node_.is_object()) error("expected an object");
  }

  [[noreturn]] void error(const std::string& msg,
                          const std::string& key = {}) const {
    auto path = path_;
    if (!key.empty()) path.push_back(key);
    fail(ErrorKind::Config,
         loc_.where(path) + ": " + join_path(path) + ": " + msg);
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return node_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T need(const std::string& key) {
    if (!has(key)) error("missing required key", key);
    return convert<T>(key);
  }

  Section child(const std::string& key) {
    used_.insert(key);
    auto path = path_;
    path.push_back(key);
    return Section(node_.at(key), path, loc_);
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return node_.at(key);
  }

  std::vector<std::string> path_with(const std::string& key) const {
    auto p = path_;
    p.push_back(key);
    return p;
  }

  void finish() const {
    for (const auto& [key, value] : node_.items()) {
      (void)value;
      if (!used_.count(key)) error("unknown key", key);
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key) {
    const json& v = node_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) error("expected a boolean", key);
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) error("expected an integer", key);
        if constexpr (std::is_unsigned_v<T>) {
          if (v.get<long long>() < 0) error("expected a non-negative integer", key);
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) error("expected a number", key);
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) error("expected a string", key);
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      error(std::string("invalid value: ") + e.what(), key);
    }
  }

  const json& node_;
  std::vector<std::string> path_;
  const Locator& loc_;
  std::set<std::string> used_;
};

void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail(ErrorKind::Config,
         "override '" + assignment + "' must look like key.path=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;  // bare strings need no quoting
  }
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    if (!node->is_object())
      fail(ErrorKind::Config, "override '" + key + "' descends into a non-object");
    start = dot + 1;
  }
}

Activation parse_activation(Section& s) {
  const auto name = s.get<std::string>("activation", "tanh");
  if (name == "tanh") return Activation::Tanh;
  if (name == "sigmoid") return Activation::Sigmoid;
  s.error("activation must be 'tanh' or 'sigmoid' (smooth activations only)",
          "activation");
}

Head parse_head(Section& s, Head fallback) {
  if (!s.has("head")) return fallback;
  const auto name = s.get<std::string>("head", "");
  if (name == "squared") return Head::Squared;
  if (name == "logistic") return Head::Logistic;
  if (name == "softmax") return Head::Softmax;
  s.error("head must be squared, logistic or softmax", "head");
}

}  // namespace

ExperimentConfig parse_config(const std::string& text,
                              const std::string& origin,
                              const std::vector<std::string>& overrides) {
  Locator loc(text, origin);
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config,
         loc.line_of_offset(e.byte > 0 ? e.byte - 1 : 0) + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(root, o);

  ExperimentConfig c;
  Section top(root, {}, loc);
  c.task_id = top.get<std::string>("task_id", "task");
  if (c.task_id.empty() ||
      c.task_id.find_first_of("/\\") != std::string::npos)
    top.error("task_id must be a non-empty name without path separators",
              "task_id");

  // dataset
  {
    Section ds = top.has("dataset") ? top.child("dataset")
                                    : (top.error("missing required key", "dataset"), top);
    const bool has_syn = ds.has("synthetic"), has_csv = ds.has("csv");
    if (has_syn == has_csv)
      ds.error("exactly one of 'synthetic' or 'csv' is required");
    if (has_syn) {
      Section s = ds.child("synthetic");
      SyntheticSpec spec;
      spec.generator = s.need<std::string>("generator");
      spec.n_train = s.need<std::size_t>("n_train");
      spec.n_test = s.get<std::size_t>("n_test", spec.n_test);
      spec.dim = s.get<Index>("dim", spec.dim);
      spec.noise = s.get<double>("noise", spec.noise);
      spec.separation = s.get<double>("separation", spec.separation);
      spec.seed = s.get<std::uint64_t>("seed", 0);
      if (spec.generator != "linear-gaussian" &&
          spec.generator != "gaussian-blobs" && spec.generator != "moons")
        s.error("unknown generator '" + spec.generator + "'", "generator");
      if (spec.n_train < 1 || spec.n_test < 1 || spec.dim < 1)
        s.error("n_train, n_test and dim must be >= 1");
      s.finish();
      c.synthetic = spec;
    } else {
      Section s = ds.child("csv");
      c.train_csv = s.need<std::string>("train");
      c.test_csv = s.need<std::string>("test");
      const auto task = s.need<std::string>("task");
      if (task == "regression") {
        c.csv_task = TaskKind::Regression;
      } else if (task == "classification") {
        c.csv_task = TaskKind::Classification;
      } else {
        s.error("task must be 'regression' or 'classification'", "task");
      }
      c.csv_classes = s.get<int>("classes", 0);
      s.finish();
      if (!fs::exists(c.train_csv))
        s.error("dataset file '" + c.train_csv + "' does not exist", "train");
      if (!fs::exists(c.test_csv))
        s.error("dataset file '" + c.test_csv + "' does not exist", "test");
    }
    ds.finish();
  }

  // model
  {
    if (!top.has("model")) top.error("missing required key", "model");
    Section m = top.child("model");
    const auto kind = m.need<std::string>("kind");
    if (kind == "linear-regression") {
      c.model = LinearRegression{m.get<Index>("input_dim", 0),
                                 m.get<bool>("bias", false)};
    } else if (kind == "logistic-regression") {
      c.model = LogisticRegression{m.get<Index>("input_dim", 0),
                                   m.get<bool>("bias", false)};
    } else if (kind == "mlp") {
      Mlp mlp;
      mlp.widths = m.need<std::vector<Index>>("widths");
      if (mlp.widths.size() < 2) m.error("need at least two widths", "widths");
      mlp.activation = parse_activation(m);
      mlp.head = parse_head(m, Head::Squared);
      c.model = mlp;
    } else {
      m.error("kind must be linear-regression, logistic-regression or mlp",
              "kind");
    }
    m.finish();
  }

  // optimizer
  {
    if (!top.has("optimizer")) top.error("missing required key", "optimizer");
    Section o = top.child("optimizer");
    const auto kind = o.need<std::string>("kind");
    if (kind == "sgd") {
      c.rule.kind = RuleKind::Sgd;
    } else if (kind == "sgd-momentum") {
      c.rule.kind = RuleKind::SgdMomentum;
    } else if (kind == "adam") {
      c.rule.kind = RuleKind::Adam;
    } else {
      o.error("kind must be sgd, sgd-momentum or adam", "kind");
    }
    c.rule.schedule.max_lr = o.need<double>("lr");
    const auto schedule = o.get<std::string>("schedule", "constant");
    if (schedule == "constant") {
      c.rule.schedule.kind = LrSchedule::Kind::Constant;
    } else if (schedule == "one-cycle") {
      c.rule.schedule.kind = LrSchedule::Kind::OneCycle;
    } else {
      o.error("schedule must be 'constant' or 'one-cycle'", "schedule");
    }
    c.rule.schedule.start_factor =
        o.get<double>("start_factor", c.rule.schedule.start_factor);
    c.rule.schedule.peak_fraction =
        o.get<double>("peak_fraction", c.rule.schedule.peak_fraction);
    c.rule.schedule.end_factor =
        o.get<double>("end_factor", c.rule.schedule.end_factor);
    c.rule.momentum = o.get<double>("momentum", c.rule.momentum);
    c.rule.beta1 = o.get<double>("beta1", c.rule.beta1);
    c.rule.beta2 = o.get<double>("beta2", c.rule.beta2);
    c.rule.eps = o.get<double>("eps", c.rule.eps);
    c.rule.eps_root = o.get<double>("eps_root", c.rule.eps_root);
    c.rule.weight_decay = o.get<double>("weight_decay", 0.0);
    o.finish();
    try {
      validate(c.rule);
    } catch (const Error& e) {
      o.error(e.what());
    }
  }

  // training
  if (top.has("training")) {
    Section t = top.child("training");
    c.batch_size = t.get<std::size_t>("batch_size", c.batch_size);
    c.epochs = t.get<std::size_t>("epochs", c.epochs);
    c.shuffle_seed = t.get<std::uint64_t>("shuffle_seed", 0);
    c.init_seed = t.get<std::uint64_t>("init_seed", 0);
    c.shuffle = t.get<bool>("shuffle", true);
    const auto policy = t.get<std::string>("checkpoint_policy", "bisection");
    if (policy == "bisection") {
      c.policy = RetentionPolicy::Bisection;
    } else if (policy == "retain-all") {
      c.policy = RetentionPolicy::RetainAll;
    } else {
      t.error("checkpoint_policy must be 'bisection' or 'retain-all'",
              "checkpoint_policy");
    }
    if (c.batch_size < 1) t.error("must be >= 1", "batch_size");
    t.finish();
  }

  // measurements
  if (!top.has("measurements")) top.error("missing required key", "measurements");
  {
    const json& list = top.raw("measurements");
    if (!list.is_array() || list.empty())
      top.error("expected a non-empty array", "measurements");
    for (std::size_t k = 0; k < list.size(); ++k) {
      Section m(list[k], {"measurements", "[" + std::to_string(k) + "]"}, loc);
      MeasurementSpec spec;
      spec.kind = m.need<std::string>("kind");
      spec.scale = m.get<double>("scale", 1.0);
      if (spec.kind == "mean-test-loss") {
        c.measurements.push_back(spec);
      } else if (spec.kind == "test-loss") {
        const int forms = int(m.has("index")) + int(m.has("indices")) +
                          int(m.has("first"));
        if (forms != 1)
          m.error("test-loss needs exactly one of index, indices or first");
        std::vector<std::size_t> indices;
        if (m.has("index")) indices.push_back(m.get<std::size_t>("index", 0));
        if (m.has("indices"))
          indices = m.get<std::vector<std::size_t>>("indices", {});
        if (m.has("first")) {
          const auto first = m.get<std::size_t>("first", 0);
          for (std::size_t i = 0; i < first; ++i) indices.push_back(i);
        }
        for (std::size_t i : indices) {
          spec.index = i;
          c.measurements.push_back(spec);
        }
      } else {
        m.error("kind must be 'test-loss' or 'mean-test-loss'", "kind");
      }
      m.finish();
    }
  }

  // attribution
  if (top.has("attribution")) {
    Section a = top.child("attribution");
    c.drop_fractions = a.get<std::vector<double>>("drop_fractions", c.drop_fractions);
    for (double p : c.drop_fractions)
      if (!(p > 0.0 && p < 1.0))
        a.error("drop fractions must lie in (0, 1)", "drop_fractions");
    c.subsets = a.get<std::size_t>("subsets", c.subsets);
    c.subset_seed = a.get<std::uint64_t>("subset_seed", 0);
    c.methods = a.get<std::vector<std::string>>("methods", c.methods);
    for (const auto& name : c.methods)
      if (name != "magic" && name != "trak-lite" && name != "grad-dot")
        a.error("unknown method '" + name + "'", "methods");
    c.bootstrap_resamples =
        a.get<std::size_t>("bootstrap_resamples", c.bootstrap_resamples);
    c.bootstrap_seed = a.get<std::uint64_t>("bootstrap_seed", 0);
    c.trak_projection_dim =
        a.get<Index>("trak_projection_dim", c.trak_projection_dim);
    if (c.trak_projection_dim < 1)
      a.error("must be >= 1", "trak_projection_dim");
    c.trak_seed = a.get<std::uint64_t>("trak_seed", 0);
    c.compensated_sum = a.get<bool>("compensated_sum", false);
    c.ground_truth_mode = a.get<std::string>("ground_truth", "reweight");
    if (c.ground_truth_mode != "reweight" && c.ground_truth_mode != "resample")
      a.error("ground_truth must be 'reweight' or 'resample'", "ground_truth");
    a.finish();
  }

  if (top.has("gradcheck")) {
    Section g = top.child("gradcheck");
    c.gradcheck_trials = g.get<std::size_t>("trials", c.gradcheck_trials);
    c.gradcheck_tolerance = g.get<double>("tolerance", c.gradcheck_tolerance);
    c.gradcheck_influence_coords =
        g.get<std::size_t>("influence_coords", c.gradcheck_influence_coords);
    c.gradcheck_seed = g.get<std::uint64_t>("seed", 0);
    g.finish();
  }

  if (top.has("probe")) {
    Section p = top.child("probe");
    c.probe_index = p.get<std::size_t>("index", 0);
    c.probe_measurement = p.get<std::size_t>("measurement", 0);
    c.probe_epsilons = p.get<std::vector<double>>("epsilons", c.probe_epsilons);
    p.finish();
    if (c.probe_measurement >= c.measurements.size())
      p.error("measurement index out of range", "measurement");
  }

  c.output_dir = top.get<std::string>("output_dir", "");
  c.workers = top.get<unsigned>("workers", 1);
  top.finish();

  // Fill model input widths left at 0 from the dataset feature dimension.
  if (c.synthetic) {
    if (auto* lin = std::get_if<LinearRegression>(&c.model);
        lin && lin->input_dim == 0)
      lin->input_dim = c.synthetic->dim;
    if (auto* log = std::get_if<LogisticRegression>(&c.model);
        log && log->input_dim == 0)
      log->input_dim = c.synthetic->dim;
  }

  c.canonical = root.dump();
  c.hash = Fnv1a().update(c.canonical).hex();
  return c;
}

ExperimentConfig load_config(const fs::path& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Config, "cannot open config '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str(), path.string(), overrides);
}

Experiment build_experiment(const ExperimentConfig& c) {
  Dataset train = c.synthetic ? make_synthetic(*c.synthetic).train
                              : load_csv(c.train_csv, c.csv_task, c.csv_classes);
  Dataset test = c.synthetic ? make_synthetic(*c.synthetic).test
                             : load_csv(c.test_csv, c.csv_task,
                                        c.csv_classes ? c.csv_classes
                                                      : train.class_count());
  ModelFamily model = c.model;
  if (auto* lin = std::get_if<LinearRegression>(&model); lin && lin->input_dim == 0)
    lin->input_dim = train.feature_dim();
  if (auto* log = std::get_if<LogisticRegression>(&model); log && log->input_dim == 0)
    log->input_dim = train.feature_dim();

  std::vector<MeasurementFn> phis;
  for (const auto& spec : c.measurements) {
    MeasurementFn phi;
    if (spec.kind == "mean-test-loss") {
      phi = MeasurementFn::mean_loss(test, "mean_test_loss");
    } else {
      if (spec.index >= test.size())
        fail(ErrorKind::Config, "measurement test index " +
                                    std::to_string(spec.index) +
                                    " out of range (test set has " +
                                    std::to_string(test.size()) + ")");
      phi = MeasurementFn::on_example(test[spec.index],
                                      "test_loss_" + std::to_string(spec.index));
    }
    if (spec.scale != 1.0) {
      phi = phi.scaled(spec.scale);
      phi.name += "_x" + format_double(spec.scale);
    }
    phis.push_back(std::move(phi));
  }
  BatchSchedule schedule(train.size(), c.batch_size, c.epochs, c.shuffle_seed,
                         c.shuffle);
  try {
    TrainPlan plan = make_plan(std::move(train), model, c.rule,
                               std::move(schedule), c.init_seed);
    return {std::move(plan), std::move(test), std::move(phis)};
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidArgument)
      fail(ErrorKind::Config, std::string("invalid experiment: ") + e.what());
    throw;
  }
}

fs::path output_root(const ExperimentConfig& config) {
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* env = std::getenv("METAGRAD_OUTPUT_ROOT"); env && *env)
    return env;
  return "metagrad-out";
}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read '" + path.string() + "'");
  Fnv1a h;
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h.update(buf, static_cast<std::size_t>(in.gcount()));
  return h.hex();
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Divergence: return 3;
    case ErrorKind::Budget: return 4;
    case ErrorKind::UndefinedMetric: return 5;
    case ErrorKind::Io: return 6;
    case ErrorKind::InvalidArgument: return 7;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
}

std::string drop_dir_name(double p) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "dropfrac_%g", p);
  return buf;
}

struct LoadedRun {
  CheckpointStore store;
  json manifest;
};

LoadedRun load_run(const ExperimentConfig& config, const Experiment& exp,
                   const fs::path& run_dir) {
  std::ifstream in(run_dir / "manifest.json");
  if (!in)
    fail(ErrorKind::Io, "no run artifact at " + run_dir.string() +
                            " (run 'train' first)");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, (run_dir / "manifest.json").string() + ": " + e.what());
  }
  const std::string plan_fp = fingerprint(exp.plan);
  if (manifest.value("plan_fingerprint", "") != plan_fp)
    fail(ErrorKind::Config,
         "run artifact at " + run_dir.string() +
             " was trained with a different plan (fingerprint " +
             manifest.value("plan_fingerprint", "?") + ", config gives " +
             plan_fp + ")");
  (void)config;
  return {CheckpointStore::load(run_dir / "store", exp.plan.rule),
          std::move(manifest)};
}

json budget_json(const ReplayBudget& b, const BudgetReport& r) {
  return json{{"steps", r.steps},
              {"forward_steps_total", b.forward_steps_total},
              {"recompute_steps_total", b.recompute_steps_total},
              {"recompute_bound", r.recompute_bound},
              {"peak_live_states", b.peak_live_states},
              {"live_state_bound", r.live_state_bound},
              {"live_state_constant", kLiveStateConstant},
              {"reverse_seconds", b.reverse_seconds},
              {"ok", r.ok},
              {"message", r.message}};
}

/// Scores for every configured method under one measurement.
std::vector<InfluenceVector> method_scores(const ExperimentConfig& config,
                                           const Experiment& exp,
                                           const CheckpointStore& store,
                                           const MeasurementFn& phi,
                                           ReplayBudget* budget) {
  std::vector<InfluenceVector> out;
  for (const auto& method : config.methods) {
    if (method == "magic") {
      auto r = replay_metagradient(exp.plan, phi, store,
                                   {.compensated_sum = config.compensated_sum});
      if (budget) *budget = r.budget;
      out.push_back(std::move(r.influence));
    } else if (method == "trak-lite") {
      out.push_back(trak_lite(exp.plan, phi, store.final_state().params,
                              config.trak_projection_dim, config.trak_seed));
    } else {
      out.push_back(grad_dot_scores(exp.plan, phi, store.final_state().params));
    }
  }
  return out;
}

MatrixXd ground_truth_resampled(const Experiment& exp,
                                const ExperimentConfig& config,
                                const std::vector<SubsetSample>& subsets) {
  MatrixXd out(static_cast<Index>(subsets.size()),
               static_cast<Index>(exp.measurements.size()));
  for (std::size_t j = 0; j < subsets.size(); ++j) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < exp.plan.pool_size(); ++i)
      if (subsets[j].weights[static_cast<Index>(i)] != 0.0) keep.push_back(i);
    Dataset data = exp.plan.data.subset(keep);
    BatchSchedule schedule(data.size(), config.batch_size, config.epochs,
                           config.shuffle_seed, config.shuffle);
    TrainPlan plan = make_plan(std::move(data), exp.plan.model, exp.plan.rule,
                               std::move(schedule), exp.plan.init_seed);
    const OptimizerState s = train(plan, ones_weights(plan.pool_size()));
    for (std::size_t k = 0; k < exp.measurements.size(); ++k)
      out(static_cast<Index>(j), static_cast<Index>(k)) =
          measure(exp.measurements[k], plan.model, s.params);
  }
  return out;
}

}  // namespace

TrainArtifact cmd_train(const ExperimentConfig& config, const fs::path& run_dir) {
  const Experiment exp = build_experiment(config);
  const auto started = std::chrono::steady_clock::now();
  auto [final_state, store] = train_recorded(
      exp.plan, ones_weights(exp.plan.pool_size()), config.policy);
  const double seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - started)
                             .count();
  fs::create_directories(run_dir);
  store.save(run_dir / "store");

  json files = json::object();
  for (const auto& entry : fs::directory_iterator(run_dir / "store"))
    files["store/" + entry.path().filename().string()] = file_hash(entry.path());
  json content{{"config_hash", config.hash},
               {"plan_fingerprint", fingerprint(exp.plan)},
               {"steps", exp.plan.steps()},
               {"pool_size", exp.plan.pool_size()},
               {"param_dim", param_dim(exp.plan.model)},
               {"model", describe(exp.plan.model)},
               {"rule", describe(exp.plan.rule)},
               {"checkpoint_policy", config.policy == RetentionPolicy::RetainAll
                                         ? "retain-all"
                                         : "bisection"},
               {"retained_states", store.size()},
               {"files", files}};
  const std::string content_hash = Fnv1a().update(content.dump()).hex();
  json manifest = content;
  manifest["content_hash"] = content_hash;
  manifest["timings"] = {{"train_seconds", seconds}};
  write_text(run_dir / "manifest.json", manifest.dump(2) + "\n");
  return {run_dir, std::move(final_state), content_hash, seconds};
}

AttributeOutput cmd_attribute(const ExperimentConfig& config,
                              const fs::path& run_dir,
                              const fs::path& out_dir) {
  const Experiment exp = build_experiment(config);
  const LoadedRun run = load_run(config, exp, run_dir);
  AttributeOutput out;
  out.influences.resize(exp.measurements.size());
  out.budgets.resize(exp.measurements.size());
  std::vector<std::vector<InfluenceVector>> scores(exp.measurements.size());
  std::vector<ReplayBudget> budgets(exp.measurements.size());
  parallel_for(exp.measurements.size(), config.workers, [&](std::size_t k) {
    scores[k] = method_scores(config, exp, run.store, exp.measurements[k],
                              &budgets[k]);
  });

  std::string budget_failures;
  for (std::size_t k = 0; k < exp.measurements.size(); ++k) {
    const MeasurementFn& phi = exp.measurements[k];
    const fs::path dir = out_dir / config.task_id / phi.name;
    std::ostringstream csv;
    csv << "index,method,value\n";
    for (std::size_t m = 0; m < config.methods.size(); ++m)
      for (Index i = 0; i < scores[k][m].values.size(); ++i)
        csv << i << ',' << config.methods[m] << ','
            << format_double(scores[k][m].values[i]) << '\n';
    write_text(dir / "influence.csv", csv.str());
    out.csv_files.push_back(dir / "influence.csv");

    const auto magic = std::find(config.methods.begin(), config.methods.end(),
                                 std::string("magic"));
    if (magic != config.methods.end()) {
      const auto m = static_cast<std::size_t>(magic - config.methods.begin());
      out.influences[k] = scores[k][m];
      write_values(dir / "influence.bin", scores[k][m].values);
      const BudgetReport report = audit_budget(budgets[k], exp.plan.steps());
      out.budgets[k] = report;
      json budget = budget_json(budgets[k], report);
      budget["measurement"] = phi.name;
      budget["center_output"] = scores[k][m].center_output;
      write_text(dir / "budget.json", budget.dump(2) + "\n");
      if (!report.ok && config.policy == RetentionPolicy::Bisection)
        budget_failures += phi.name + ": " + report.message + " ";
    } else {
      out.influences[k] = scores[k].front();
    }
  }
  if (!budget_failures.empty())
    fail(ErrorKind::Budget, "replay budget violated: " + budget_failures);
  return out;
}

LdsSweep cmd_lds(const ExperimentConfig& config, const fs::path& run_dir,
                 const fs::path& out_dir) {
  const Experiment exp = build_experiment(config);
  const LoadedRun run = load_run(config, exp, run_dir);
  const std::size_t tasks = exp.measurements.size();
  const std::size_t n = exp.plan.pool_size();

  std::vector<std::vector<InfluenceVector>> scores(tasks);
  parallel_for(tasks, config.workers, [&](std::size_t k) {
    scores[k] = method_scores(config, exp, run.store, exp.measurements[k],
                              nullptr);
  });
  std::vector<std::string> names;
  for (const auto& phi : exp.measurements) names.push_back(phi.name);

  LdsSweep sweep;
  sweep.methods = config.methods;
  sweep.drop_fractions = config.drop_fractions;
  sweep.reports.resize(config.methods.size());
  json summary{{"task_id", config.task_id},
               {"config_hash", config.hash},
               {"subsets", config.subsets},
               {"ground_truth", config.ground_truth_mode},
               {"bootstrap_resamples", config.bootstrap_resamples},
               {"results", json::array()}};
  std::vector<std::string> undefined;

  for (std::size_t pi = 0; pi < config.drop_fractions.size(); ++pi) {
    const double p = config.drop_fractions[pi];
    const auto subsets = sample_subsets(n, p, config.subsets,
                                        derive_seed(config.subset_seed, pi));
    const MatrixXd truth =
        config.ground_truth_mode == "resample"
            ? ground_truth_resampled(exp, config, subsets)
            : ground_truth(exp.plan, exp.measurements, subsets, config.workers);

    std::vector<MatrixXd> predicted(config.methods.size(),
                                    MatrixXd(truth.rows(), truth.cols()));
    for (std::size_t m = 0; m < config.methods.size(); ++m)
      for (std::size_t k = 0; k < tasks; ++k)
        predicted[m].col(static_cast<Index>(k)) =
            predict_subsets(TaylorPredictor(scores[k][m]), subsets);

    std::ostringstream csv;
    csv << "measurement,subset_id,method,predicted,true\n";
    for (std::size_t k = 0; k < tasks; ++k)
      for (std::size_t m = 0; m < config.methods.size(); ++m)
        for (Index j = 0; j < truth.rows(); ++j)
          csv << names[k] << ',' << j << ',' << config.methods[m] << ','
              << format_double(predicted[m](j, static_cast<Index>(k))) << ','
              << format_double(truth(j, static_cast<Index>(k))) << '\n';
    write_text(out_dir / config.task_id / drop_dir_name(p) / "pairs.csv",
               csv.str());

    for (std::size_t m = 0; m < config.methods.size(); ++m) {
      LdsReport report = make_lds_report(
          names, predicted[m], truth, p, config.bootstrap_resamples,
          derive_seed(config.bootstrap_seed, pi));
      json per_task = json::object();
      for (std::size_t k = 0; k < tasks; ++k) {
        if (report.per_task[k]) {
          per_task[names[k]] = *report.per_task[k];
        } else {
          per_task[names[k]] = nullptr;
          undefined.push_back(config.methods[m] + "/" + names[k] + "/" +
                              drop_dir_name(p));
        }
      }
      summary["results"].push_back(
          json{{"method", config.methods[m]},
               {"drop_fraction", p},
               {"mean_lds", std::isfinite(report.mean) ? json(report.mean)
                                                       : json(nullptr)},
               {"ci95_low", report.interval.low},
               {"ci95_high", report.interval.high},
               {"per_task", per_task}});
      sweep.reports[m].push_back(std::move(report));
    }
  }
  sweep.summary_json = out_dir / config.task_id / "lds_summary.json";
  write_text(sweep.summary_json, summary.dump(2) + "\n");

  std::ostringstream table;
  table << "method,drop_fraction,mean_lds,ci95_low,ci95_high\n";
  for (std::size_t m = 0; m < config.methods.size(); ++m)
    for (const auto& r : sweep.reports[m])
      table << config.methods[m] << ',' << format_double(r.drop_fraction)
            << ',' << format_double(r.mean) << ','
            << format_double(r.interval.low) << ','
            << format_double(r.interval.high) << '\n';
  write_text(out_dir / config.task_id / "lds_summary.csv", table.str());

  if (!undefined.empty()) {
    std::string list;
    for (const auto& u : undefined) list += u + " ";
    fail(ErrorKind::UndefinedMetric, "Spearman correlation undefined for: " + list);
  }
  return sweep;
}

// ---------------------------------------------------------------------------
// gradcheck

namespace {

/// Relative error with the denominator floored at 1e-3 of the reference's
/// largest magnitude, so that coordinates that are tiny relative to the rest
/// are judged on an absolute scale.
double scaled_rel_error(const VectorXd& value, const VectorXd& reference) {
  const double scale = reference.cwiseAbs().maxCoeff();
  return max_relative_error(value, reference,
                            std::max(1e-3 * scale, 1e-300));
}

VectorXd random_vector(Rng& rng, Index n, double scale = 1.0) {
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

template <typename F>
VectorXd central_gradient(F&& f, const VectorXd& x, double h) {
  // Fourth-order central stencil.
  VectorXd g(x.size());
  auto at = [&](Index i, double step) {
    VectorXd moved = x;
    moved[i] += step;
    return f(moved);
  };
  for (Index i = 0; i < x.size(); ++i)
    g[i] = (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2 * h) - at(i, -2 * h))) /
           (12.0 * h);
  return g;
}

OptimizerState random_state(Rng& rng, const UpdateRule& rule, Index dim) {
  OptimizerState s = OptimizerState::initial(rule, random_vector(rng, dim));
  for (std::size_t b = 0; b < s.moments.size(); ++b) {
    s.moments[b] = random_vector(rng, dim, 0.5);
    if (rule.kind == RuleKind::Adam && b == 1)
      s.moments[b] = (s.moments[b].array().abs() + 0.05).matrix();
  }
  return s;
}

}  // namespace

std::vector<GradcheckRow> cmd_gradcheck(const ExperimentConfig& config,
                                        const fs::path& out_dir) {
  const Experiment exp = build_experiment(config);
  const TrainPlan& plan = exp.plan;
  const Index dim = param_dim(plan.model);
  Rng rng(derive_seed(config.gradcheck_seed, 0x9c));
  const double tol = config.gradcheck_tolerance;

  double grad_err = 0, hvp_err = 0, dot_err = 0, phi_err = 0;
  double state_err = 0, gvjp_err = 0;
  for (std::size_t trial = 0; trial < config.gradcheck_trials; ++trial) {
    const VectorXd theta = random_vector(rng, dim, 0.5);
    const Example& z = plan.data[rng.below(plan.pool_size())];
    const VectorXd v = random_vector(rng, dim);

    const VectorXd g = grad(plan.model, theta, z);
    grad_err = std::max(
        grad_err,
        scaled_rel_error(g, central_gradient(
                                [&](const VectorXd& p) {
                                  return loss(plan.model, p, z);
                                },
                                theta, 1e-5)));
    auto grad_at = [&](double step) {
      return grad(plan.model, VectorXd(theta + step * v), z);
    };
    const double hv = 1e-3;
    const VectorXd fd_hvp = (8.0 * (grad_at(hv) - grad_at(-hv)) -
                             (grad_at(2 * hv) - grad_at(-2 * hv))) /
                            (12.0 * hv);
    hvp_err = std::max(hvp_err,
                       scaled_rel_error(hvp(plan.model, theta, z, v), fd_hvp));
    VectorXd dot_value(1), dot_ref(1);
    dot_value[0] = grad_dot(plan.model, theta, z, v);
    dot_ref[0] = g.dot(v);
    dot_err = std::max(dot_err, max_relative_error(dot_value, dot_ref,
                                                    1e-8 * g.norm() * v.norm()));
    const MeasurementFn& phi =
        exp.measurements[trial % exp.measurements.size()];
    phi_err = std::max(
        phi_err, scaled_rel_error(measure_grad(phi, plan.model, theta),
                                  central_gradient(
                                      [&](const VectorXd& p) {
                                        return measure(phi, plan.model, p);
                                      },
                                      theta, 1e-5)));

    // Update-rule adjoints against differences of the scalar
    // ⟨Δ, h(s, g)⟩ in each state and gradient coordinate.
    const OptimizerState s = random_state(rng, plan.rule, dim);
    const VectorXd gvec = random_vector(rng, dim);
    StateAdjoint adj = StateAdjoint::zero(plan.rule, dim);
    adj.params = random_vector(rng, dim);
    for (auto& m : adj.moments) m = random_vector(rng, dim);
    auto pairing = [&](const OptimizerState& st, const VectorXd& gv) {
      const OptimizerState next = apply(plan.rule, st, gv);
      double total = adj.params.dot(next.params);
      for (std::size_t b = 0; b < adj.moments.size(); ++b)
        total += adj.moments[b].dot(next.moments[b]);
      return total;
    };
    const auto vj = vjp(plan.rule, s, gvec, adj);
    gvjp_err = std::max(
        gvjp_err, scaled_rel_error(vj.grad, central_gradient(
                                                [&](const VectorXd& gv) {
                                                  return pairing(s, gv);
                                                },
                                                gvec, 1e-4)));
    VectorXd packed(dim * static_cast<Index>(1 + s.moments.size()));
    VectorXd ref(packed.size());
    for (std::size_t b = 0; b <= s.moments.size(); ++b) {
      const VectorXd& block = b == 0 ? vj.state.params : vj.state.moments[b - 1];
      packed.segment(static_cast<Index>(b) * dim, dim) = block;
      const VectorXd base = b == 0 ? s.params : s.moments[b - 1];
      ref.segment(static_cast<Index>(b) * dim, dim) = central_gradient(
          [&](const VectorXd& x) {
            OptimizerState moved = s;
            if (b == 0) {
              moved.params = x;
            } else {
              moved.moments[b - 1] = x;
            }
            return pairing(moved, gvec);
          },
          base, 1e-4);
    }
    state_err = std::max(state_err, scaled_rel_error(packed, ref));
  }

  std::vector<GradcheckRow> rows{
      {"model.grad", grad_err, tol, grad_err <= tol},
      {"model.hvp", hvp_err, tol, hvp_err <= tol},
      {"model.grad_dot", dot_err, 1e-12, dot_err <= 1e-12},
      {"measure_grad", phi_err, tol, phi_err <= tol},
      {"optim.vjp_state", state_err, 1e-6, state_err <= 1e-6},
      {"optim.vjp_grad", gvjp_err, 1e-6, gvjp_err <= 1e-6},
  };

  if (config.gradcheck_influence_coords > 0) {
    const MeasurementFn& phi = exp.measurements.front();
    const auto [final_state, store] =
        train_recorded(plan, ones_weights(plan.pool_size()), config.policy);
    (void)final_state;
    const VectorXd exact =
        replay_metagradient(plan, phi, store).influence.values;
    const std::size_t coords =
        std::min(config.gradcheck_influence_coords, plan.pool_size());
    VectorXd picked(static_cast<Index>(coords)), fd(static_cast<Index>(coords));
    const DataWeights ones = ones_weights(plan.pool_size());
    for (std::size_t c = 0; c < coords; ++c) {
      const std::size_t i = c * plan.pool_size() / coords;
      DataWeights up = ones, down = ones;
      up[static_cast<Index>(i)] += 1e-4;
      down[static_cast<Index>(i)] -= 1e-4;
      picked[static_cast<Index>(c)] = exact[static_cast<Index>(i)];
      fd[static_cast<Index>(c)] =
          (model_output(plan, phi, up) - model_output(plan, phi, down)) / 2e-4;
    }
    const double err = scaled_rel_error(picked, fd);
    rows.push_back({"replay.influence", err, tol, err <= tol});
  }

  std::ostringstream csv;
  csv << "check,max_rel_error,tolerance,pass\n";
  for (const auto& r : rows)
    csv << r.check << ',' << format_double(r.max_rel_error) << ','
        << format_double(r.tolerance) << ',' << (r.pass ? "pass" : "fail")
        << '\n';
  write_text(out_dir / config.task_id / "gradcheck.csv", csv.str());
  return rows;
}

ProbeOutput cmd_probe(const ExperimentConfig& config, const fs::path& out_dir) {
  const Experiment exp = build_experiment(config);
  const MeasurementFn& phi = exp.measurements.at(config.probe_measurement);
  if (config.probe_index >= exp.plan.pool_size())
    fail(ErrorKind::Config, "probe index out of range");
  ProbeOutput out;
  out.probe = smoothness_probe(exp.plan, phi, config.probe_index,
                               config.probe_epsilons);
  const auto [final_state, store] = train_recorded(
      exp.plan, ones_weights(exp.plan.pool_size()), config.policy);
  (void)final_state;
  out.influence = replay_metagradient(exp.plan, phi, store)
                      .influence.values[static_cast<Index>(config.probe_index)];

  std::ostringstream csv;
  csv << "epsilon,delta,doubling_ratio,error\n";
  for (std::size_t k = 0; k < out.probe.epsilons.size(); ++k) {
    std::string ratio;
    for (const auto& d : out.probe.doublings)
      if (d.epsilon == out.probe.epsilons[k]) ratio = format_double(d.ratio);
    csv << format_double(out.probe.epsilons[k]) << ','
        << format_double(out.probe.deltas[k]) << ',' << ratio << ','
        << out.probe.errors[k] << '\n';
  }
  const fs::path dir = out_dir / config.task_id / phi.name;
  out.csv = dir / ("probe_" + std::to_string(config.probe_index) + ".csv");
  write_text(out.csv, csv.str());
  json summary{{"index", config.probe_index},
               {"measurement", phi.name},
               {"influence", out.influence}};
  if (out.probe.extrapolated_slope) {
    summary["extrapolated_slope"] = *out.probe.extrapolated_slope;
    summary["relative_error"] =
        std::abs(*out.probe.extrapolated_slope - out.influence) /
        std::max(std::abs(out.influence), 1e-300);
  }
  write_text(dir / ("probe_" + std::to_string(config.probe_index) + ".json"),
             summary.dump(2) + "\n");
  return out;
}

}  // namespace metagrad
