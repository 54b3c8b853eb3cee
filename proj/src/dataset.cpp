#include "metagrad/dataset.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace metagrad {

Dataset::Dataset(std::vector<Example> examples, TaskKind kind,
                 int class_count)
    : examples_(std::move(examples)), kind_(kind), class_count_(class_count) {
  require(!examples_.empty(), "dataset must contain at least one example");
  feature_dim_ = examples_.front().features.size();
  if (kind_ == TaskKind::Classification)
    require(class_count_ >= 2, "classification needs class_count >= 2");
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    const Example& z = examples_[i];
    require(z.features.size() == feature_dim_,
            "example " + std::to_string(i) + " has inconsistent feature dim");
    require(z.features.allFinite() && std::isfinite(z.target),
            "example " + std::to_string(i) + " is not finite");
    if (kind_ == TaskKind::Classification) {
      require(z.target >= 0 && z.target < class_count_ &&
                  z.target == std::floor(z.target),
              "example " + std::to_string(i) + " has invalid class index");
    }
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  std::vector<Example> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    require(i < examples_.size(), "subset index out of range");
    out.push_back(examples_[i]);
  }
  return Dataset(std::move(out), kind_, class_count_);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_cell(const std::string& cell, const std::string& path,
                  std::size_t line_no) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used])))
    ++used;
  if (cell.empty() || used != cell.size())
    fail(ErrorKind::Io, path + ":" + std::to_string(line_no) +
                            ": cannot parse number '" + cell + "'");
  return value;
}

}  // namespace

Dataset load_csv(const std::string& path, TaskKind kind, int class_count) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open dataset '" + path + "'");
  std::string line;
  if (!std::getline(in, line))
    fail(ErrorKind::Io, path + ": missing header row");
  const std::size_t columns = split_csv_line(line).size();
  if (columns < 2)
    fail(ErrorKind::Io, path + ": need at least one feature and a target");

  std::vector<Example> examples;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != columns)
      fail(ErrorKind::Io, path + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(columns) + " columns");
    Example z;
    z.features.resize(static_cast<Index>(columns - 1));
    for (std::size_t c = 0; c + 1 < columns; ++c)
      z.features[static_cast<Index>(c)] = parse_cell(cells[c], path, line_no);
    z.target = parse_cell(cells.back(), path, line_no);
    examples.push_back(std::move(z));
  }
  if (examples.empty()) fail(ErrorKind::Io, path + ": no data rows");
  if (kind == TaskKind::Classification && class_count == 0) {
    double top = 0;
    for (const auto& z : examples) top = std::max(top, z.target);
    class_count = std::max(2, static_cast<int>(top) + 1);
  }
  return Dataset(std::move(examples), kind, class_count);
}

namespace {

std::vector<Example> linear_gaussian(Rng& rng, const VectorXd& beta,
                                     std::size_t n, double noise) {
  std::vector<Example> out(n);
  for (auto& z : out) {
    z.features.resize(beta.size());
    for (Index k = 0; k < beta.size(); ++k) z.features[k] = rng.normal();
    z.target = z.features.dot(beta) + noise * rng.normal();
  }
  return out;
}

std::vector<Example> gaussian_blobs(Rng& rng, const VectorXd& center,
                                    std::size_t n, double noise) {
  std::vector<Example> out(n);
  for (auto& z : out) {
    const int label = static_cast<int>(rng.below(2));
    const double sign = label == 1 ? 1.0 : -1.0;
    z.features.resize(center.size());
    for (Index k = 0; k < center.size(); ++k)
      z.features[k] = sign * center[k] + rng.normal();
    // Label noise keeps the classes overlapping, so no example is fit
    // perfectly and the optimum stays bounded.
    z.target = rng.uniform() < noise ? 1 - label : label;
  }
  return out;
}

std::vector<Example> moons(Rng& rng, std::size_t n, double noise) {
  constexpr double kPi = 3.14159265358979323846;
  std::vector<Example> out(n);
  for (auto& z : out) {
    const int label = static_cast<int>(rng.below(2));
    const double angle = kPi * rng.uniform();
    z.features.resize(2);
    if (label == 0) {
      z.features << std::cos(angle), std::sin(angle);
    } else {
      z.features << 1.0 - std::cos(angle), 0.5 - std::sin(angle);
    }
    z.features[0] += noise * rng.normal();
    z.features[1] += noise * rng.normal();
    z.target = label;
  }
  return out;
}

}  // namespace

TrainTestSplit make_synthetic(const SyntheticSpec& spec) {
  require(spec.n_train >= 1, "synthetic dataset needs n_train >= 1");
  require(spec.n_test >= 1, "synthetic dataset needs n_test >= 1");
  require(spec.dim >= 1, "synthetic dataset needs dim >= 1");
  Rng param_rng(derive_seed(spec.seed, 0));
  Rng train_rng(derive_seed(spec.seed, 1));
  Rng test_rng(derive_seed(spec.seed, 2));

  if (spec.generator == "linear-gaussian") {
    VectorXd beta(spec.dim);
    for (Index k = 0; k < spec.dim; ++k) beta[k] = param_rng.normal();
    return {Dataset(linear_gaussian(train_rng, beta, spec.n_train, spec.noise),
                    TaskKind::Regression),
            Dataset(linear_gaussian(test_rng, beta, spec.n_test, spec.noise),
                    TaskKind::Regression)};
  }
  if (spec.generator == "gaussian-blobs") {
    VectorXd direction(spec.dim);
    for (Index k = 0; k < spec.dim; ++k) direction[k] = param_rng.normal();
    const VectorXd center =
        0.5 * spec.separation * direction / direction.norm();
    return {Dataset(gaussian_blobs(train_rng, center, spec.n_train, spec.noise),
                    TaskKind::Classification, 2),
            Dataset(gaussian_blobs(test_rng, center, spec.n_test, spec.noise),
                    TaskKind::Classification, 2)};
  }
  if (spec.generator == "moons") {
    require(spec.dim == 2, "moons generator is two-dimensional");
    return {Dataset(moons(train_rng, spec.n_train, spec.noise),
                    TaskKind::Classification, 2),
            Dataset(moons(test_rng, spec.n_test, spec.noise),
                    TaskKind::Classification, 2)};
  }
  fail(ErrorKind::InvalidArgument,
       "unknown synthetic generator '" + spec.generator + "'");
}

}  // namespace metagrad
