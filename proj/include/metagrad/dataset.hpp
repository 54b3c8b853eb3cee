// Training pools and their ingestion (CSV files and seeded synthetic
// generators).
#ifndef METAGRAD_DATASET_HPP
#define METAGRAD_DATASET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "metagrad/core.hpp"

namespace metagrad {

enum class TaskKind { Regression, Classification };

/// One training or test example. For classification `target` holds the class
/// index as an exact integer-valued double.
struct Example {
  VectorXd features;
  double target = 0.0;

  int label() const { return static_cast<int>(target); }
};

/// Ordered pool of examples. The position of an example is its identity: data
/// weights, batch schedules and influence vectors all index into it.
class Dataset {
 public:
  Dataset(std::vector<Example> examples, TaskKind kind, int class_count = 0);

  std::size_t size() const { return examples_.size(); }
  Index feature_dim() const { return feature_dim_; }
  TaskKind task_kind() const { return kind_; }
  int class_count() const { return class_count_; }

  const Example& operator[](std::size_t i) const { return examples_[i]; }
  const std::vector<Example>& examples() const { return examples_; }

  /// Sub-dataset with the examples at `indices`, in that order.
  Dataset subset(const std::vector<std::size_t>& indices) const;

 private:
  std::vector<Example> examples_;
  TaskKind kind_;
  int class_count_;
  Index feature_dim_;
};

/// Reads a CSV with a header row, feature columns first and the target in the
/// last column.
Dataset load_csv(const std::string& path, TaskKind kind, int class_count = 0);

struct SyntheticSpec {
  /// One of "linear-gaussian" (regression), "gaussian-blobs" and "moons"
  /// (two-class).
  std::string generator = "gaussian-blobs";
  std::size_t n_train = 100;
  std::size_t n_test = 10;
  Index dim = 2;
  double noise = 0.1;
  double separation = 1.0;
  std::uint64_t seed = 0;
};

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

/// Generator id plus seed fully determine both splits.
TrainTestSplit make_synthetic(const SyntheticSpec& spec);

}  // namespace metagrad

#endif  // METAGRAD_DATASET_HPP
