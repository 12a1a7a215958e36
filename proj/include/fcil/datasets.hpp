#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fcil/numerics.hpp"

namespace fcil {

using ClassId = std::size_t;
using ClientId = std::size_t;

/// Labeled feature vectors (stand-ins for frozen-backbone outputs).
struct FeatureDataset {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  Matrix features;              // size() x dim
  std::vector<ClassId> labels;  // one per row

  FeatureDataset() = default;
  FeatureDataset(std::size_t d, std::size_t c) : dim(d), num_classes(c), features(0, d) {}

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }

  void add(std::span<const double> feature, ClassId label);

  /// Rows at `indices`, in the given order.
  FeatureDataset subset(std::span<const std::size_t> indices) const;
  /// Rows whose label is in `classes`, in dataset order.
  FeatureDataset filter_classes(std::span<const ClassId> classes) const;
  /// Sorted distinct labels present.
  std::vector<ClassId> present_classes() const;
  std::vector<std::size_t> class_counts() const;

  /// Throws InputError if labels, shapes or values violate the invariants.
  void validate() const;

  friend bool operator==(const FeatureDataset&, const FeatureDataset&) = default;
};

struct TaskSchedule {
  std::vector<std::vector<ClassId>> tasks;  // disjoint, each sorted

  std::size_t num_tasks() const noexcept { return tasks.size(); }
  /// Union of tasks [0, task], sorted.
  std::vector<ClassId> seen_through(std::size_t task) const;
  /// Union of tasks [0, task), sorted.
  std::vector<ClassId> seen_before(std::size_t task) const;
};

/// Seeded permutation of [0, C) cut into T contiguous groups. When T does not
/// divide C the first C % T groups get one extra class.
TaskSchedule schedule_tasks(std::size_t num_classes, std::size_t num_tasks, std::uint64_t seed);

struct PartitionSpec {
  std::size_t num_clients = 10;
  double beta = 0.5;
  std::uint64_t seed = 0;
  std::size_t min_samples_per_client = 1;
  std::size_t max_retries = 100;
};

/// Per-class Dirichlet label imbalance: for each class draw p ~ Dir(beta 1_M)
/// and route each of its samples to a client by p. The whole draw is retried
/// on a fresh sub-stream until every client holds at least
/// `min_samples_per_client` samples of the task. Returns sorted row indices of
/// `ds`, one list per client. Throws PartitionInfeasible when retries run out.
std::vector<std::vector<std::size_t>> dirichlet_partition_indices(
    const FeatureDataset& ds, std::span<const ClassId> task_classes, const PartitionSpec& spec,
    std::size_t task_index);

std::vector<FeatureDataset> dirichlet_partition(const FeatureDataset& ds,
                                                std::span<const ClassId> task_classes,
                                                const PartitionSpec& spec, std::size_t task_index);

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t dim = 64;
  double mean_scale = 1.0;  // class means ~ N(0, mean_scale^2 I)
  double cov_scale = 1.0;   // samples ~ N(mean, cov_scale I)
  std::size_t samples_per_class = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Split { Train, Test };

/// Isotropic Gaussian class blobs. Train and test splits share the class
/// means but use independent sample streams. Classes are balanced and rows
/// are grouped by class in ascending order.
FeatureDataset synth_generate(const SyntheticSpec& spec, Split split = Split::Train);

}  // namespace fcil
