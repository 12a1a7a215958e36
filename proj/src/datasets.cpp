#include "fcil/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fcil/errors.hpp"
#include "fcil/rng.hpp"

namespace fcil {

namespace {

// Stream tags. Part of the determinism contract: changing them changes every
// generated dataset.
constexpr std::uint64_t kTagSchedule = 0x5343484544ull;
constexpr std::uint64_t kTagPartition = 0x504152544954ull;
constexpr std::uint64_t kTagClassMeans = 0x4D45414E53ull;
constexpr std::uint64_t kTagTrainSamples = 0x545241494Eull;
constexpr std::uint64_t kTagTestSamples = 0x54455354ull;

}  // namespace

void FeatureDataset::add(std::span<const double> feature, ClassId label) {
  if (feature.size() != dim) {
    throw ContractViolation("FeatureDataset::add: feature of length " +
                            std::to_string(feature.size()) + ", expected " + std::to_string(dim));
  }
  if (label >= num_classes) {
    throw InputError("FeatureDataset::add: label " + std::to_string(label) + " >= " +
                     std::to_string(num_classes));
  }
  if (features.rows() == 0 && features.cols() != dim) features = Matrix(0, dim);
  features.append_row(feature);
  labels.push_back(label);
}

FeatureDataset FeatureDataset::subset(std::span<const std::size_t> indices) const {
  FeatureDataset out(dim, num_classes);
  for (std::size_t i : indices) {
    if (i >= size()) throw ContractViolation("FeatureDataset::subset: index out of range");
    out.features.append_row(features.row(i));
    out.labels.push_back(labels[i]);
  }
  return out;
}

FeatureDataset FeatureDataset::filter_classes(std::span<const ClassId> classes) const {
  std::vector<char> keep(num_classes, 0);
  for (ClassId c : classes) {
    if (c < num_classes) keep[c] = 1;
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < size(); ++i) {
    if (keep[labels[i]]) rows.push_back(i);
  }
  return subset(rows);
}

std::vector<std::size_t> FeatureDataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (ClassId y : labels) ++counts.at(y);
  return counts;
}

std::vector<ClassId> FeatureDataset::present_classes() const {
  const auto counts = class_counts();
  std::vector<ClassId> out;
  for (ClassId c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0) out.push_back(c);
  }
  return out;
}

void FeatureDataset::validate() const {
  if (features.rows() != labels.size()) {
    throw InputError("FeatureDataset: " + std::to_string(features.rows()) + " rows but " +
                     std::to_string(labels.size()) + " labels");
  }
  if (!labels.empty() && features.cols() != dim) {
    throw InputError("FeatureDataset: feature width " + std::to_string(features.cols()) +
                     " != dim " + std::to_string(dim));
  }
  for (ClassId y : labels) {
    if (y >= num_classes) throw InputError("FeatureDataset: label " + std::to_string(y) + " >= C");
  }
  if (!all_finite(features.flat())) throw InputError("FeatureDataset: non-finite feature value");
}

std::vector<ClassId> TaskSchedule::seen_through(std::size_t task) const {
  std::vector<ClassId> out;
  for (std::size_t t = 0; t <= task && t < tasks.size(); ++t) {
    out.insert(out.end(), tasks[t].begin(), tasks[t].end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<ClassId> TaskSchedule::seen_before(std::size_t task) const {
  if (task == 0) return {};
  return seen_through(task - 1);
}

TaskSchedule schedule_tasks(std::size_t num_classes, std::size_t num_tasks, std::uint64_t seed) {
  if (num_tasks == 0) throw InputError("schedule_tasks: need at least one task");
  if (num_tasks > num_classes) {
    throw InputError("schedule_tasks: " + std::to_string(num_tasks) + " tasks for " +
                     std::to_string(num_classes) + " classes");
  }
  std::vector<ClassId> order(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) order[i] = i;
  RngStream rng(seed, stream_id({kTagSchedule}));
  for (std::size_t i = num_classes; i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }

  TaskSchedule schedule;
  const std::size_t base = num_classes / num_tasks;
  const std::size_t extra = num_classes % num_tasks;
  std::size_t cursor = 0;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const std::size_t n = base + (t < extra ? 1 : 0);
    std::vector<ClassId> group(order.begin() + cursor, order.begin() + cursor + n);
    std::sort(group.begin(), group.end());
    schedule.tasks.push_back(std::move(group));
    cursor += n;
  }
  return schedule;
}

std::vector<std::vector<std::size_t>> dirichlet_partition_indices(
    const FeatureDataset& ds, std::span<const ClassId> task_classes, const PartitionSpec& spec,
    std::size_t task_index) {
  if (spec.num_clients == 0) throw InputError("dirichlet_partition: need at least one client");
  if (!(spec.beta > 0.0)) throw InputError("dirichlet_partition: beta must be > 0");
  if (task_classes.empty()) throw InputError("dirichlet_partition: empty task class set");

  const std::size_t m_count = spec.num_clients;
  std::vector<char> in_task(ds.num_classes, 0);
  for (ClassId c : task_classes) {
    if (c >= ds.num_classes) throw InputError("dirichlet_partition: class outside dataset");
    in_task[c] = 1;
  }
  std::vector<ClassId> classes(task_classes.begin(), task_classes.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::vector<std::vector<std::size_t>> class_rows(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (in_task[ds.labels[i]]) class_rows[ds.labels[i]].push_back(i);
  }
  for (ClassId c : classes) {
    if (class_rows[c].empty()) {
      throw InputError("dirichlet_partition: class " + std::to_string(c) + " has no samples");
    }
  }

  std::vector<double> log_gamma(m_count);
  std::vector<double> cdf(m_count);
  for (std::size_t attempt = 0; attempt < std::max<std::size_t>(spec.max_retries, 1); ++attempt) {
    RngStream rng(spec.seed, stream_id({kTagPartition, task_index, attempt}));
    std::vector<std::vector<std::size_t>> shards(m_count);

    for (ClassId c : classes) {
      double max_log = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < m_count; ++m) {
        log_gamma[m] = rng.log_gamma_variate(spec.beta);
        max_log = std::max(max_log, log_gamma[m]);
      }
      double total = 0.0;
      for (std::size_t m = 0; m < m_count; ++m) {
        total += std::exp(log_gamma[m] - max_log);
        cdf[m] = total;
      }
      for (std::size_t m = 0; m < m_count; ++m) cdf[m] /= total;
      cdf[m_count - 1] = 1.0;

      for (std::size_t row : class_rows[c]) {
        const double u = rng.uniform();
        const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
        const auto m = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
            it - cdf.begin(), static_cast<std::ptrdiff_t>(m_count - 1)));
        shards[m].push_back(row);
      }
    }

    const bool feasible = std::all_of(shards.begin(), shards.end(), [&](const auto& s) {
      return s.size() >= spec.min_samples_per_client;
    });
    if (feasible) {
      for (auto& s : shards) std::sort(s.begin(), s.end());
      return shards;
    }
  }
  throw PartitionInfeasible("dirichlet_partition: no split gives every client >= " +
                            std::to_string(spec.min_samples_per_client) + " samples for task " +
                            std::to_string(task_index) + " after " +
                            std::to_string(spec.max_retries) + " attempts (beta=" +
                            std::to_string(spec.beta) + ")");
}

std::vector<FeatureDataset> dirichlet_partition(const FeatureDataset& ds,
                                                std::span<const ClassId> task_classes,
                                                const PartitionSpec& spec,
                                                std::size_t task_index) {
  const auto indices = dirichlet_partition_indices(ds, task_classes, spec, task_index);
  std::vector<FeatureDataset> shards;
  shards.reserve(indices.size());
  for (const auto& rows : indices) shards.push_back(ds.subset(rows));
  return shards;
}

void SyntheticSpec::validate() const {
  if (dim < 1) throw InputError("synthetic spec: dim must be >= 1");
  if (num_classes < 2) throw InputError("synthetic spec: need at least 2 classes");
  if (!(cov_scale > 0.0)) throw InputError("synthetic spec: cov_scale must be > 0");
  if (!(mean_scale >= 0.0)) throw InputError("synthetic spec: mean_scale must be >= 0");
}

FeatureDataset synth_generate(const SyntheticSpec& spec, Split split) {
  spec.validate();
  Matrix means(spec.num_classes, spec.dim);
  RngStream mean_rng(spec.seed, stream_id({kTagClassMeans}));
  for (double& v : means.flat()) v = spec.mean_scale * mean_rng.normal();

  RngStream rng(spec.seed, stream_id({split == Split::Train ? kTagTrainSamples : kTagTestSamples}));
  const double sd = std::sqrt(spec.cov_scale);
  FeatureDataset ds(spec.dim, spec.num_classes);
  Vector x(spec.dim);
  for (ClassId c = 0; c < spec.num_classes; ++c) {
    const auto mu = means.row(c);
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      for (std::size_t j = 0; j < spec.dim; ++j) x[j] = mu[j] + sd * rng.normal();
      ds.add(x, c);
    }
  }
  return ds;
}

}  // namespace fcil
