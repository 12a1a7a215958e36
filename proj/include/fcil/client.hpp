#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "fcil/datasets.hpp"
#include "fcil/numerics.hpp"
#include "fcil/rng.hpp"

namespace fcil {

/// Linear head: logits = W h + b. Ties in argmax go to the lowest class id.
struct LinearClassifier {
  Matrix weights;  // C x d
  Vector bias;     // C

  static LinearClassifier zeros(std::size_t num_classes, std::size_t dim);

  std::size_t num_classes() const noexcept { return weights.rows(); }
  std::size_t dim() const noexcept { return weights.cols(); }

  Matrix logits(const Matrix& features) const;
  /// Argmax over `active` (all classes when empty), one prediction per row.
  std::vector<ClassId> predict(const Matrix& features, std::span<const ClassId> active = {}) const;

  friend bool operator==(const LinearClassifier&, const LinearClassifier&) = default;
};

enum class AdapterMode { None, Linear };

/// Trainable client state. The adapter is a residual linear map applied to
/// the frozen features, h -> h + A h; an empty adapter is the identity.
struct ClientParams {
  Matrix adapter;  // d x d, or 0 x 0
  LinearClassifier head;

  static ClientParams init(std::size_t num_classes, std::size_t dim, AdapterMode mode);

  bool has_adapter() const noexcept { return !adapter.empty(); }
  /// Adapted features for every row of `raw`.
  Matrix transform(const Matrix& raw) const;
  std::size_t adapter_size() const noexcept { return adapter.size(); }
  std::size_t head_size() const noexcept { return head.weights.size() + head.bias.size(); }

  void require_compatible(const ClientParams& other) const;

  friend bool operator==(const ClientParams&, const ClientParams&) = default;
};

enum class LossMasking {
  Masked,    // softmax over the classes present in the shard
  Unmasked,  // softmax over the whole head
};

struct LocalTrainOptions {
  std::size_t epochs = 5;
  std::size_t batch = 16;
  OptimizerSpec optimizer;
  LossMasking masking = LossMasking::Masked;
};

/// A client's model after local training. In masked mode the client's
/// logits only range over `active_classes`; empty means the whole head.
struct LocalModel {
  ClientParams params;
  std::vector<ClassId> active_classes;
};

/// Minimizes cross-entropy on `shard`, reshuffling once per epoch from `rng`.
/// Returns std::nullopt (skip this client) when the shard is empty.
std::optional<LocalModel> local_train(const ClientParams& init, const FeatureDataset& shard,
                                      const LocalTrainOptions& options, RngStream& rng);

/// Per (client, class) diagonal Gaussian over feature vectors.
struct GenerativePrototype {
  ClientId client = 0;
  ClassId label = 0;
  Vector mean;
  Vector var_diag;
  std::size_t count = 0;

  friend bool operator==(const GenerativePrototype&, const GenerativePrototype&) = default;
};

struct PrototypeOptions {
  double variance_floor = 1e-6;
  bool unbiased_variance = false;  // 1/(n-1) instead of 1/n
};

/// One prototype per class present in `features`, ordered by class id.
/// Rows of a class are summed in lexicographic order of their values, which
/// makes the result exactly invariant to sample order.
std::vector<GenerativePrototype> compute_prototypes(const FeatureDataset& features,
                                                    ClientId client,
                                                    const PrototypeOptions& options = {});

/// Fraction of `eval_set` predicted as each class. The model sees adapted
/// features; `active` restricts the argmax.
Vector response_histogram(const ClientParams& params, const FeatureDataset& eval_set,
                          std::span<const ClassId> active = {});

double accuracy(const ClientParams& params, const FeatureDataset& eval_set,
                std::span<const ClassId> active = {});

}  // namespace fcil
