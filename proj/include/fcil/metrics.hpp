#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fcil/client.hpp"
#include "fcil/numerics.hpp"

namespace fcil {

/// A[i][j]: accuracy on task i after incremental step j, defined for i <= j.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t num_tasks);

  std::size_t num_tasks() const noexcept { return num_tasks_; }
  void set(std::size_t task, std::size_t step, double accuracy);
  std::optional<double> get(std::size_t task, std::size_t step) const;
  bool final_column_complete() const;
  /// Row-major T x T with nullopt above the diagonal or where unset.
  const std::vector<std::optional<double>>& cells() const noexcept { return cells_; }

 private:
  std::size_t num_tasks_ = 0;
  std::vector<std::optional<double>> cells_;
};

/// Final Average Accuracy: mean of the final column, (1/T) sum_i A[i][T-1].
double faa(const AccuracyMatrix& a);

/// Shannon entropy in nats, with 0 ln 0 = 0. The histogram must be
/// non-negative and sum to 1 within 1e-9.
double bias_entropy(std::span<const double> histogram);

/// Mean over classes held by at least two clients of the mean pairwise L2
/// distance between those clients' class means. nullopt when no class is
/// shared.
std::optional<double> feature_bias(std::span<const GenerativePrototype> prototypes);

/// Weighted generalized Jensen-Shannon divergence of finite categoricals:
/// sum_m w_m KL(Q_m || G) with G = sum_m w_m Q_m. Nats.
double discrete_jsd(std::span<const Vector> dists, std::span<const double> weights);

/// KL(p || q) for finite categoricals, nats; +inf if q lacks support of p.
double discrete_kl(std::span<const double> p, std::span<const double> q);

// ---------------------------------------------------------------------------
// Communication accounting

inline constexpr std::size_t kWireFloatBytes = 4;

/// Floats sent per prototype: mean, diagonal variance and the count.
constexpr std::size_t prototype_floats(std::size_t dim) { return 2 * dim + 1; }

struct CommEntry {
  std::size_t adapter_floats = 0;
  std::size_t head_floats = 0;
  std::size_t prototype_floats = 0;
  std::uint64_t uplink_bytes = 0;    // client -> server
  std::uint64_t downlink_bytes = 0;  // server -> client
};

/// Traffic of one client in one round. Uplink carries adapter, head and
/// prototypes; downlink carries adapter and head. `header_bytes` is added
/// once per message.
CommEntry comm_cost(std::size_t adapter_floats, std::size_t head_floats,
                    std::size_t num_prototypes, std::size_t dim, std::size_t header_bytes = 0);

struct CommRound {
  std::size_t task = 0;
  std::size_t round = 0;
  std::size_t clients = 0;  // clients that exchanged messages
  std::size_t prototypes = 0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;

  /// Average bytes exchanged between a single client and the server.
  double per_client_bytes() const;
};

class CommLedger {
 public:
  void record(std::size_t task, std::size_t round, std::span<const CommEntry> client_entries,
              std::size_t prototypes);
  const std::vector<CommRound>& rounds() const noexcept { return rounds_; }
  std::uint64_t total_uplink() const;
  std::uint64_t total_downlink() const;

 private:
  std::vector<CommRound> rounds_;
};

/// Closed-form parameter count of a ViT-B/16 backbone (patch embedding,
/// class token, positional embedding, 12 encoder blocks, final norm).
std::size_t vit_b16_backbone_params();
/// Prefix-prompt parameters: length x dim, keys and values, per layer.
constexpr std::size_t prefix_prompt_params(std::size_t length, std::size_t dim,
                                           std::size_t layers) {
  return length * dim * 2 * layers;
}

}  // namespace fcil
