#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fcil/numerics.hpp"
#include "fcil/rng.hpp"

namespace fcil {

/// Walker/Vose alias table: O(n) construction, O(1) draws.
class AliasTable {
 public:
  AliasTable() = default;
  /// Weights must be >= 0 with a positive sum; they need not be normalized.
  explicit AliasTable(std::span<const double> weights);

  std::size_t size() const noexcept { return threshold_.size(); }
  bool empty() const noexcept { return threshold_.empty(); }

  /// One draw: a uniform column, then a uniform coin against its threshold.
  std::size_t sample(RngStream& rng) const noexcept;

  /// The categorical distribution the table encodes.
  Vector probabilities() const;

  std::span<const double> thresholds() const noexcept { return threshold_; }
  std::span<const std::size_t> aliases() const noexcept { return alias_; }

 private:
  std::vector<double> threshold_;
  std::vector<std::size_t> alias_;
};

inline AliasTable build_alias(std::span<const double> weights) { return AliasTable(weights); }
inline std::size_t sample_alias(const AliasTable& table, RngStream& rng) {
  return table.sample(rng);
}

}  // namespace fcil
