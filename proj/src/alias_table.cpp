#include "fcil/alias_table.hpp"

#include <cmath>
#include <string>

#include "fcil/errors.hpp"

namespace fcil {

AliasTable::AliasTable(std::span<const double> weights) {
  if (weights.empty()) throw InputError("alias table: no weights");
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) {
      throw InputError("alias table: weight " + std::to_string(i) + " is negative or non-finite");
    }
    total += weights[i];
  }
  if (!(total > 0.0)) throw InputError("alias table: weights sum to zero");

  const std::size_t n = weights.size();
  threshold_.assign(n, 0.0);
  alias_.resize(n);
  std::vector<double> scaled(n);
  std::vector<std::size_t> small;
  std::vector<std::size_t> large;
  for (std::size_t i = 0; i < n; ++i) {
    alias_[i] = i;
    scaled[i] = weights[i] * static_cast<double>(n) / total;
    (scaled[i] < 1.0 ? small : large).push_back(i);
  }
  while (!small.empty() && !large.empty()) {
    const std::size_t s = small.back();
    small.pop_back();
    const std::size_t l = large.back();
    threshold_[s] = scaled[s];
    alias_[s] = l;
    scaled[l] = (scaled[l] + scaled[s]) - 1.0;
    if (scaled[l] < 1.0) {
      large.pop_back();
      small.push_back(l);
    }
  }
  // Leftovers are 1 up to rounding.
  for (std::size_t l : large) threshold_[l] = 1.0;
  for (std::size_t s : small) threshold_[s] = 1.0;
}

std::size_t AliasTable::sample(RngStream& rng) const noexcept {
  const auto column = static_cast<std::size_t>(rng.uniform() * static_cast<double>(size()));
  const std::size_t i = column < size() ? column : size() - 1;
  return rng.uniform() < threshold_[i] ? i : alias_[i];
}

Vector AliasTable::probabilities() const {
  const std::size_t n = size();
  Vector p(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] += threshold_[i];
    p[alias_[i]] += 1.0 - threshold_[i];
  }
  for (double& v : p) v /= static_cast<double>(n);
  return p;
}

}  // namespace fcil
