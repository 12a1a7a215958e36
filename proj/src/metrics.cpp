#include "fcil/metrics.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "fcil/errors.hpp"

namespace fcil {

AccuracyMatrix::AccuracyMatrix(std::size_t num_tasks)
    : num_tasks_(num_tasks), cells_(num_tasks * num_tasks) {}

void AccuracyMatrix::set(std::size_t task, std::size_t step, double accuracy) {
  if (task >= num_tasks_ || step >= num_tasks_ || task > step) {
    throw ContractViolation("AccuracyMatrix::set: cell (" + std::to_string(task) + ", " +
                            std::to_string(step) + ") outside the lower triangle");
  }
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
    throw InputError("AccuracyMatrix::set: accuracy outside [0, 1]");
  }
  cells_[task * num_tasks_ + step] = accuracy;
}

std::optional<double> AccuracyMatrix::get(std::size_t task, std::size_t step) const {
  if (task >= num_tasks_ || step >= num_tasks_) return std::nullopt;
  return cells_[task * num_tasks_ + step];
}

bool AccuracyMatrix::final_column_complete() const {
  if (num_tasks_ == 0) return false;
  for (std::size_t i = 0; i < num_tasks_; ++i) {
    if (!get(i, num_tasks_ - 1)) return false;
  }
  return true;
}

double faa(const AccuracyMatrix& a) {
  if (!a.final_column_complete()) throw InputError("faa: final column of the accuracy matrix is incomplete");
  const std::size_t last = a.num_tasks() - 1;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.num_tasks(); ++i) sum += *a.get(i, last);
  return sum / static_cast<double>(a.num_tasks());
}

double bias_entropy(std::span<const double> histogram) {
  double total = 0.0;
  for (double p : histogram) {
    if (!(p >= 0.0)) throw InputError("bias_entropy: negative or NaN histogram entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw InputError("bias_entropy: histogram sums to " + std::to_string(total) + ", not 1");
  }
  double h = 0.0;
  for (double p : histogram) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::optional<double> feature_bias(std::span<const GenerativePrototype> prototypes) {
  std::map<ClassId, std::map<ClientId, const GenerativePrototype*>> by_class;
  for (const auto& p : prototypes) by_class[p.label][p.client] = &p;

  double class_sum = 0.0;
  std::size_t shared_classes = 0;
  for (const auto& [label, clients] : by_class) {
    if (clients.size() < 2) continue;
    double pair_sum = 0.0;
    std::size_t pairs = 0;
    for (auto a = clients.begin(); a != clients.end(); ++a) {
      for (auto b = std::next(a); b != clients.end(); ++b) {
        pair_sum += std::sqrt(squared_distance(a->second->mean, b->second->mean));
        ++pairs;
      }
    }
    class_sum += pair_sum / static_cast<double>(pairs);
    ++shared_classes;
  }
  if (shared_classes == 0) return std::nullopt;
  return class_sum / static_cast<double>(shared_classes);
}

double discrete_kl(std::span<const double> p, std::span<const double> q) {
  require_same_size(p, q, "discrete_kl");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

double discrete_jsd(std::span<const Vector> dists, std::span<const double> weights) {
  if (dists.empty()) throw InputError("discrete_jsd: no distributions");
  if (dists.size() != weights.size()) {
    throw InputError("discrete_jsd: " + std::to_string(dists.size()) + " distributions but " +
                     std::to_string(weights.size()) + " weights");
  }
  const std::size_t k = dists.front().size();
  const auto require_normalized = [](std::span<const double> v, const char* what) {
    double s = 0.0;
    for (double x : v) {
      if (!(x >= 0.0)) throw InputError(std::string("discrete_jsd: negative entry in ") + what);
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw InputError(std::string("discrete_jsd: ") + what + " not normalized");
  };
  require_normalized(weights, "weights");
  for (const auto& q : dists) {
    if (q.size() != k) throw InputError("discrete_jsd: support mismatch");
    require_normalized(q, "distribution");
  }

  Vector mixture(k, 0.0);
  for (std::size_t m = 0; m < dists.size(); ++m) {
    for (std::size_t i = 0; i < k; ++i) mixture[i] += weights[m] * dists[m][i];
  }
  double jsd = 0.0;
  for (std::size_t m = 0; m < dists.size(); ++m) {
    if (weights[m] == 0.0) continue;
    jsd += weights[m] * discrete_kl(dists[m], mixture);
  }
  return std::max(jsd, 0.0);
}

CommEntry comm_cost(std::size_t adapter_floats, std::size_t head_floats,
                    std::size_t num_prototypes, std::size_t dim, std::size_t header_bytes) {
  CommEntry e;
  e.adapter_floats = adapter_floats;
  e.head_floats = head_floats;
  e.prototype_floats = num_prototypes * prototype_floats(dim);
  e.uplink_bytes = kWireFloatBytes * (adapter_floats + head_floats + e.prototype_floats) + header_bytes;
  e.downlink_bytes = kWireFloatBytes * (adapter_floats + head_floats) + header_bytes;
  return e;
}

double CommRound::per_client_bytes() const {
  if (clients == 0) return 0.0;
  return static_cast<double>(uplink_bytes + downlink_bytes) / static_cast<double>(clients);
}

void CommLedger::record(std::size_t task, std::size_t round,
                        std::span<const CommEntry> client_entries, std::size_t prototypes) {
  CommRound r{task, round, client_entries.size(), prototypes, 0, 0};
  for (const auto& e : client_entries) {
    r.uplink_bytes += e.uplink_bytes;
    r.downlink_bytes += e.downlink_bytes;
  }
  rounds_.push_back(r);
}

std::uint64_t CommLedger::total_uplink() const {
  std::uint64_t s = 0;
  for (const auto& r : rounds_) s += r.uplink_bytes;
  return s;
}

std::uint64_t CommLedger::total_downlink() const {
  std::uint64_t s = 0;
  for (const auto& r : rounds_) s += r.downlink_bytes;
  return s;
}

std::size_t vit_b16_backbone_params() {
  constexpr std::size_t dim = 768;
  constexpr std::size_t mlp = 3072;
  constexpr std::size_t patch = 16;
  constexpr std::size_t channels = 3;
  constexpr std::size_t tokens = 14 * 14 + 1;
  constexpr std::size_t blocks = 12;

  constexpr std::size_t patch_embed = patch * patch * channels * dim + dim;
  constexpr std::size_t cls_token = dim;
  constexpr std::size_t pos_embed = tokens * dim;
  constexpr std::size_t layer_norm = 2 * dim;
  constexpr std::size_t attention = (dim * 3 * dim + 3 * dim) + (dim * dim + dim);
  constexpr std::size_t mlp_block = (dim * mlp + mlp) + (mlp * dim + dim);
  constexpr std::size_t block = 2 * layer_norm + attention + mlp_block;
  return patch_embed + cls_token + pos_embed + blocks * block + layer_norm;
}

}  // namespace fcil
