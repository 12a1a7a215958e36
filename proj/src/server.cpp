#include "fcil/server.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "fcil/errors.hpp"

namespace fcil {

ClientParams aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw InputError("aggregate: no client updates");
  std::vector<ClientUpdate> ordered(updates.begin(), updates.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const ClientUpdate& a, const ClientUpdate& b) { return a.client < b.client; });

  std::size_t total = 0;
  for (const auto& u : ordered) {
    if (u.params == nullptr) throw ContractViolation("aggregate: null parameters");
    ordered.front().params->require_compatible(*u.params);
    total += u.num_samples;
  }
  if (total == 0) throw InputError("aggregate: all client sizes are zero");

  const ClientParams& first = *ordered.front().params;
  ClientParams out;
  out.adapter = Matrix(first.adapter.rows(), first.adapter.cols());
  out.head = LinearClassifier::zeros(first.head.num_classes(), first.head.dim());

  const auto accumulate = [](std::span<double> acc, std::span<const double> src, double w) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * src[i];
  };
  for (const auto& u : ordered) {
    const double w = static_cast<double>(u.num_samples) / static_cast<double>(total);
    accumulate(out.adapter.flat(), u.params->adapter.flat(), w);
    accumulate(out.head.weights.flat(), u.params->head.weights.flat(), w);
    accumulate(out.head.bias, u.params->head.bias, w);
  }
  return out;
}

ClientParams aggregate(std::span<const ClientParams> params, std::span<const std::size_t> sizes) {
  if (params.size() != sizes.size()) {
    throw ContractViolation("aggregate: " + std::to_string(params.size()) + " params but " +
                            std::to_string(sizes.size()) + " sizes");
  }
  std::vector<ClientUpdate> updates;
  updates.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) updates.push_back({i, &params[i], sizes[i]});
  return aggregate(updates);
}

// ---------------------------------------------------------------------------

namespace {

double diag_gaussian_log_density(const GenerativePrototype& p, std::span<const double> x,
                                 double cov_scale) {
  double acc = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double var = cov_scale * p.var_diag[j];
    const double diff = x[j] - p.mean[j];
    acc += std::log(2.0 * std::numbers::pi * var) + diff * diff / var;
  }
  return -0.5 * acc;
}

double log_sum_exp(const std::vector<double>& terms) {
  double max_term = -std::numeric_limits<double>::infinity();
  for (double t : terms) max_term = std::max(max_term, t);
  if (!std::isfinite(max_term)) return max_term;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - max_term);
  return max_term + std::log(s);
}

}  // namespace

HierarchicalMixture::HierarchicalMixture(std::span<const GenerativePrototype> prototypes,
                                         std::size_t num_classes, std::size_t num_clients)
    : num_classes_(num_classes),
      num_clients_(num_clients),
      omega_(num_classes, 0.0),
      pi_(num_classes, num_clients),
      grid_(num_classes * num_clients),
      client_alias_(num_classes) {
  if (prototypes.empty()) throw InputError("build_mixture: no prototypes");
  dim_ = prototypes.front().mean.size();
  std::vector<double> class_counts(num_classes, 0.0);
  for (const auto& p : prototypes) {
    if (p.label >= num_classes || p.client >= num_clients) {
      throw InputError("build_mixture: prototype (" + std::to_string(p.label) + ", " +
                       std::to_string(p.client) + ") outside the grid");
    }
    if (p.mean.size() != dim_ || p.var_diag.size() != dim_) {
      throw ContractViolation("build_mixture: prototype dimension mismatch");
    }
    if (p.count == 0) throw InputError("build_mixture: prototype with zero count");
    auto& slot = grid_[p.label * num_clients + p.client];
    if (slot) {
      throw InputError("build_mixture: duplicate prototype for class " + std::to_string(p.label) +
                       ", client " + std::to_string(p.client));
    }
    slot = p;
  }

  // Counts are summed in ascending client order.
  double total = 0.0;
  for (ClassId c = 0; c < num_classes; ++c) {
    for (ClientId m = 0; m < num_clients; ++m) {
      if (const auto& slot = grid_[c * num_clients + m]) {
        pi_(c, m) = static_cast<double>(slot->count);
        class_counts[c] += static_cast<double>(slot->count);
      }
    }
    if (class_counts[c] > 0.0) {
      classes_.push_back(c);
      for (ClientId m = 0; m < num_clients; ++m) pi_(c, m) /= class_counts[c];
      client_alias_[c] = AliasTable(pi_.row(c));
      total += class_counts[c];
    }
  }
  for (ClassId c = 0; c < num_classes; ++c) omega_[c] = class_counts[c] / total;
  class_alias_ = AliasTable(omega_);
}

const GenerativePrototype* HierarchicalMixture::prototype(ClassId c, ClientId m) const {
  if (c >= num_classes_ || m >= num_clients_) return nullptr;
  const auto& slot = grid_[c * num_clients_ + m];
  return slot ? &*slot : nullptr;
}

HierarchicalMixture::Component HierarchicalMixture::draw_component(RngStream& rng) const {
  const ClassId c = class_alias_.sample(rng);
  return {c, draw_client(c, rng)};
}

ClientId HierarchicalMixture::draw_client(ClassId c, RngStream& rng) const {
  const auto& table = client_alias_.at(c);
  if (table.empty()) throw InputError("mixture: class " + std::to_string(c) + " has no prototype");
  return table.sample(rng);
}

void HierarchicalMixture::draw_feature(Component component, double cov_scale, RngStream& rng,
                                       std::span<double> out) const {
  const GenerativePrototype* p = prototype(component.label, component.client);
  if (p == nullptr) throw ContractViolation("mixture: drawing from an absent prototype");
  for (std::size_t j = 0; j < dim_; ++j) {
    out[j] = p->mean[j] + std::sqrt(cov_scale * p->var_diag[j]) * rng.normal();
  }
}

double HierarchicalMixture::class_log_density(ClassId c, std::span<const double> x,
                                              double cov_scale) const {
  std::vector<double> terms;
  for (ClientId m = 0; m < num_clients_; ++m) {
    if (const auto* p = prototype(c, m)) {
      terms.push_back(std::log(pi_(c, m)) + diag_gaussian_log_density(*p, x, cov_scale));
    }
  }
  return log_sum_exp(terms);
}

double HierarchicalMixture::log_density(std::span<const double> x, double cov_scale) const {
  std::vector<double> terms;
  for (ClassId c : classes_) {
    for (ClientId m = 0; m < num_clients_; ++m) {
      if (const auto* p = prototype(c, m)) {
        terms.push_back(std::log(omega_[c]) + std::log(pi_(c, m)) +
                        diag_gaussian_log_density(*p, x, cov_scale));
      }
    }
  }
  return log_sum_exp(terms);
}

HierarchicalMixture build_mixture(std::span<const GenerativePrototype> prototypes,
                                  std::size_t num_classes, std::size_t num_clients) {
  return HierarchicalMixture(prototypes, num_classes, num_clients);
}

HierarchicalMixture build_mixture(std::span<const GenerativePrototype> prototypes) {
  std::size_t classes = 0;
  std::size_t clients = 0;
  for (const auto& p : prototypes) {
    classes = std::max(classes, p.label + 1);
    clients = std::max(clients, p.client + 1);
  }
  return HierarchicalMixture(prototypes, classes, clients);
}

void PrototypeBank::update(std::span<const GenerativePrototype> prototypes) {
  for (const auto& p : prototypes) entries_.insert_or_assign({p.label, p.client}, p);
}

std::vector<GenerativePrototype> PrototypeBank::all() const {
  std::vector<GenerativePrototype> out;
  out.reserve(entries_.size());
  for (const auto& [key, p] : entries_) out.push_back(p);
  return out;
}

SyntheticDataset sample_synthetic(const HierarchicalMixture& mix, std::size_t per_class,
                                  double cov_scale, RngStream& rng, SamplingMode mode) {
  if (mix.empty()) throw InputError("sample_synthetic: empty mixture");
  if (per_class == 0) throw InputError("sample_synthetic: per_class must be >= 1");
  if (!(cov_scale > 0.0)) throw InputError("sample_synthetic: cov_scale must be > 0");

  SyntheticDataset out{FeatureDataset(mix.dim(), mix.num_classes()), {}};
  Vector x(mix.dim());
  const auto emit = [&](HierarchicalMixture::Component comp) {
    mix.draw_feature(comp, cov_scale, rng, x);
    out.data.add(x, comp.label);
    out.source_client.push_back(comp.client);
  };
  if (mode == SamplingMode::Hierarchical) {
    const std::size_t total = per_class * mix.classes().size();
    for (std::size_t i = 0; i < total; ++i) emit(mix.draw_component(rng));
  } else {
    for (ClassId c : mix.classes()) {
      for (std::size_t i = 0; i < per_class; ++i) emit({c, mix.draw_client(c, rng)});
    }
  }
  return out;
}

RebalanceOutcome rebalance(const LinearClassifier& head, const SyntheticDataset& synth,
                           const RebalanceOptions& options,
                           std::span<const ClassId> seen_classes,
                           std::span<const ClassId> current_classes, RngStream& rng) {
  RebalanceOutcome outcome{head, false, 0, {}};

  std::vector<char> is_current(head.num_classes(), 0);
  for (ClassId c : current_classes) {
    if (c < is_current.size()) is_current[c] = 1;
  }
  std::vector<char> is_seen(head.num_classes(), seen_classes.empty() ? 1 : 0);
  for (ClassId c : seen_classes) {
    if (c < is_seen.size()) is_seen[c] = 1;
  }

  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < synth.data.size(); ++i) {
    const ClassId y = synth.data.labels[i];
    if (!is_seen[y]) continue;
    const bool keep = options.filter == ClassFilter::All ||
                      (options.filter == ClassFilter::CurrentOnly && is_current[y]) ||
                      (options.filter == ClassFilter::OldOnly && !is_current[y]);
    if (keep) rows.push_back(i);
  }
  if (rows.empty()) {
    outcome.warning = "rebalance: no synthetic samples left after class filter; head unchanged";
    return outcome;
  }
  if (options.batch == 0) throw InputError("rebalance: batch must be >= 1");

  const std::size_t batches_per_epoch = (rows.size() + options.batch - 1) / options.batch;
  SgdState w_state{options.learning_rate, options.momentum,
                   options.cosine ? LrSchedule::cosine(options.epochs * batches_per_epoch)
                                  : LrSchedule::constant(),
                   {}};
  SgdState b_state = w_state;

  LinearClassifier& w = outcome.head;
  const std::size_t d = w.dim();
  Matrix batch_x;
  std::vector<std::size_t> batch_y;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[rng.below(i)]);
    for (std::size_t start = 0; start < rows.size(); start += options.batch) {
      const std::size_t stop = std::min(rows.size(), start + options.batch);
      batch_x = Matrix(stop - start, d);
      batch_y.resize(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        std::copy_n(synth.data.features.row(rows[k]).begin(), d, batch_x.row(k - start).begin());
        batch_y[k - start] = synth.data.labels[rows[k]];
      }
      const SoftmaxCe ce = softmax_ce(w.logits(batch_x), batch_y, seen_classes);
      Matrix gw(w.num_classes(), d);
      Vector gb(w.num_classes(), 0.0);
      for (std::size_t r = 0; r < batch_x.rows(); ++r) {
        const auto gl = ce.grad.row(r);
        const auto x = batch_x.row(r);
        for (std::size_t c = 0; c < w.num_classes(); ++c) {
          if (gl[c] == 0.0) continue;
          auto row = gw.row(c);
          for (std::size_t j = 0; j < d; ++j) row[j] += gl[c] * x[j];
          gb[c] += gl[c];
        }
      }
      sgd_step(w.weights.flat(), gw.flat(), w_state, step);
      sgd_step(w.bias, gb, b_state, step);
      ++step;
    }
  }
  outcome.applied = true;
  outcome.samples_used = rows.size();
  return outcome;
}

KlEstimate monte_carlo_kl(const HierarchicalMixture& p,
                          const std::function<double(std::span<const double>)>& log_q,
                          std::size_t draws, RngStream& rng, double cov_scale) {
  if (draws < 2) throw InputError("monte_carlo_kl: need at least two draws");
  Vector x(p.dim());
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    p.draw_feature(p.draw_component(rng), cov_scale, rng, x);
    const double ratio = p.log_density(x, cov_scale) - log_q(x);
    if (!std::isfinite(ratio)) throw NumericalError("monte_carlo_kl: non-finite log ratio");
    const double delta = ratio - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (ratio - mean);
  }
  const double n = static_cast<double>(draws);
  return {mean, std::sqrt(m2 / (n - 1.0) / n), draws};
}

nlohmann::json mixture_snapshot(const HierarchicalMixture& mix) {
  nlohmann::json records = nlohmann::json::array();
  for (ClassId c : mix.classes()) {
    for (ClientId m = 0; m < mix.num_clients(); ++m) {
      if (const auto* p = mix.prototype(c, m)) {
        records.push_back({{"class", c},
                           {"client", m},
                           {"count", p->count},
                           {"mean", p->mean},
                           {"var", p->var_diag}});
      }
    }
  }
  nlohmann::json pi = nlohmann::json::array();
  for (ClassId c = 0; c < mix.num_classes(); ++c) {
    const auto row = mix.client_weights().row(c);
    pi.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return {{"prototypes", std::move(records)},
          {"omega", mix.class_weights()},
          {"pi", std::move(pi)}};
}

}  // namespace fcil
