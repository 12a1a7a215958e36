#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fcil/alias_table.hpp"
#include "fcil/client.hpp"
#include "fcil/datasets.hpp"
#include "fcil/numerics.hpp"
#include "fcil/rng.hpp"

namespace fcil {

// ---------------------------------------------------------------------------
// Parameter aggregation

struct ClientUpdate {
  ClientId client = 0;
  const ClientParams* params = nullptr;
  std::size_t num_samples = 0;
};

/// Sample-weighted mean of client parameters (adapter and head together).
/// Updates are reduced in ascending client-id order regardless of input
/// order, so the result is bitwise independent of arrival order.
ClientParams aggregate(std::span<const ClientUpdate> updates);

/// Positional form: client ids are the indices into `params`.
ClientParams aggregate(std::span<const ClientParams> params, std::span<const std::size_t> sizes);

// ---------------------------------------------------------------------------
// Hierarchical generative mixture

/// Two-level Gaussian mixture over (class, client) prototypes. Classes are
/// weighted by omega (normalized per-class sample counts), the Gaussians of
/// a class by pi (normalized per-client counts for that class).
class HierarchicalMixture {
 public:
  struct Component {
    ClassId label;
    ClientId client;
  };

  HierarchicalMixture() = default;
  HierarchicalMixture(std::span<const GenerativePrototype> prototypes, std::size_t num_classes,
                      std::size_t num_clients);

  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t num_clients() const noexcept { return num_clients_; }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return classes_.empty(); }

  const Vector& class_weights() const noexcept { return omega_; }
  const Matrix& client_weights() const noexcept { return pi_; }
  /// Classes holding at least one prototype, ascending.
  const std::vector<ClassId>& classes() const noexcept { return classes_; }
  const GenerativePrototype* prototype(ClassId c, ClientId m) const;
  const AliasTable& class_alias() const noexcept { return class_alias_; }
  const AliasTable& client_alias(ClassId c) const { return client_alias_.at(c); }

  /// Class by omega, then client by pi.
  Component draw_component(RngStream& rng) const;
  /// Client draw for a fixed class.
  ClientId draw_client(ClassId c, RngStream& rng) const;
  /// A feature from N(mean, cov_scale * diag(var)).
  void draw_feature(Component component, double cov_scale, RngStream& rng,
                    std::span<double> out) const;

  /// log density of the full mixture at x with every covariance scaled.
  double log_density(std::span<const double> x, double cov_scale = 1.0) const;
  /// log density of the class-conditional mixture.
  double class_log_density(ClassId c, std::span<const double> x, double cov_scale = 1.0) const;

 private:
  std::size_t num_classes_ = 0;
  std::size_t num_clients_ = 0;
  std::size_t dim_ = 0;
  Vector omega_;
  Matrix pi_;
  std::vector<std::optional<GenerativePrototype>> grid_;  // c * M + m
  std::vector<ClassId> classes_;
  AliasTable class_alias_;
  std::vector<AliasTable> client_alias_;
};

HierarchicalMixture build_mixture(std::span<const GenerativePrototype> prototypes,
                                  std::size_t num_classes, std::size_t num_clients);
/// Infers C and M from the largest ids present.
HierarchicalMixture build_mixture(std::span<const GenerativePrototype> prototypes);

/// Latest prototype per (class, client), kept across rounds so that classes
/// of earlier tasks stay available for rebalancing.
class PrototypeBank {
 public:
  void update(std::span<const GenerativePrototype> prototypes);
  std::vector<GenerativePrototype> all() const;
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<std::pair<ClassId, ClientId>, GenerativePrototype> entries_;
};

struct SyntheticDataset {
  FeatureDataset data;
  std::vector<ClientId> source_client;  // provenance, parallel to data rows
};

enum class SamplingMode {
  Hierarchical,   // per_class * (#classes) draws, classes multinomial under omega
  ExactPerClass,  // exactly per_class draws for each class
};

SyntheticDataset sample_synthetic(const HierarchicalMixture& mix, std::size_t per_class,
                                  double cov_scale, RngStream& rng,
                                  SamplingMode mode = SamplingMode::Hierarchical);

// ---------------------------------------------------------------------------
// Classifier rebalancing

enum class ClassFilter { All, OldOnly, CurrentOnly };

struct RebalanceOptions {
  std::size_t epochs = 5;
  std::size_t batch = 256;
  double learning_rate = 0.01;
  double momentum = 0.9;
  bool cosine = true;
  ClassFilter filter = ClassFilter::All;
};

struct RebalanceOutcome {
  LinearClassifier head;
  bool applied = false;
  std::size_t samples_used = 0;
  std::string warning;
};

/// Retrains the head with SGD on synthetic features. Cross-entropy runs over
/// every class in `seen_classes` (all classes when empty); the filter picks
/// which synthetic samples are used, relative to `current_classes`.
RebalanceOutcome rebalance(const LinearClassifier& head, const SyntheticDataset& synth,
                           const RebalanceOptions& options,
                           std::span<const ClassId> seen_classes,
                           std::span<const ClassId> current_classes, RngStream& rng);

// ---------------------------------------------------------------------------
// Divergence estimation

struct KlEstimate {
  double value = 0.0;
  double std_error = 0.0;
  std::size_t draws = 0;
};

/// Monte-Carlo KL(P || Q): mean of log p(x) - log q(x) over x ~ P, where P is
/// the mixture with covariances scaled by `cov_scale`.
KlEstimate monte_carlo_kl(const HierarchicalMixture& p,
                          const std::function<double(std::span<const double>)>& log_q,
                          std::size_t draws, RngStream& rng, double cov_scale = 1.0);

/// Debug snapshot: per-(c, m) records plus omega and pi.
nlohmann::json mixture_snapshot(const HierarchicalMixture& mix);

}  // namespace fcil
