#include "fcil/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <thread>

#include "fcil/errors.hpp"
#include "fcil/feature_io.hpp"
#include "fcil/rng.hpp"

namespace fcil {

namespace {

using nlohmann::json;

constexpr std::uint64_t kTagParticipation = 0x5041525449ull;
constexpr std::uint64_t kTagClientTrain = 0x434C49454E54ull;
constexpr std::uint64_t kTagSampling = 0x53414D504Cull;
constexpr std::uint64_t kTagRebalance = 0x5245424Cull;

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<DataSource> kSources[] = {{DataSource::Synthetic, "synthetic"},
                                             {DataSource::File, "file"}};
constexpr EnumName<OptimizerSpec::Kind> kOptimizers[] = {{OptimizerSpec::Kind::Adam, "adam"},
                                                         {OptimizerSpec::Kind::Sgd, "sgd"}};
constexpr EnumName<AdapterMode> kAdapters[] = {{AdapterMode::None, "none"},
                                               {AdapterMode::Linear, "linear"}};
constexpr EnumName<LossMasking> kMaskings[] = {{LossMasking::Masked, "masked"},
                                               {LossMasking::Unmasked, "unmasked"}};
constexpr EnumName<ClassFilter> kFilters[] = {{ClassFilter::All, "all"},
                                              {ClassFilter::OldOnly, "old"},
                                              {ClassFilter::CurrentOnly, "current"}};
constexpr EnumName<SamplingMode> kSamplingModes[] = {{SamplingMode::Hierarchical, "hierarchical"},
                                                     {SamplingMode::ExactPerClass, "exact"}};

template <typename E, std::size_t N>
const char* enum_to_string(const EnumName<E> (&table)[N], E value) {
  for (const auto& e : table) {
    if (e.value == value) return e.name;
  }
  return "?";
}

template <typename E, std::size_t N>
E enum_from_string(const EnumName<E> (&table)[N], const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  const auto s = v.get<std::string>();
  std::string allowed;
  for (const auto& e : table) {
    if (s == e.name) return e.value;
    allowed += allowed.empty() ? "" : ", ";
    allowed += e.name;
  }
  throw ConfigError("config key '" + key + "': unknown value '" + s + "' (expected one of " +
                    allowed + ")");
}

std::size_t get_count(const std::string& key, const json& v) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::size_t>();
  throw ConfigError("config key '" + key + "' must be a non-negative integer");
}

double get_real(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "' must be a number");
  return v.get<double>();
}

bool get_bool(const std::string& key, const json& v) {
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "' must be a boolean");
  return v.get<bool>();
}

std::string get_string(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "' must be a string");
  return v.get<std::string>();
}

using Setter = std::function<void(RunConfig&, const std::string&, const json&)>;

const std::map<std::string, Setter>& config_setters() {
#define FCIL_COUNT(name) {#name, [](RunConfig& c, const std::string& k, const json& v) { c.name = get_count(k, v); }}
#define FCIL_REAL(name) {#name, [](RunConfig& c, const std::string& k, const json& v) { c.name = get_real(k, v); }}
#define FCIL_BOOL(name) {#name, [](RunConfig& c, const std::string& k, const json& v) { c.name = get_bool(k, v); }}
#define FCIL_STRING(name) {#name, [](RunConfig& c, const std::string& k, const json& v) { c.name = get_string(k, v); }}
#define FCIL_ENUM(name, table) {#name, [](RunConfig& c, const std::string& k, const json& v) { c.name = enum_from_string(table, k, v); }}
  static const std::map<std::string, Setter> setters = {
      FCIL_ENUM(source, kSources),
      FCIL_STRING(train_file),
      FCIL_STRING(test_file),
      FCIL_COUNT(num_classes),
      FCIL_COUNT(dim),
      FCIL_COUNT(samples_per_class),
      FCIL_COUNT(test_samples_per_class),
      FCIL_REAL(mean_scale),
      FCIL_REAL(class_cov_scale),
      FCIL_COUNT(tasks),
      FCIL_COUNT(clients),
      FCIL_REAL(beta),
      FCIL_COUNT(min_samples_per_client),
      FCIL_COUNT(partition_retries),
      FCIL_COUNT(rounds_per_task),
      FCIL_REAL(participation_rate),
      FCIL_COUNT(local_epochs),
      FCIL_COUNT(local_batch),
      FCIL_ENUM(local_optimizer, kOptimizers),
      FCIL_REAL(local_lr),
      FCIL_REAL(local_momentum),
      FCIL_REAL(adam_beta1),
      FCIL_REAL(adam_beta2),
      FCIL_REAL(adam_eps),
      FCIL_ENUM(adapter, kAdapters),
      FCIL_ENUM(masking, kMaskings),
      FCIL_REAL(variance_floor),
      FCIL_BOOL(unbiased_variance),
      FCIL_BOOL(rebalance),
      FCIL_COUNT(rebalance_per_class),
      FCIL_REAL(rebalance_cov_scale),
      FCIL_COUNT(rebalance_epochs),
      FCIL_REAL(rebalance_lr),
      FCIL_REAL(rebalance_momentum),
      FCIL_COUNT(rebalance_batch),
      FCIL_BOOL(rebalance_cosine),
      FCIL_ENUM(class_filter, kFilters),
      FCIL_ENUM(sampling_mode, kSamplingModes),
      {"seed", [](RunConfig& c, const std::string& k, const json& v) {
         if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
           throw ConfigError("config key '" + k + "' must be a non-negative integer");
         }
         c.seed = v.get<std::uint64_t>();
       }},
      FCIL_COUNT(header_bytes),
      FCIL_COUNT(workers),
      FCIL_STRING(out_dir),
  };
#undef FCIL_COUNT
#undef FCIL_REAL
#undef FCIL_BOOL
#undef FCIL_STRING
#undef FCIL_ENUM
  return setters;
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError("invalid config: " + message);
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ull;
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  }
  void doubles(std::span<const double> v) { bytes(v.data(), v.size() * sizeof(double)); }
  void params(const ClientParams& p) {
    doubles(p.adapter.flat());
    doubles(p.head.weights.flat());
    doubles(p.head.bias);
  }
};

std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void require_finite_model(const ClientParams& p, std::size_t task, std::size_t round,
                          const char* stage) {
  if (all_finite(p.adapter.flat()) && all_finite(p.head.weights.flat()) && all_finite(p.head.bias)) {
    return;
  }
  throw NumericalError("non-finite global model " + std::string(stage) + " (task " +
                       std::to_string(task) + ", round " + std::to_string(round) + ")");
}

double response_entropy(const ClientParams& p, const FeatureDataset& eval,
                        std::span<const ClassId> active) {
  return bias_entropy(response_histogram(p, eval, active));
}

/// Trains the selected clients on a pool of `workers` threads. Results and
/// errors are indexed by position in `participants`, so the outcome does not
/// depend on scheduling.
std::vector<std::optional<LocalModel>> train_clients(const RunConfig& c, const ClientParams& global,
                                                     const std::vector<FeatureDataset>& shards,
                                                     const std::vector<ClientId>& participants,
                                                     std::size_t task, std::size_t round) {
  const LocalTrainOptions options = local_options(c);
  const std::size_t n = participants.size();
  std::vector<std::optional<LocalModel>> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t k = next.fetch_add(1); k < n; k = next.fetch_add(1)) {
      const ClientId m = participants[k];
      try {
        RngStream rng(c.seed, client_stream_id(task, round, m));
        results[k] = local_train(global, shards[m], options, rng);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(c.workers, n);
  if (threads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (!errors[k]) continue;
    const std::string where = " (task " + std::to_string(task) + ", round " +
                              std::to_string(round) + ", client " +
                              std::to_string(participants[k]) + ")";
    try {
      std::rethrow_exception(errors[k]);
    } catch (const NumericalError& e) {
      throw NumericalError(e.what() + where);
    }
  }
  return results;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> optional_from(const json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
  if (source == DataSource::File) {
    require(!train_file.empty(), "source 'file' needs train_file");
    require(!test_file.empty(), "source 'file' needs test_file");
  } else {
    require(num_classes >= 2, "num_classes must be >= 2");
    require(dim >= 1, "dim must be >= 1");
    require(samples_per_class >= 1, "samples_per_class must be >= 1");
    require(test_samples_per_class >= 1, "test_samples_per_class must be >= 1");
    require(std::isfinite(mean_scale) && mean_scale >= 0.0, "mean_scale must be >= 0");
    require(std::isfinite(class_cov_scale) && class_cov_scale > 0.0, "class_cov_scale must be > 0");
    require(tasks <= num_classes, "tasks must not exceed num_classes");
  }
  require(tasks >= 1, "tasks must be >= 1");
  require(clients >= 1, "clients must be >= 1");
  require(std::isfinite(beta) && beta > 0.0, "beta must be > 0");
  require(partition_retries >= 1, "partition_retries must be >= 1");
  require(rounds_per_task >= 1, "rounds_per_task must be >= 1");
  require(participation_rate > 0.0 && participation_rate <= 1.0,
          "participation_rate must be in (0, 1]");
  require(local_epochs >= 1, "local_epochs must be >= 1");
  require(local_batch >= 1, "local_batch must be >= 1");
  require(std::isfinite(local_lr) && local_lr >= 0.0, "local_lr must be >= 0");
  require(local_momentum >= 0.0 && local_momentum < 1.0, "local_momentum must be in [0, 1)");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must be in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must be in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be > 0");
  require(variance_floor > 0.0, "variance_floor must be > 0");
  require(rebalance_per_class >= 1, "rebalance_per_class must be >= 1");
  require(std::isfinite(rebalance_cov_scale) && rebalance_cov_scale > 0.0,
          "rebalance_cov_scale must be > 0");
  require(rebalance_epochs >= 1, "rebalance_epochs must be >= 1");
  require(std::isfinite(rebalance_lr) && rebalance_lr >= 0.0, "rebalance_lr must be >= 0");
  require(rebalance_momentum >= 0.0 && rebalance_momentum < 1.0,
          "rebalance_momentum must be in [0, 1)");
  require(rebalance_batch >= 1, "rebalance_batch must be >= 1");
  require(workers >= 1, "workers must be >= 1");
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  const auto& setters = config_setters();
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(c, key, value);
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

json config_to_json(const RunConfig& c) {
  json j;
  j["source"] = enum_to_string(kSources, c.source);
  if (c.source == DataSource::File) {
    j["train_file"] = c.train_file;
    j["test_file"] = c.test_file;
  } else {
    j["samples_per_class"] = c.samples_per_class;
    j["test_samples_per_class"] = c.test_samples_per_class;
    j["mean_scale"] = c.mean_scale;
    j["class_cov_scale"] = c.class_cov_scale;
  }
  j["num_classes"] = c.num_classes;
  j["dim"] = c.dim;
  j["tasks"] = c.tasks;
  j["clients"] = c.clients;
  j["beta"] = c.beta;
  j["min_samples_per_client"] = c.min_samples_per_client;
  j["partition_retries"] = c.partition_retries;
  j["rounds_per_task"] = c.rounds_per_task;
  j["participation_rate"] = c.participation_rate;
  j["local_epochs"] = c.local_epochs;
  j["local_batch"] = c.local_batch;
  j["local_optimizer"] = enum_to_string(kOptimizers, c.local_optimizer);
  j["local_lr"] = c.local_lr;
  j["local_momentum"] = c.local_momentum;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["adapter"] = enum_to_string(kAdapters, c.adapter);
  j["masking"] = enum_to_string(kMaskings, c.masking);
  j["variance_floor"] = c.variance_floor;
  j["unbiased_variance"] = c.unbiased_variance;
  j["rebalance"] = c.rebalance;
  j["rebalance_per_class"] = c.rebalance_per_class;
  j["rebalance_cov_scale"] = c.rebalance_cov_scale;
  j["rebalance_epochs"] = c.rebalance_epochs;
  j["rebalance_lr"] = c.rebalance_lr;
  j["rebalance_momentum"] = c.rebalance_momentum;
  j["rebalance_batch"] = c.rebalance_batch;
  j["rebalance_cosine"] = c.rebalance_cosine;
  j["class_filter"] = enum_to_string(kFilters, c.class_filter);
  j["sampling_mode"] = enum_to_string(kSamplingModes, c.sampling_mode);
  j["seed"] = c.seed;
  j["header_bytes"] = c.header_bytes;
  return j;
}

// ---------------------------------------------------------------------------
// Protocol pieces

std::uint64_t client_stream_id(std::size_t task, std::size_t round, ClientId m) {
  return stream_id({kTagClientTrain, task, round, m});
}

std::vector<ClientId> select_participants(const RunConfig& c, std::size_t task, std::size_t round) {
  const double target = c.participation_rate * static_cast<double>(c.clients);
  // Guard against products like 0.3 * 10 = 3.0000000000000004.
  auto k = static_cast<std::size_t>(std::ceil(target - 1e-9));
  k = std::clamp<std::size_t>(k, 1, c.clients);

  std::vector<ClientId> ids(c.clients);
  for (ClientId m = 0; m < c.clients; ++m) ids[m] = m;
  RngStream rng(c.seed, stream_id({kTagParticipation, task, round}));
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[i + rng.below(c.clients - i)]);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

LocalTrainOptions local_options(const RunConfig& c) {
  LocalTrainOptions o;
  o.epochs = c.local_epochs;
  o.batch = c.local_batch;
  o.masking = c.masking;
  o.optimizer.kind = c.local_optimizer;
  o.optimizer.learning_rate = c.local_lr;
  o.optimizer.momentum = c.local_momentum;
  o.optimizer.beta1 = c.adam_beta1;
  o.optimizer.beta2 = c.adam_beta2;
  o.optimizer.epsilon = c.adam_eps;
  return o;
}

RebalanceOptions rebalance_options(const RunConfig& c) {
  RebalanceOptions o;
  o.epochs = c.rebalance_epochs;
  o.batch = c.rebalance_batch;
  o.learning_rate = c.rebalance_lr;
  o.momentum = c.rebalance_momentum;
  o.cosine = c.rebalance_cosine;
  o.filter = c.class_filter;
  return o;
}

std::pair<FeatureDataset, FeatureDataset> load_datasets(const RunConfig& c) {
  if (c.source == DataSource::File) {
    FeatureDataset train = read_features(c.train_file);
    FeatureDataset test = read_features(c.test_file);
    if (train.dim != test.dim || train.num_classes != test.num_classes) {
      throw ConfigError("train and test feature files disagree on dim or class count");
    }
    return {std::move(train), std::move(test)};
  }
  SyntheticSpec spec;
  spec.num_classes = c.num_classes;
  spec.dim = c.dim;
  spec.mean_scale = c.mean_scale;
  spec.cov_scale = c.class_cov_scale;
  spec.samples_per_class = c.samples_per_class;
  spec.seed = c.seed;
  FeatureDataset train = synth_generate(spec, Split::Train);
  spec.samples_per_class = c.test_samples_per_class;
  FeatureDataset test = synth_generate(spec, Split::Test);
  return {std::move(train), std::move(test)};
}

std::string fnv1a_digest(const ClientParams& p) {
  Fnv f;
  f.params(p);
  return hex64(f.h);
}

// ---------------------------------------------------------------------------
// The protocol loop

RunOutcome run(const RunConfig& config) {
  config.validate();
  const auto [train, test] = load_datasets(config);
  return run(config, train, test);
}

RunOutcome run(const RunConfig& config_in, const FeatureDataset& train, const FeatureDataset& test) {
  RunConfig config = config_in;
  config.num_classes = train.num_classes;
  config.dim = train.dim;
  config.validate();
  train.validate();
  test.validate();
  if (test.dim != train.dim || test.num_classes != train.num_classes) {
    throw ConfigError("train and test splits disagree on dim or class count");
  }
  if (config.tasks > config.num_classes) throw ConfigError("invalid config: tasks exceed classes");

  const std::size_t num_classes = config.num_classes;
  const std::size_t dim = config.dim;
  const std::size_t num_clients = config.clients;

  RunOutcome outcome;
  RunReport& report = outcome.report;
  report.config = config_to_json(config);
  report.seed = config.seed;
  report.schedule = schedule_tasks(num_classes, config.tasks, config.seed);
  report.accuracy = AccuracyMatrix(config.tasks);

  std::vector<FeatureDataset> task_tests;
  for (const auto& classes : report.schedule.tasks) {
    task_tests.push_back(test.filter_classes(classes));
    if (task_tests.back().empty()) throw ConfigError("test split has no samples for some task");
  }

  ClientParams global = ClientParams::init(num_classes, dim, config.adapter);
  PrototypeBank bank;
  CommLedger ledger;
  const PartitionSpec partition{num_clients, config.beta, config.seed,
                                config.min_samples_per_client, config.partition_retries};
  const PrototypeOptions proto_options{config.variance_floor, config.unbiased_variance};
  const RebalanceOptions rebalance_opts = rebalance_options(config);

  for (std::size_t t = 0; t < config.tasks; ++t) {
    const auto& current = report.schedule.tasks[t];
    const auto seen = report.schedule.seen_through(t);
    const auto shards = dirichlet_partition(train, current, partition, t);
    const FeatureDataset test_seen = test.filter_classes(seen);

    for (std::size_t r = 0; r < config.rounds_per_task; ++r) {
      RoundRecord rec;
      rec.task = t;
      rec.round = r;
      rec.participants = select_participants(config, t, r);

      const auto local = train_clients(config, global, shards, rec.participants, t, r);

      std::vector<ClientUpdate> updates;
      std::vector<CommEntry> entries;
      std::vector<GenerativePrototype> round_protos;
      Fnv clients_hash;
      double entropy_sum = 0.0;
      for (std::size_t k = 0; k < rec.participants.size(); ++k) {
        const ClientId m = rec.participants[k];
        clients_hash.bytes(&m, sizeof m);
        if (!local[k]) {
          rec.skipped.push_back(m);
          continue;
        }
        const LocalModel& model = *local[k];
        clients_hash.params(model.params);

        const double h = response_entropy(model.params, test_seen, model.active_classes);
        rec.client_entropy.push_back({m, h});
        entropy_sum += h;

        FeatureDataset adapted = shards[m];
        adapted.features = model.params.transform(shards[m].features);
        auto protos = compute_prototypes(adapted, m, proto_options);
        entries.push_back(comm_cost(model.params.adapter_size(), model.params.head_size(),
                                    protos.size(), dim, config.header_bytes));
        round_protos.insert(round_protos.end(), protos.begin(), protos.end());
        updates.push_back({m, &model.params, shards[m].size()});
      }
      rec.clients_digest = hex64(clients_hash.h);
      if (!rec.client_entropy.empty()) {
        rec.client_entropy_mean = entropy_sum / static_cast<double>(rec.client_entropy.size());
      }
      rec.feature_bias = feature_bias(round_protos);

      if (!updates.empty()) global = aggregate(updates);
      require_finite_model(global, t, r, "after aggregation");
      rec.digest_pre = fnv1a_digest(global);
      rec.accuracy_pre = accuracy(global, test_seen, seen);
      rec.entropy_pre = response_entropy(global, test_seen, seen);

      bank.update(round_protos);
      if (bank.size() > 0) {
        const HierarchicalMixture mix = build_mixture(bank.all(), num_classes, num_clients);
        outcome.mixture = mixture_snapshot(mix);
        if (config.rebalance) {
          RngStream sample_rng(config.seed, stream_id({kTagSampling, t, r}));
          const SyntheticDataset synth = sample_synthetic(
              mix, config.rebalance_per_class, config.rebalance_cov_scale, sample_rng,
              config.sampling_mode);
          RngStream rebalance_rng(config.seed, stream_id({kTagRebalance, t, r}));
          RebalanceOutcome out;
          try {
            out = rebalance(global.head, synth, rebalance_opts, seen, current, rebalance_rng);
          } catch (const NumericalError& e) {
            throw NumericalError(e.what() + (" (task " + std::to_string(t) + ", round " +
                                             std::to_string(r) + ", rebalancing)"));
          }
          rec.synthetic_samples = synth.data.size();
          rec.rebalance_applied = out.applied;
          rec.rebalance_warning = out.warning;
          global.head = std::move(out.head);
          require_finite_model(global, t, r, "after rebalancing");
        }
      }
      rec.digest_post = fnv1a_digest(global);
      rec.accuracy_post = accuracy(global, test_seen, seen);
      rec.entropy_post = response_entropy(global, test_seen, seen);

      ledger.record(t, r, entries, round_protos.size());
      rec.comm = ledger.rounds().back();
      report.rounds.push_back(std::move(rec));
    }

    for (std::size_t i = 0; i <= t; ++i) {
      report.accuracy.set(i, t, accuracy(global, task_tests[i], seen));
    }
  }

  report.faa = faa(report.accuracy);
  report.uplink_bytes = ledger.total_uplink();
  report.downlink_bytes = ledger.total_downlink();
  outcome.global = std::move(global);
  return outcome;
}

// ---------------------------------------------------------------------------
// Reports

json round_to_json(const RoundRecord& r) {
  json entropies = json::array();
  for (const auto& e : r.client_entropy) entropies.push_back({{"client", e.client}, {"entropy", e.entropy}});
  return {
      {"task", r.task},
      {"round", r.round},
      {"participants", r.participants},
      {"skipped", r.skipped},
      {"client_entropy", entropies},
      {"client_entropy_mean", optional_json(r.client_entropy_mean)},
      {"feature_bias", optional_json(r.feature_bias)},
      {"accuracy_pre", r.accuracy_pre},
      {"accuracy_post", r.accuracy_post},
      {"entropy_pre", r.entropy_pre},
      {"entropy_post", r.entropy_post},
      {"rebalance_applied", r.rebalance_applied},
      {"synthetic_samples", r.synthetic_samples},
      {"rebalance_warning", r.rebalance_warning},
      {"comm",
       {{"clients", r.comm.clients},
        {"prototypes", r.comm.prototypes},
        {"uplink_bytes", r.comm.uplink_bytes},
        {"downlink_bytes", r.comm.downlink_bytes},
        {"per_client_bytes", r.comm.per_client_bytes()}}},
      {"clients_digest", r.clients_digest},
      {"digest_pre", r.digest_pre},
      {"digest_post", r.digest_post},
  };
}

json report_to_json(const RunReport& report) {
  json rounds = json::array();
  for (const auto& r : report.rounds) rounds.push_back(round_to_json(r));
  json matrix = json::array();
  for (std::size_t i = 0; i < report.accuracy.num_tasks(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < report.accuracy.num_tasks(); ++j) {
      row.push_back(optional_json(report.accuracy.get(i, j)));
    }
    matrix.push_back(row);
  }
  return {
      {"version", kReportVersion},
      {"seed", report.seed},
      {"entropy_unit", "nats"},
      {"config", report.config},
      {"schedule", report.schedule.tasks},
      {"rounds", rounds},
      {"accuracy_matrix", matrix},
      {"faa", report.faa},
      {"comm", {{"uplink_bytes", report.uplink_bytes}, {"downlink_bytes", report.downlink_bytes}}},
  };
}

RunReport report_from_json(const json& j) {
  RunReport report;
  try {
    if (j.at("version").get<std::string>() != kReportVersion) {
      throw InputError("unsupported report version '" + j.at("version").get<std::string>() + "'");
    }
    report.seed = j.at("seed").get<std::uint64_t>();
    report.config = j.at("config");
    report.schedule.tasks = j.at("schedule").get<std::vector<std::vector<ClassId>>>();
    for (const auto& jr : j.at("rounds")) {
      RoundRecord r;
      r.task = jr.at("task").get<std::size_t>();
      r.round = jr.at("round").get<std::size_t>();
      r.participants = jr.at("participants").get<std::vector<ClientId>>();
      r.skipped = jr.at("skipped").get<std::vector<ClientId>>();
      for (const auto& e : jr.at("client_entropy")) {
        r.client_entropy.push_back({e.at("client").get<ClientId>(), e.at("entropy").get<double>()});
      }
      r.client_entropy_mean = optional_from(jr.at("client_entropy_mean"));
      r.feature_bias = optional_from(jr.at("feature_bias"));
      r.accuracy_pre = jr.at("accuracy_pre").get<double>();
      r.accuracy_post = jr.at("accuracy_post").get<double>();
      r.entropy_pre = jr.at("entropy_pre").get<double>();
      r.entropy_post = jr.at("entropy_post").get<double>();
      r.rebalance_applied = jr.at("rebalance_applied").get<bool>();
      r.synthetic_samples = jr.at("synthetic_samples").get<std::size_t>();
      r.rebalance_warning = jr.at("rebalance_warning").get<std::string>();
      const auto& jc = jr.at("comm");
      r.comm = {r.task,
                r.round,
                jc.at("clients").get<std::size_t>(),
                jc.at("prototypes").get<std::size_t>(),
                jc.at("uplink_bytes").get<std::uint64_t>(),
                jc.at("downlink_bytes").get<std::uint64_t>()};
      r.clients_digest = jr.at("clients_digest").get<std::string>();
      r.digest_pre = jr.at("digest_pre").get<std::string>();
      r.digest_post = jr.at("digest_post").get<std::string>();
      report.rounds.push_back(std::move(r));
    }
    const auto& matrix = j.at("accuracy_matrix");
    report.accuracy = AccuracyMatrix(matrix.size());
    for (std::size_t i = 0; i < matrix.size(); ++i) {
      if (matrix[i].size() != matrix.size()) throw InputError("accuracy_matrix is not square");
      for (std::size_t k = 0; k < matrix.size(); ++k) {
        if (!matrix[i][k].is_null()) report.accuracy.set(i, k, matrix[i][k].get<double>());
      }
    }
    report.faa = j.at("faa").get<double>();
    report.uplink_bytes = j.at("comm").at("uplink_bytes").get<std::uint64_t>();
    report.downlink_bytes = j.at("comm").at("downlink_bytes").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed report: ") + e.what());
  }
  const double recomputed = faa(report.accuracy);
  if (!(std::abs(recomputed - report.faa) <= 1e-12)) {
    throw InputError("report FAA " + format_real(report.faa) +
                     " does not match its accuracy matrix (" + format_real(recomputed) + ")");
  }
  return report;
}

RunReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open report '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError("report '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return report_from_json(j);
}

void write_run_outputs(const RunOutcome& outcome, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string lines;
  for (const auto& r : outcome.report.rounds) lines += round_to_json(r).dump() + "\n";
  write_text(dir / "rounds.jsonl", lines);
  write_text(dir / "report.json", report_to_json(outcome.report).dump(2) + "\n");
  write_text(dir / "mixture.json", outcome.mixture.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Studies

namespace {

BiasPoint bias_point(const RunConfig& c, const FeatureDataset& train, const FeatureDataset& test) {
  const RunOutcome out = run(c, train, test);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : out.report.rounds) {
    if (!r.client_entropy_mean) continue;
    sum += *r.client_entropy_mean;
    ++n;
  }
  if (n == 0) throw NumericalError("bias study: no client finished local training");
  return {c.beta, sum / static_cast<double>(n), out.report.faa};
}

}  // namespace

BiasStudy run_bias_study(const RunConfig& config, const std::vector<double>& betas) {
  if (betas.empty()) throw ConfigError("bias study needs at least one beta");
  config.validate();
  const auto [train, test] = load_datasets(config);
  BiasStudy study;
  for (double b : betas) {
    RunConfig c = config;
    c.beta = b;
    c.validate();
    study.points.push_back(bias_point(c, train, test));
  }
  RunConfig joint = config;
  joint.clients = 1;
  joint.participation_rate = 1.0;
  study.joint = bias_point(joint, train, test);
  return study;
}

void write_bias_study(const BiasStudy& study, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string csv = "beta,entropy_nats,accuracy\n";
  json points = json::array();
  for (const auto& p : study.points) {
    csv += format_real(p.beta) + "," + format_real(p.entropy) + "," + format_real(p.accuracy) + "\n";
    points.push_back({{"beta", p.beta}, {"entropy", p.entropy}, {"accuracy", p.accuracy}});
  }
  write_text(dir / "entropy_vs_beta.csv", csv);
  const json j = {{"version", kReportVersion},
                  {"entropy_unit", "nats"},
                  {"points", points},
                  {"joint", {{"entropy", study.joint.entropy}, {"accuracy", study.joint.accuracy}}}};
  write_text(dir / "bias_study.json", j.dump(2) + "\n");
}

const char* ablation_name(AblationRow row) {
  switch (row) {
    case AblationRow::NoCr: return "no-CR";
    case AblationRow::CrOld: return "CR_old";
    case AblationRow::CrCur: return "CR_cur";
    case AblationRow::CrBoth: return "CR_both";
  }
  return "?";
}

RunConfig ablation_config(const RunConfig& base, AblationRow row) {
  RunConfig c = base;
  c.rebalance = row != AblationRow::NoCr;
  switch (row) {
    case AblationRow::NoCr:
    case AblationRow::CrBoth: c.class_filter = ClassFilter::All; break;
    case AblationRow::CrOld: c.class_filter = ClassFilter::OldOnly; break;
    case AblationRow::CrCur: c.class_filter = ClassFilter::CurrentOnly; break;
  }
  return c;
}

std::vector<AblationEntry> run_ablation(const RunConfig& config,
                                        const std::vector<std::uint64_t>& seeds_in) {
  config.validate();
  const std::vector<std::uint64_t> seeds =
      seeds_in.empty() ? std::vector<std::uint64_t>{config.seed} : seeds_in;
  std::vector<AblationEntry> table;
  for (std::uint64_t seed : seeds) {
    RunConfig seeded = config;
    seeded.seed = seed;
    const auto [train, test] = load_datasets(seeded);
    for (AblationRow row : kAblationRows) {
      table.push_back({row, seed, run(ablation_config(seeded, row), train, test).report.faa});
    }
  }
  return table;
}

void write_ablation(const std::vector<AblationEntry>& table, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string csv = "variant,seed,faa\n";
  for (const auto& e : table) {
    csv += std::string(ablation_name(e.row)) + "," + std::to_string(e.seed) + "," +
           format_real(e.faa) + "\n";
  }
  write_text(dir / "faa_table.csv", csv);
}

}  // namespace fcil
