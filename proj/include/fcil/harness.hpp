#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fcil/client.hpp"
#include "fcil/datasets.hpp"
#include "fcil/metrics.hpp"
#include "fcil/server.hpp"

namespace fcil {

inline constexpr const char* kReportVersion = "fcil-sim/1";

enum class DataSource { Synthetic, File };

/// Flat run configuration. Field names match the JSON keys.
struct RunConfig {
  DataSource source = DataSource::Synthetic;
  std::string train_file;
  std::string test_file;

  std::size_t num_classes = 10;
  std::size_t dim = 64;
  std::size_t samples_per_class = 100;
  std::size_t test_samples_per_class = 100;
  double mean_scale = 1.0;
  double class_cov_scale = 1.0;

  std::size_t tasks = 5;
  std::size_t clients = 10;
  double beta = 0.5;
  std::size_t min_samples_per_client = 1;
  std::size_t partition_retries = 100;
  std::size_t rounds_per_task = 5;
  double participation_rate = 1.0;

  std::size_t local_epochs = 5;
  std::size_t local_batch = 16;
  OptimizerSpec::Kind local_optimizer = OptimizerSpec::Kind::Adam;
  double local_lr = 0.003;
  double local_momentum = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  AdapterMode adapter = AdapterMode::None;
  LossMasking masking = LossMasking::Masked;
  double variance_floor = 1e-6;
  bool unbiased_variance = false;

  bool rebalance = true;
  std::size_t rebalance_per_class = 256;
  double rebalance_cov_scale = 3.0;
  std::size_t rebalance_epochs = 5;
  double rebalance_lr = 0.01;
  double rebalance_momentum = 0.9;
  std::size_t rebalance_batch = 256;
  bool rebalance_cosine = true;
  ClassFilter class_filter = ClassFilter::All;
  SamplingMode sampling_mode = SamplingMode::Hierarchical;

  std::uint64_t seed = 0;
  std::size_t header_bytes = 0;

  // Execution knobs; they do not affect results and are not echoed.
  std::size_t workers = 1;
  std::string out_dir;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;
};

/// Parses a flat JSON object; unknown keys and ill-typed values are
/// rejected with ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
/// Every result-affecting field with its effective value.
nlohmann::json config_to_json(const RunConfig& c);

struct ClientEntropy {
  ClientId client = 0;
  double entropy = 0.0;
};

struct RoundRecord {
  std::size_t task = 0;
  std::size_t round = 0;
  std::vector<ClientId> participants;
  std::vector<ClientId> skipped;  // selected but holding an empty shard
  std::vector<ClientEntropy> client_entropy;
  std::optional<double> client_entropy_mean;
  std::optional<double> feature_bias;
  double accuracy_pre = 0.0;  // global model on seen-class test data
  double accuracy_post = 0.0;
  double entropy_pre = 0.0;
  double entropy_post = 0.0;
  bool rebalance_applied = false;
  std::size_t synthetic_samples = 0;
  std::string rebalance_warning;
  CommRound comm;
  std::string clients_digest;  // all local models of the round, client order
  std::string digest_pre;      // global model after aggregation
  std::string digest_post;     // global model after rebalancing
};

struct RunReport {
  nlohmann::json config;
  std::uint64_t seed = 0;
  TaskSchedule schedule;
  std::vector<RoundRecord> rounds;
  AccuracyMatrix accuracy;
  double faa = 0.0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
};

nlohmann::json round_to_json(const RoundRecord& r);
nlohmann::json report_to_json(const RunReport& report);
/// Parses a report and checks that the stored FAA matches the embedded
/// accuracy matrix within 1e-12 (FormatError otherwise).
RunReport report_from_json(const nlohmann::json& j);
RunReport load_report(const std::filesystem::path& path);

struct RunOutcome {
  RunReport report;
  ClientParams global;
  nlohmann::json mixture;  // final mixture snapshot (null if never built)
};

/// Stream used by client `m` in (task, round); exposed for replay.
std::uint64_t client_stream_id(std::size_t task, std::size_t round, ClientId m);

/// Clients selected in (task, round): ceil(p M) drawn uniformly without
/// replacement, returned ascending.
std::vector<ClientId> select_participants(const RunConfig& c, std::size_t task, std::size_t round);

LocalTrainOptions local_options(const RunConfig& c);
RebalanceOptions rebalance_options(const RunConfig& c);

/// Train and test splits described by the config.
std::pair<FeatureDataset, FeatureDataset> load_datasets(const RunConfig& c);

RunOutcome run(const RunConfig& config);
RunOutcome run(const RunConfig& config, const FeatureDataset& train, const FeatureDataset& test);

/// Writes rounds.jsonl, report.json and mixture.json into `dir`.
void write_run_outputs(const RunOutcome& outcome, const std::filesystem::path& dir);

std::string fnv1a_digest(const ClientParams& p);

// ---------------------------------------------------------------------------
// Studies

struct BiasPoint {
  double beta = 0.0;
  double entropy = 0.0;   // mean client response entropy, nats
  double accuracy = 0.0;  // FAA of the run
};

struct BiasStudy {
  std::vector<BiasPoint> points;
  BiasPoint joint;  // same data with a single client
};

/// Runs the config once per beta. Entropy is the mean over rounds of the
/// mean client response entropy after local training, before aggregation.
BiasStudy run_bias_study(const RunConfig& config, const std::vector<double>& betas);
void write_bias_study(const BiasStudy& study, const std::filesystem::path& dir);

enum class AblationRow { NoCr, CrOld, CrCur, CrBoth };
inline constexpr AblationRow kAblationRows[] = {AblationRow::NoCr, AblationRow::CrOld,
                                               AblationRow::CrCur, AblationRow::CrBoth};
const char* ablation_name(AblationRow row);
RunConfig ablation_config(const RunConfig& base, AblationRow row);

struct AblationEntry {
  AblationRow row = AblationRow::NoCr;
  std::uint64_t seed = 0;
  double faa = 0.0;
};

/// The four rows, each over every seed (the config's seed when empty).
std::vector<AblationEntry> run_ablation(const RunConfig& config,
                                        const std::vector<std::uint64_t>& seeds = {});
void write_ablation(const std::vector<AblationEntry>& table, const std::filesystem::path& dir);

}  // namespace fcil
