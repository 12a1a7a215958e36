// fcil-sim: command-line front end of the simulator.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fcil/errors.hpp"
#include "fcil/feature_io.hpp"
#include "fcil/harness.hpp"

namespace {

using namespace fcil;

std::vector<double> parse_betas(const std::string& text) {
  std::vector<double> betas;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double b = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      betas.push_back(b);
    } catch (const std::logic_error&) {
      throw ConfigError("--betas: '" + item + "' is not a number");
    }
  }
  if (betas.empty()) throw ConfigError("--betas: no values given");
  return betas;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      seeds.push_back(std::stoull(item));
    } catch (const std::logic_error&) {
      throw ConfigError("--seeds: '" + item + "' is not an integer");
    }
  }
  return seeds;
}

SyntheticSpec load_synthetic_spec(const std::string& path, std::size_t& test_samples) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open spec '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("spec '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("spec must be a JSON object");
  SyntheticSpec spec;
  test_samples = 0;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "num_classes") spec.num_classes = v.get<std::size_t>();
      else if (key == "dim") spec.dim = v.get<std::size_t>();
      else if (key == "mean_scale") spec.mean_scale = v.get<double>();
      else if (key == "cov_scale") spec.cov_scale = v.get<double>();
      else if (key == "samples_per_class") spec.samples_per_class = v.get<std::size_t>();
      else if (key == "test_samples_per_class") test_samples = v.get<std::size_t>();
      else if (key == "seed") spec.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown spec key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("spec: ") + e.what());
  }
  try {
    spec.validate();
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  return spec;
}

void print_report(const RunReport& report) {
  std::printf("version      %s\n", kReportVersion);
  std::printf("seed         %llu\n", static_cast<unsigned long long>(report.seed));
  std::printf("tasks        %zu\n", report.accuracy.num_tasks());
  std::printf("FAA          %.4f\n", report.faa);
  std::printf("uplink       %llu bytes\n", static_cast<unsigned long long>(report.uplink_bytes));
  std::printf("downlink     %llu bytes\n", static_cast<unsigned long long>(report.downlink_bytes));
  std::printf("\nentropy traces (nats)\n");
  std::printf("%4s %5s %10s %10s %10s %9s %9s\n", "task", "round", "clients", "global_pre",
              "global_post", "acc_pre", "acc_post");
  for (const auto& r : report.rounds) {
    char client[32] = "-";
    if (r.client_entropy_mean) std::snprintf(client, sizeof client, "%.4f", *r.client_entropy_mean);
    std::printf("%4zu %5zu %10s %10.4f %11.4f %9.4f %9.4f\n", r.task, r.round, client,
                r.entropy_pre, r.entropy_post, r.accuracy_pre, r.accuracy_post);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated class-incremental learning simulator with hierarchical generative prototypes"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::string betas_text = "0.5,0.1,0.05";
  std::string seeds_text;
  std::string spec_path;
  std::string test_out;
  std::string report_path;
  std::size_t workers = 0;

  auto* run_cmd = app.add_subcommand("run", "Run the federated protocol once");
  run_cmd->add_option("--config", config_path, "Run config (JSON)")->required();
  auto* seed_opt = run_cmd->add_option("--seed", seed, "Override the master seed");
  run_cmd->add_option("--out", out_dir, "Output directory");
  run_cmd->add_option("--workers", workers, "Client worker threads");

  auto* bias_cmd = app.add_subcommand("bias-study", "Client response entropy across betas");
  bias_cmd->add_option("--config", config_path, "Run config (JSON)")->required();
  bias_cmd->add_option("--betas", betas_text, "Comma-separated Dirichlet concentrations");
  bias_cmd->add_option("--out", out_dir, "Output directory");

  auto* ablation_cmd = app.add_subcommand("ablation", "Classifier-rebalancing ablation table");
  ablation_cmd->add_option("--config", config_path, "Run config (JSON)")->required();
  ablation_cmd->add_option("--seeds", seeds_text, "Comma-separated seeds (default: config seed)");
  ablation_cmd->add_option("--out", out_dir, "Output directory");

  auto* gen_cmd = app.add_subcommand("gen-features", "Write synthetic features to a binary file");
  gen_cmd->add_option("--spec", spec_path, "Synthetic spec (JSON)")->required();
  gen_cmd->add_option("--out", out_dir, "Train feature file")->required();
  gen_cmd->add_option("--test-out", test_out, "Test feature file");

  auto* inspect_cmd = app.add_subcommand("inspect", "Summarize a report");
  inspect_cmd->add_option("--report", report_path, "report.json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      RunConfig config = load_config(config_path);
      if (*seed_opt) config.seed = seed;
      if (workers > 0) config.workers = workers;
      if (!out_dir.empty()) config.out_dir = out_dir;
      if (config.out_dir.empty()) config.out_dir = "fcil-out";
      const RunOutcome outcome = run(config);
      write_run_outputs(outcome, config.out_dir);
      std::printf("FAA %.4f  (report: %s/report.json)\n", outcome.report.faa, config.out_dir.c_str());
    } else if (bias_cmd->parsed()) {
      RunConfig config = load_config(config_path);
      const std::string dir = !out_dir.empty() ? out_dir : (config.out_dir.empty() ? "fcil-out" : config.out_dir);
      const BiasStudy study = run_bias_study(config, parse_betas(betas_text));
      write_bias_study(study, dir);
      std::printf("%10s %14s %10s\n", "beta", "entropy_nats", "accuracy");
      for (const auto& p : study.points) std::printf("%10g %14.4f %10.4f\n", p.beta, p.entropy, p.accuracy);
      std::printf("%10s %14.4f %10.4f\n", "joint", study.joint.entropy, study.joint.accuracy);
    } else if (ablation_cmd->parsed()) {
      RunConfig config = load_config(config_path);
      const std::string dir = !out_dir.empty() ? out_dir : (config.out_dir.empty() ? "fcil-out" : config.out_dir);
      const auto table = run_ablation(config, parse_seeds(seeds_text));
      write_ablation(table, dir);
      for (const auto& e : table) {
        std::printf("%-8s seed %-6llu FAA %.4f\n", ablation_name(e.row),
                    static_cast<unsigned long long>(e.seed), e.faa);
      }
    } else if (gen_cmd->parsed()) {
      std::size_t test_samples = 0;
      SyntheticSpec spec = load_synthetic_spec(spec_path, test_samples);
      write_features(synth_generate(spec, Split::Train), out_dir);
      if (!test_out.empty()) {
        if (test_samples > 0) spec.samples_per_class = test_samples;
        write_features(synth_generate(spec, Split::Test), test_out);
      }
    } else if (inspect_cmd->parsed()) {
      print_report(load_report(report_path));
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const PartitionInfeasible& e) {
    std::fprintf(stderr, "partition infeasible: %s\n", e.what());
    return kExitPartition;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitOk;
}
