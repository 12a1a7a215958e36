// Acceptance suite: one line per criterion, nonzero exit if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "fcil/harness.hpp"
#include "fcil/metrics.hpp"
#include "fcil/server.hpp"
#include "oracles.hpp"

using namespace fcil;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t hardware_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

// The synthetic benchmark: 10 classes, 64 dims, 5 tasks, 10 clients, beta 0.05.
// Class means are drawn close together so that the task is not trivially
// separable and client bias shows up in the predictions.
RunConfig benchmark(std::uint64_t seed) {
  RunConfig c;
  c.num_classes = 10;
  c.dim = 64;
  c.mean_scale = 0.2;
  c.samples_per_class = 100;
  c.test_samples_per_class = 100;
  c.tasks = 5;
  c.clients = 10;
  c.beta = 0.05;
  c.min_samples_per_client = 0;
  c.seed = seed;
  c.workers = hardware_workers();
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict gradient_correctness() {
  std::mt19937_64 gen(1);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + gen() % 8;
    const std::size_t cols = 2 + gen() % 15;
    const Matrix logits = oracle::random_matrix(gen, rows, cols, 3.0);
    std::vector<std::size_t> labels(rows);
    for (auto& l : labels) l = gen() % cols;
    const SoftmaxCe ce = softmax_ce(logits, labels);
    const Matrix num = oracle::ce_numeric_grad(logits, labels);
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double a = ce.grad.flat()[i];
      const double n = num.flat()[i];
      worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8}));
    }
  }
  return {worst < 1e-4, fmt("max relative error %.3g over 100 instances", worst)};
}

Verdict aggregation_oracle() {
  std::mt19937_64 gen(2);
  std::uniform_int_distribution<std::size_t> clients(1, 12), size(1, 5000), dim(1, 6);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = clients(gen), c = 2 + gen() % 5, d = dim(gen);
    const bool adapter = gen() % 2;
    std::vector<ClientParams> ps;
    std::vector<std::size_t> sizes;
    std::vector<std::vector<double>> flat;
    for (std::size_t k = 0; k < m; ++k) {
      ClientParams p = ClientParams::init(c, d, adapter ? AdapterMode::Linear : AdapterMode::None);
      p.head.weights = oracle::random_matrix(gen, c, d, 10.0);
      const Matrix bias = oracle::random_matrix(gen, 1, c);
      p.head.bias.assign(bias.flat().begin(), bias.flat().end());
      if (adapter) p.adapter = oracle::random_matrix(gen, d, d);
      std::vector<double> v(p.adapter.flat().begin(), p.adapter.flat().end());
      v.insert(v.end(), p.head.weights.flat().begin(), p.head.weights.flat().end());
      v.insert(v.end(), p.head.bias.begin(), p.head.bias.end());
      flat.push_back(std::move(v));
      ps.push_back(std::move(p));
      sizes.push_back(size(gen));
    }
    const auto expected = oracle::weighted_mean(flat, sizes);
    const ClientParams got = aggregate(ps, sizes);
    std::vector<double> g(got.adapter.flat().begin(), got.adapter.flat().end());
    g.insert(g.end(), got.head.weights.flat().begin(), got.head.weights.flat().end());
    g.insert(g.end(), got.head.bias.begin(), got.head.bias.end());
    for (std::size_t i = 0; i < g.size(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(g[i] - expected[i])));
    }
  }
  return {worst <= 1e-12, fmt("max abs deviation %.3g over 1000 cases", worst)};
}

Verdict sampler_correctness() {
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t draws = 1000000;
  double min_p = 1.0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + gen() % 63;
    std::vector<double> w(n);
    for (auto& x : w) x = u(gen) < 0.1 ? 0.0 : u(gen);
    w[gen() % n] += 0.5;
    const AliasTable table(w);
    double total = 0.0;
    for (double x : w) total += x;
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = w[i] / total;
    RngStream rng(3, static_cast<std::uint64_t>(trial));
    std::vector<std::size_t> counts(n, 0);
    for (std::size_t i = 0; i < draws; ++i) ++counts[table.sample(rng)];
    min_p = std::min(min_p, oracle::chi_square_p(counts, p));
  }

  std::vector<GenerativePrototype> protos;
  std::uniform_int_distribution<std::size_t> count(1, 200);
  const std::size_t classes = 8, clients = 6;
  for (ClassId c = 0; c < classes; ++c) {
    for (ClientId m = 0; m < clients; ++m) {
      if (m == c % clients || u(gen) < 0.5) protos.push_back({m, c, {0.0}, {1.0}, count(gen)});
    }
  }
  const HierarchicalMixture mix = build_mixture(protos, classes, clients);
  std::vector<double> joint(classes * clients, 0.0);
  for (ClassId c = 0; c < classes; ++c) {
    for (ClientId m = 0; m < clients; ++m) {
      joint[c * clients + m] = mix.class_weights()[c] * mix.client_weights()(c, m);
    }
  }
  RngStream rng(3, 99);
  std::vector<std::size_t> counts(classes * clients, 0);
  for (std::size_t i = 0; i < draws; ++i) {
    const auto comp = mix.draw_component(rng);
    ++counts[comp.label * clients + comp.client];
  }
  const double joint_p = oracle::chi_square_p(counts, joint);
  return {min_p > 0.001 && joint_p > 0.001,
          fmt("alias min p=%.4f over 10 tables, joint (c,m) p=%.4f, 1e6 draws each", min_p, joint_p)};
}

Verdict mixture_optimality() {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.dim = 4;
  spec.samples_per_class = 200;
  spec.seed = 4;
  const FeatureDataset ds = synth_generate(spec);
  const std::vector<ClassId> all{0, 1, 2, 3};
  const auto shards = dirichlet_partition(ds, all, {4, 0.5, 4, 0, 100}, 0);
  std::vector<GenerativePrototype> protos;
  for (ClientId m = 0; m < shards.size(); ++m) {
    const auto ps = compute_prototypes(shards[m], m);
    protos.insert(protos.end(), ps.begin(), ps.end());
  }
  const HierarchicalMixture g = build_mixture(protos, 4, 4);
  const std::size_t draws = 100000;

  RngStream rng(4, 0);
  const KlEstimate self = monte_carlo_kl(
      g, [&](std::span<const double> x) { return oracle::flat_mixture_log_density(protos, x); }, draws, rng);

  double worst_z = INFINITY;
  for (std::size_t k = 0; k < protos.size(); ++k) {
    auto shifted = protos;
    shifted[k].mean[0] += 5.0 * std::sqrt(shifted[k].var_diag[0]);
    const HierarchicalMixture q = build_mixture(shifted, 4, 4);
    RngStream r(4, 1 + k);
    const KlEstimate kl = monte_carlo_kl(g, [&](std::span<const double> x) { return q.log_density(x); }, draws, r);
    worst_z = std::min(worst_z, kl.value > 0.0 ? kl.value / kl.std_error : -1.0);
  }
  return {std::abs(self.value) <= 0.01 && worst_z > 3.0,
          fmt("KL(G||G)=%.2g nats; %zu single-prototype +5 sigma shifts, min KL/SE=%.1f", self.value,
              protos.size(), worst_z)};
}

Verdict rebalancing_efficacy() {
  const std::size_t seeds = 5;
  std::size_t wins = 0;
  std::vector<double> client_h, post_h, pre_h;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const RunConfig c = benchmark(seed);
    const auto [train, test] = load_datasets(c);
    const RunReport hgp = run(c, train, test).report;
    const RunReport plain = run(ablation_config(c, AblationRow::NoCr), train, test).report;
    wins += hgp.faa > plain.faa;
    client_h.resize(hgp.rounds.size(), 0.0);
    post_h.resize(hgp.rounds.size(), 0.0);
    pre_h.resize(hgp.rounds.size(), 0.0);
    for (std::size_t i = 0; i < hgp.rounds.size(); ++i) {
      client_h[i] += hgp.rounds[i].client_entropy_mean.value_or(0.0) / seeds;
      post_h[i] += hgp.rounds[i].entropy_post / seeds;
      pre_h[i] += hgp.rounds[i].entropy_pre / seeds;
    }
  }
  std::size_t rounds_up = 0, global_up = 0;
  for (std::size_t i = 0; i < post_h.size(); ++i) {
    rounds_up += post_h[i] > client_h[i];
    global_up += post_h[i] > pre_h[i];
  }
  return {wins >= 4 && rounds_up == post_h.size(),
          fmt("HGP beats no-rebalance on %zu/5 seeds; rebalanced entropy above client entropy in "
              "%zu/%zu rounds (above aggregated-model entropy in %zu/%zu)",
              wins, rounds_up, post_h.size(), global_up, post_h.size())};
}

Verdict ablation_ordering() {
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  RunConfig c = benchmark(0);
  const auto table = run_ablation(c, seeds);
  std::size_t holds = 0;
  std::string faas;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    double f[4];
    for (const auto& e : table) {
      if (e.seed == seeds[s]) f[static_cast<int>(e.row)] = e.faa;
    }
    const double best_single = std::max(f[1], f[2]);
    holds += f[0] <= best_single && best_single <= f[3];
    faas += fmt(" [%.3f %.3f %.3f %.3f]", f[0], f[1], f[2], f[3]);
  }
  return {holds * 2 > seeds.size(), fmt("ordering holds on %zu/5 seeds; FAA no-CR/old/cur/both:", holds) + faas};
}

Verdict bias_trend() {
  const std::vector<double> betas{0.5, 0.1, 0.05};
  const std::size_t seeds = 10;
  std::size_t entropy_ok = 0, accuracy_ok = 0;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    RunConfig c = benchmark(seed);
    c.rebalance = false;
    const BiasStudy s = run_bias_study(c, betas);
    bool h = true, a = true;
    for (std::size_t i = 1; i < s.points.size(); ++i) {
      h = h && s.points[i].entropy <= s.points[i - 1].entropy;
      a = a && s.points[i].accuracy <= s.points[i - 1].accuracy;
    }
    entropy_ok += h;
    accuracy_ok += a;
  }
  return {entropy_ok * 2 > seeds && accuracy_ok * 2 > seeds,
          fmt("entropy non-increasing on %zu/10 seeds, accuracy non-increasing on %zu/10", entropy_ok,
              accuracy_ok)};
}

Verdict determinism() {
  const auto root = std::filesystem::temp_directory_path() / "fcil_acceptance_determinism";
  std::filesystem::remove_all(root);
  RunConfig c = benchmark(7);
  const std::size_t workers[] = {1, 1, 8};
  for (std::size_t i = 0; i < 3; ++i) {
    c.workers = workers[i];
    write_run_outputs(run(c), root / std::to_string(i));
  }
  bool same = true;
  std::size_t bytes = 0;
  for (const char* f : {"report.json", "rounds.jsonl", "mixture.json"}) {
    const std::string ref = slurp(root / "0" / f);
    bytes += ref.size();
    same = same && !ref.empty() && ref == slurp(root / "1" / f) && ref == slurp(root / "2" / f);
  }
  std::filesystem::remove_all(root);
  return {same, fmt("3 runs (workers 1, 1, 8): %zu report bytes %s", bytes, same ? "identical" : "DIFFER")};
}

Verdict communication_accounting() {
  RunConfig c;
  c.num_classes = 6;
  c.dim = 8;
  c.samples_per_class = 30;
  c.test_samples_per_class = 10;
  c.tasks = 3;
  c.clients = 5;
  c.beta = 0.1;
  c.min_samples_per_client = 0;
  c.participation_rate = 0.6;
  c.rounds_per_task = 2;
  c.local_epochs = 1;
  c.adapter = AdapterMode::Linear;
  c.seed = 9;
  const auto [train, test] = load_datasets(c);
  const RunReport report = run(c, train, test).report;

  // Independent recount from the partition and the participant draws.
  const std::uint64_t d = c.dim;
  const std::uint64_t model = d * d + c.num_classes * d + c.num_classes;
  std::uint64_t up = 0, down = 0;
  const PartitionSpec ps{c.clients, c.beta, c.seed, c.min_samples_per_client, c.partition_retries};
  for (std::size_t t = 0; t < c.tasks; ++t) {
    const auto shards = dirichlet_partition(train, report.schedule.tasks[t], ps, t);
    for (std::size_t r = 0; r < c.rounds_per_task; ++r) {
      for (ClientId m : select_participants(c, t, r)) {
        if (shards[m].empty()) continue;
        up += 4 * (model + shards[m].present_classes().size() * (2 * d + 1));
        down += 4 * model;
      }
    }
  }

  const std::size_t prompt = prefix_prompt_params(200, 768, 5);
  const std::size_t head = 100 * 768 + 100;
  const double ratio = 100.0 * prompt / double(vit_b16_backbone_params() + prompt + head);
  const bool ledger_ok = up == report.uplink_bytes && down == report.downlink_bytes && up > 0;
  return {ledger_ok && std::abs(ratio - 1.5) <= 0.5,
          fmt("ledger %llu/%llu bytes vs closed form %llu/%llu; ViT-B/16 prompt share %.3f%%",
              (unsigned long long)report.uplink_bytes, (unsigned long long)report.downlink_bytes,
              (unsigned long long)up, (unsigned long long)down, ratio)};
}

Verdict protocol_collapse() {
  RunConfig c = benchmark(11);
  c.clients = 1;
  c.tasks = 1;
  c.rebalance = false;
  const auto [train, test] = load_datasets(c);
  const RunOutcome out = run(c, train, test);
  ClientParams direct = ClientParams::init(c.num_classes, c.dim, c.adapter);
  for (std::size_t r = 0; r < c.rounds_per_task; ++r) {
    RngStream rng(c.seed, client_stream_id(0, r, 0));
    direct = local_train(direct, train, local_options(c), rng)->params;
  }
  const bool same = out.global == direct;
  return {same, fmt("M=1, T=1, %zu rounds: global model %s direct local_train", c.rounds_per_task,
                    same ? "bitwise equal to" : "DIFFERS from")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Verdict()> check;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 1, gradient_correctness},
      {2, "aggregation oracle", 1, aggregation_oracle},
      {3, "sampler correctness", 30, sampler_correctness},
      {4, "mixture optimality", 10, mixture_optimality},
      {5, "rebalancing efficacy", 120, rebalancing_efficacy},
      {6, "ablation ordering", 300, ablation_ordering},
      {7, "bias-entropy trend", 300, bias_trend},
      {8, "determinism", 120, determinism},
      {9, "communication accounting", 1, communication_accounting},
      {10, "degenerate-protocol collapse", 10, protocol_collapse},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_s;
    const bool ok = v.pass && in_time;
    failed += !ok;
    std::printf("%s %2d %s: %s (%.2f s, budget %.0f s%s)\n", ok ? "PASS" : "FAIL", c.id, c.name,
                v.detail.c_str(), secs, c.budget_s, in_time ? "" : ", OVER BUDGET");
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
