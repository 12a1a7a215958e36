#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fcil/errors.hpp"
#include "fcil/metrics.hpp"
#include "fcil/server.hpp"
#include "oracles.hpp"

using namespace fcil;

namespace {

ClientParams head_only(std::vector<double> weights, std::size_t classes, std::size_t dim) {
  ClientParams p = ClientParams::init(classes, dim, AdapterMode::None);
  std::copy(weights.begin(), weights.end(), p.head.weights.flat().begin());
  return p;
}

GenerativePrototype proto(ClassId c, ClientId m, std::size_t count, Vector mean, Vector var) {
  return GenerativePrototype{m, c, std::move(mean), std::move(var), count};
}

std::vector<GenerativePrototype> three_prototypes() {
  return {proto(0, 0, 30, {0.0, 0.0}, {1.0, 1.0}), proto(0, 1, 10, {4.0, 0.0}, {1.0, 1.0}),
          proto(1, 0, 60, {0.0, 4.0}, {1.0, 1.0})};
}

ClientParams random_params(std::mt19937_64& gen, std::size_t c, std::size_t d, bool adapter) {
  ClientParams p = ClientParams::init(c, d, adapter ? AdapterMode::Linear : AdapterMode::None);
  p.head.weights = oracle::random_matrix(gen, c, d);
  std::normal_distribution<double> n;
  for (auto& b : p.head.bias) b = n(gen);
  if (adapter) p.adapter = oracle::random_matrix(gen, d, d);
  return p;
}

}  // namespace

TEST_CASE("aggregate: sample-weighted scalar example") {
  const std::vector<ClientParams> ps{head_only({0.0}, 1, 1), head_only({4.0}, 1, 1)};
  const std::vector<std::size_t> sizes{1, 3};
  CHECK(aggregate(ps, sizes).head.weights(0, 0) == 3.0);
}

TEST_CASE("aggregate: equal sizes give the plain mean and identity is exact") {
  std::mt19937_64 gen(1);
  const ClientParams a = random_params(gen, 3, 4, true);
  const ClientParams b = random_params(gen, 3, 4, true);
  const std::vector<ClientParams> ps{a, b};
  const ClientParams mean = aggregate(ps, std::vector<std::size_t>{5, 5});
  for (std::size_t i = 0; i < a.head.weights.size(); ++i) {
    CHECK(mean.head.weights.flat()[i] == (a.head.weights.flat()[i] + b.head.weights.flat()[i]) / 2.0);
  }
  const std::vector<ClientParams> same{a, a, a};
  CHECK(aggregate(same, std::vector<std::size_t>{1, 1, 2}) == a);
}

TEST_CASE("aggregate: matches an extended-precision weighted mean") {
  std::mt19937_64 gen(2);
  std::uniform_int_distribution<std::size_t> size(1, 500);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 2 + trial;
    std::vector<ClientParams> ps;
    std::vector<std::size_t> sizes;
    std::vector<std::vector<double>> flat;
    for (std::size_t k = 0; k < m; ++k) {
      ps.push_back(random_params(gen, 4, 3, true));
      sizes.push_back(size(gen));
      flat.emplace_back(ps.back().head.weights.flat().begin(), ps.back().head.weights.flat().end());
    }
    const auto expected = oracle::weighted_mean(flat, sizes);
    const ClientParams got = aggregate(ps, sizes);
    for (std::size_t i = 0; i < expected.size(); ++i) {
      CHECK(std::abs(got.head.weights.flat()[i] - static_cast<double>(expected[i])) <= 1e-12);
    }
  }
}

TEST_CASE("aggregate: arrival order does not change a single bit") {
  std::mt19937_64 gen(3);
  std::vector<ClientParams> ps;
  for (int k = 0; k < 6; ++k) ps.push_back(random_params(gen, 5, 4, true));
  std::vector<ClientUpdate> updates;
  for (std::size_t k = 0; k < ps.size(); ++k) updates.push_back({k, &ps[k], 10 + 7 * k});
  const ClientParams reference = aggregate(updates);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(updates.begin(), updates.end(), gen);
    CHECK(aggregate(updates) == reference);
  }
}

TEST_CASE("aggregate: errors") {
  CHECK_THROWS_AS(aggregate(std::span<const ClientUpdate>{}), InputError);
  const std::vector<ClientParams> ps{head_only({1.0}, 1, 1), head_only({2.0}, 1, 1)};
  CHECK_THROWS_AS(aggregate(ps, std::vector<std::size_t>{0, 0}), InputError);
  CHECK_THROWS_AS(aggregate(ps, std::vector<std::size_t>{1}), ContractViolation);
  const std::vector<ClientParams> mixed{head_only({1.0}, 1, 1), ClientParams::init(2, 1, AdapterMode::None)};
  CHECK_THROWS_AS(aggregate(mixed, std::vector<std::size_t>{1, 1}), ContractViolation);
}

TEST_CASE("mixture: class and client weights") {
  const auto protos = three_prototypes();
  const HierarchicalMixture mix = build_mixture(protos, 2, 2);
  CHECK(mix.class_weights()[0] == doctest::Approx(0.4));
  CHECK(mix.class_weights()[1] == doctest::Approx(0.6));
  CHECK(mix.client_weights()(0, 0) == doctest::Approx(0.75));
  CHECK(mix.client_weights()(0, 1) == doctest::Approx(0.25));
  CHECK(mix.client_weights()(1, 0) == doctest::Approx(1.0));
  CHECK(mix.client_weights()(1, 1) == 0.0);
  CHECK(mix.classes() == std::vector<ClassId>{0, 1});
  CHECK(mix.prototype(1, 1) == nullptr);

  const auto inferred = build_mixture(protos);
  CHECK(inferred.num_classes() == 2);
  CHECK(inferred.num_clients() == 2);
}

TEST_CASE("mixture: weights are normalized for random prototype sets") {
  std::mt19937_64 gen(4);
  std::uniform_int_distribution<std::size_t> count(1, 100);
  std::bernoulli_distribution present(0.6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<GenerativePrototype> ps;
    for (ClassId c = 0; c < 5; ++c) {
      for (ClientId m = 0; m < 4; ++m) {
        if (present(gen) || (m == 0 && c == 0)) ps.push_back(proto(c, m, count(gen), {0.0}, {1.0}));
      }
    }
    const HierarchicalMixture mix = build_mixture(ps, 5, 4);
    const double omega = std::accumulate(mix.class_weights().begin(), mix.class_weights().end(), 0.0);
    CHECK(omega == doctest::Approx(1.0).epsilon(1e-12));
    for (ClassId c : mix.classes()) {
      const auto row = mix.client_weights().row(c);
      CHECK(std::accumulate(row.begin(), row.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("mixture: invalid prototype sets") {
  CHECK_THROWS_AS(build_mixture(std::vector<GenerativePrototype>{}, 2, 2), InputError);
  auto dup = three_prototypes();
  dup.push_back(dup.front());
  CHECK_THROWS_AS(build_mixture(dup, 2, 2), InputError);
  auto zero = three_prototypes();
  zero[0].count = 0;
  CHECK_THROWS_AS(build_mixture(zero, 2, 2), InputError);
  CHECK_THROWS_AS(build_mixture(three_prototypes(), 1, 2), InputError);
}

TEST_CASE("alias table: degenerate and reconstruction") {
  RngStream rng(1, 1);
  const AliasTable one(std::vector<double>{1.0});
  for (int i = 0; i < 100; ++i) CHECK(one.sample(rng) == 0);

  const AliasTable middle(std::vector<double>{0.0, 1.0, 0.0});
  for (int i = 0; i < 1000; ++i) CHECK(middle.sample(rng) == 1);

  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> w(1 + trial);
    for (auto& x : w) x = u(gen) < 0.2 ? 0.0 : u(gen);
    w[0] += 0.01;
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    const Vector p = AliasTable(w).probabilities();
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(p[i] - w[i] / total) <= 1e-12);
  }

  CHECK_THROWS_AS(AliasTable(std::vector<double>{0.5, -0.1}), InputError);
  CHECK_THROWS_AS(AliasTable(std::vector<double>{0.0, 0.0}), InputError);
  CHECK_THROWS_AS(AliasTable(std::vector<double>{}), InputError);
}

TEST_CASE("alias table: empirical frequencies pass chi-square") {
  const std::vector<double> w{0.2, 0.3, 0.5};
  const AliasTable table(w);
  RngStream rng(6, 6);
  std::vector<std::size_t> counts(3, 0);
  for (int i = 0; i < 200000; ++i) ++counts[table.sample(rng)];
  CHECK(oracle::chi_square_p(counts, w) > 0.001);
}

TEST_CASE("sampling: joint (class, client) draws follow omega * pi") {
  const auto protos = three_prototypes();
  const HierarchicalMixture mix = build_mixture(protos, 2, 2);
  RngStream rng(7, 7);
  std::vector<std::size_t> counts(4, 0);
  for (int i = 0; i < 200000; ++i) {
    const auto comp = mix.draw_component(rng);
    ++counts[comp.label * 2 + comp.client];
  }
  CHECK(oracle::chi_square_p(counts, std::vector<double>{0.3, 0.1, 0.6, 0.0}) > 0.001);
}

TEST_CASE("sampling: per-class moments and covariance scaling") {
  const std::vector<GenerativePrototype> ps{proto(0, 0, 5, {1.0, -1.0}, {0.25, 4.0})};
  const HierarchicalMixture mix = build_mixture(ps, 1, 1);
  for (double scale : {1.0, 9.0}) {
    RngStream rng(8, static_cast<std::uint64_t>(scale));
    const SyntheticDataset s = sample_synthetic(mix, 20000, scale, rng);
    REQUIRE(s.data.size() == 20000);
    const auto p = compute_prototypes(s.data, 0)[0];
    for (std::size_t j = 0; j < 2; ++j) {
      const double var = ps[0].var_diag[j] * scale;
      CHECK(std::abs(p.mean[j] - ps[0].mean[j]) < 4.0 * std::sqrt(var / 20000.0));
      const double ratio = p.var_diag[j] / ps[0].var_diag[j];
      if (scale == 9.0) {
        CHECK(ratio >= 8.5);
        CHECK(ratio <= 9.5);
      } else {
        CHECK(std::abs(ratio - 1.0) < 0.05);
      }
    }
  }
}

TEST_CASE("sampling: provenance and modes") {
  const std::vector<GenerativePrototype> ps{proto(0, 0, 10, {0.0}, {1.0}), proto(1, 1, 10, {5.0}, {1.0}),
                                            proto(1, 2, 30, {6.0}, {1.0})};
  const HierarchicalMixture mix = build_mixture(ps, 3, 3);
  RngStream rng(9, 9);
  const SyntheticDataset s = sample_synthetic(mix, 500, 1.0, rng);
  CHECK(s.data.size() == 1000);
  for (std::size_t i = 0; i < s.data.size(); ++i) {
    if (s.data.labels[i] == 0) CHECK(s.source_client[i] == 0);
    else CHECK(s.source_client[i] != 0);
    CHECK(s.data.labels[i] != 2);
  }
  RngStream rng2(9, 10);
  const SyntheticDataset exact = sample_synthetic(mix, 50, 1.0, rng2, SamplingMode::ExactPerClass);
  CHECK(exact.data.class_counts() == std::vector<std::size_t>{50, 50, 0});

  RngStream rng3(9, 9);
  CHECK(sample_synthetic(mix, 500, 1.0, rng3).data == s.data);
  CHECK_THROWS_AS(sample_synthetic(mix, 0, 1.0, rng3), InputError);
  CHECK_THROWS_AS(sample_synthetic(mix, 1, 0.0, rng3), InputError);
}

TEST_CASE("prototype bank keeps the latest prototype per key") {
  PrototypeBank bank;
  bank.update(three_prototypes());
  CHECK(bank.size() == 3);
  bank.update(std::vector<GenerativePrototype>{proto(0, 1, 99, {1.0, 1.0}, {1.0, 1.0})});
  CHECK(bank.size() == 3);
  const auto all = bank.all();
  const auto it = std::find_if(all.begin(), all.end(), [](const auto& p) { return p.label == 0 && p.client == 1; });
  REQUIRE(it != all.end());
  CHECK(it->count == 99);
}

TEST_CASE("rebalance: repairs an injected class bias") {
  SyntheticSpec spec;
  spec.num_classes = 4;
  spec.dim = 6;
  spec.samples_per_class = 200;
  spec.mean_scale = 2.0;
  const FeatureDataset train = synth_generate(spec);
  const FeatureDataset test = synth_generate(spec, Split::Test);

  // A head trained on data dominated by class 0.
  std::vector<std::size_t> skewed;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.labels[i] == 0 || i % 50 == 0) skewed.push_back(i);
  }
  LocalTrainOptions skew_opts;
  skew_opts.masking = LossMasking::Unmasked;
  RngStream trng(1, 3);
  const ClientParams biased =
      local_train(ClientParams::init(4, 6, AdapterMode::None), train.subset(skewed), skew_opts, trng)->params;
  const LinearClassifier& head = biased.head;
  const double acc_before = accuracy(biased, test);
  const double h_before = bias_entropy(response_histogram(biased, test));

  const auto protos = compute_prototypes(train, 0);
  const HierarchicalMixture mix = build_mixture(protos, 4, 1);
  RngStream srng(1, 1), rrng(1, 2);
  const SyntheticDataset synth = sample_synthetic(mix, 256, 1.0, srng);
  const std::vector<ClassId> seen{0, 1, 2, 3};
  const RebalanceOutcome out = rebalance(head, synth, {}, seen, std::vector<ClassId>{2, 3}, rrng);
  REQUIRE(out.applied);
  CHECK(out.samples_used == synth.data.size());
  const ClientParams fixed{Matrix(), out.head};
  CHECK(bias_entropy(response_histogram(fixed, test)) > h_before);
  CHECK(accuracy(fixed, test) >= acc_before + 0.20);
}

TEST_CASE("rebalance: zero learning rate, filters and warnings") {
  const auto protos = three_prototypes();
  const HierarchicalMixture mix = build_mixture(protos, 2, 2);
  RngStream srng(2, 1);
  const SyntheticDataset synth = sample_synthetic(mix, 64, 1.0, srng);
  std::mt19937_64 gen(10);
  LinearClassifier head{oracle::random_matrix(gen, 2, 2), {0.5, -0.5}};
  const std::vector<ClassId> seen{0, 1};

  RebalanceOptions frozen;
  frozen.learning_rate = 0.0;
  RngStream r1(2, 2);
  const auto still = rebalance(head, synth, frozen, seen, std::vector<ClassId>{1}, r1);
  CHECK(still.applied);
  CHECK(still.head == head);

  // Synthetic data only covers classes 0 and 1; with class 1 current, the
  // old filter keeps class 0 and the current filter keeps class 1.
  RebalanceOptions old_only;
  old_only.filter = ClassFilter::OldOnly;
  RngStream r2(2, 3);
  const auto o = rebalance(head, synth, old_only, seen, std::vector<ClassId>{1}, r2);
  const auto counts = synth.data.class_counts();
  CHECK(o.samples_used == counts[0]);

  RebalanceOptions current_only;
  current_only.filter = ClassFilter::CurrentOnly;
  RngStream r3(2, 4);
  const auto none = rebalance(head, synth, current_only, std::vector<ClassId>{0}, std::vector<ClassId>{1}, r3);
  CHECK_FALSE(none.applied);
  CHECK_FALSE(none.warning.empty());
  CHECK(none.head == head);
}

TEST_CASE("monte_carlo_kl: zero for identical mixtures, positive for a shifted one") {
  const auto protos = three_prototypes();
  const HierarchicalMixture mix = build_mixture(protos, 2, 2);
  RngStream rng(11, 11);
  const auto self = monte_carlo_kl(
      mix, [&](std::span<const double> x) { return oracle::flat_mixture_log_density(protos, x); }, 20000,
      rng);
  CHECK(std::abs(self.value) < 1e-9);
  CHECK(self.draws == 20000);

  auto shifted = protos;
  shifted[1].mean[0] += 5.0;
  RngStream rng2(11, 12);
  const auto kl = monte_carlo_kl(
      mix, [&](std::span<const double> x) { return oracle::flat_mixture_log_density(shifted, x); }, 20000,
      rng2);
  CHECK(kl.value > 3.0 * kl.std_error);

  CHECK_THROWS_AS(monte_carlo_kl(mix, [](std::span<const double>) { return 0.0; }, 1, rng), InputError);
  CHECK_THROWS_AS(monte_carlo_kl(mix, [](std::span<const double>) { return -INFINITY; }, 10, rng),
                  NumericalError);
}

TEST_CASE("mixture log density agrees with the flat oracle") {
  const auto protos = three_prototypes();
  const HierarchicalMixture mix = build_mixture(protos, 2, 2);
  std::mt19937_64 gen(12);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> x{n(gen), n(gen)};
    CHECK(mix.log_density(x) == doctest::Approx(oracle::flat_mixture_log_density(protos, x)).epsilon(1e-10));
    CHECK(mix.log_density(x, 3.0) ==
          doctest::Approx(oracle::flat_mixture_log_density(protos, x, 3.0)).epsilon(1e-10));
  }
}

TEST_CASE("mixture snapshot lists every component") {
  const auto protos = three_prototypes();
  const auto snap = mixture_snapshot(build_mixture(protos, 2, 2));
  CHECK(snap.is_object());
  CHECK(snap.dump().find("omega") != std::string::npos);
}
