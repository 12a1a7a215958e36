#include "fcil/client.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "fcil/errors.hpp"

namespace fcil {

LinearClassifier LinearClassifier::zeros(std::size_t num_classes, std::size_t dim) {
  return {Matrix(num_classes, dim), Vector(num_classes, 0.0)};
}

Matrix LinearClassifier::logits(const Matrix& features) const {
  if (features.cols() != dim()) {
    throw ContractViolation("LinearClassifier::logits: feature width " +
                            std::to_string(features.cols()) + " != " + std::to_string(dim()));
  }
  Matrix out(features.rows(), num_classes());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const auto x = features.row(r);
    auto z = out.row(r);
    for (std::size_t c = 0; c < num_classes(); ++c) z[c] = dot(weights.row(c), x) + bias[c];
  }
  return out;
}

std::vector<ClassId> LinearClassifier::predict(const Matrix& features,
                                               std::span<const ClassId> active) const {
  std::vector<ClassId> support(active.begin(), active.end());
  if (support.empty()) {
    support.resize(num_classes());
    std::iota(support.begin(), support.end(), ClassId{0});
  } else {
    std::sort(support.begin(), support.end());
  }
  const Matrix z = logits(features);
  std::vector<ClassId> out(features.rows());
  for (std::size_t r = 0; r < features.rows(); ++r) {
    const auto row = z.row(r);
    ClassId best = support.front();
    for (ClassId c : support) {
      if (row[c] > row[best]) best = c;
    }
    out[r] = best;
  }
  return out;
}

ClientParams ClientParams::init(std::size_t num_classes, std::size_t dim, AdapterMode mode) {
  ClientParams p;
  p.head = LinearClassifier::zeros(num_classes, dim);
  if (mode == AdapterMode::Linear) p.adapter = Matrix(dim, dim);
  return p;
}

Matrix ClientParams::transform(const Matrix& raw) const {
  if (!has_adapter()) return raw;
  if (raw.cols() != adapter.cols()) throw ContractViolation("ClientParams::transform: width");
  Matrix out = raw;
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    const auto x = raw.row(r);
    auto z = out.row(r);
    for (std::size_t i = 0; i < adapter.rows(); ++i) z[i] += dot(adapter.row(i), x);
  }
  return out;
}

void ClientParams::require_compatible(const ClientParams& other) const {
  require_same_shape(adapter, other.adapter, "ClientParams adapter");
  require_same_shape(head.weights, other.head.weights, "ClientParams head weights");
  require_same_size(head.bias, other.head.bias, "ClientParams head bias");
}

namespace {

struct Gradients {
  Matrix weights;
  Vector bias;
  Matrix adapter;
};

// Loss gradient for one mini-batch; `raw` rows are unadapted features.
Gradients batch_gradients(const ClientParams& p, const Matrix& raw,
                          std::span<const std::size_t> labels,
                          std::span<const std::size_t> active) {
  const Matrix z = p.transform(raw);
  const SoftmaxCe ce = softmax_ce(p.head.logits(z), labels, active);

  const std::size_t c_count = p.head.num_classes();
  const std::size_t d = p.head.dim();
  Gradients g{Matrix(c_count, d), Vector(c_count, 0.0), Matrix(p.adapter.rows(), p.adapter.cols())};
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto gl = ce.grad.row(r);
    const auto zr = z.row(r);
    for (std::size_t c = 0; c < c_count; ++c) {
      if (gl[c] == 0.0) continue;
      auto gw = g.weights.row(c);
      for (std::size_t j = 0; j < d; ++j) gw[j] += gl[c] * zr[j];
      g.bias[c] += gl[c];
    }
  }
  if (p.has_adapter()) {
    Vector dz(d);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const auto gl = ce.grad.row(r);
      std::fill(dz.begin(), dz.end(), 0.0);
      for (std::size_t c = 0; c < c_count; ++c) {
        if (gl[c] == 0.0) continue;
        const auto w = p.head.weights.row(c);
        for (std::size_t j = 0; j < d; ++j) dz[j] += gl[c] * w[j];
      }
      const auto x = raw.row(r);
      for (std::size_t i = 0; i < d; ++i) {
        auto ga = g.adapter.row(i);
        for (std::size_t j = 0; j < d; ++j) ga[j] += dz[i] * x[j];
      }
    }
  }
  return g;
}

}  // namespace

std::optional<LocalModel> local_train(const ClientParams& init, const FeatureDataset& shard,
                                      const LocalTrainOptions& options, RngStream& rng) {
  if (shard.empty()) return std::nullopt;
  if (options.epochs == 0) throw InputError("local_train: epochs must be >= 1");
  if (options.batch == 0) throw InputError("local_train: batch must be >= 1");
  if (shard.dim != init.head.dim() || shard.num_classes != init.head.num_classes()) {
    throw ContractViolation("local_train: shard shape does not match the head");
  }

  LocalModel model{init, {}};
  if (options.masking == LossMasking::Masked) model.active_classes = shard.present_classes();

  ClientParams& p = model.params;
  Optimizer opt(options.optimizer, 3);
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  Matrix batch_x;
  std::vector<std::size_t> batch_y;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const std::size_t stop = std::min(order.size(), start + options.batch);
      batch_x = Matrix(stop - start, shard.dim);
      batch_y.resize(stop - start);
      for (std::size_t k = start; k < stop; ++k) {
        std::copy_n(shard.features.row(order[k]).begin(), shard.dim, batch_x.row(k - start).begin());
        batch_y[k - start] = shard.labels[order[k]];
      }
      const Gradients g = batch_gradients(p, batch_x, batch_y, model.active_classes);
      opt.step(0, p.head.weights.flat(), g.weights.flat(), step);
      opt.step(1, p.head.bias, g.bias, step);
      if (p.has_adapter()) opt.step(2, p.adapter.flat(), g.adapter.flat(), step);
      ++step;
    }
  }
  return model;
}

std::vector<GenerativePrototype> compute_prototypes(const FeatureDataset& features,
                                                    ClientId client,
                                                    const PrototypeOptions& options) {
  std::vector<std::vector<std::size_t>> rows(features.num_classes);
  for (std::size_t i = 0; i < features.size(); ++i) rows[features.labels[i]].push_back(i);

  const std::size_t d = features.dim;
  std::vector<GenerativePrototype> out;
  for (ClassId c = 0; c < rows.size(); ++c) {
    auto& idx = rows[c];
    if (idx.empty()) continue;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto ra = features.features.row(a);
      const auto rb = features.features.row(b);
      return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    });

    GenerativePrototype proto{client, c, Vector(d, 0.0), Vector(d, 0.0), idx.size()};
    for (std::size_t i : idx) {
      const auto x = features.features.row(i);
      for (std::size_t j = 0; j < d; ++j) proto.mean[j] += x[j];
    }
    const double n = static_cast<double>(idx.size());
    for (double& m : proto.mean) m /= n;
    for (std::size_t i : idx) {
      const auto x = features.features.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = x[j] - proto.mean[j];
        proto.var_diag[j] += diff * diff;
      }
    }
    const double denom = (options.unbiased_variance && idx.size() > 1) ? n - 1.0 : n;
    for (double& v : proto.var_diag) v = std::max(v / denom, options.variance_floor);
    out.push_back(std::move(proto));
  }
  return out;
}

Vector response_histogram(const ClientParams& params, const FeatureDataset& eval_set,
                          std::span<const ClassId> active) {
  if (eval_set.empty()) throw InputError("response_histogram: empty evaluation set");
  const auto predictions = params.head.predict(params.transform(eval_set.features), active);
  Vector hist(params.head.num_classes(), 0.0);
  for (ClassId c : predictions) hist[c] += 1.0;
  const double n = static_cast<double>(predictions.size());
  for (double& h : hist) h /= n;
  return hist;
}

double accuracy(const ClientParams& params, const FeatureDataset& eval_set,
                std::span<const ClassId> active) {
  if (eval_set.empty()) throw InputError("accuracy: empty evaluation set");
  const auto predictions = params.head.predict(params.transform(eval_set.features), active);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] == eval_set.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

}  // namespace fcil
