#include "fcil/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "fcil/errors.hpp"

namespace fcil {

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m;
  for (const auto& r : rows) m.append_row(std::span<const double>(r.begin(), r.size()));
  return m;
}

void Matrix::append_row(std::span<const double> values) {
  if (rows_ == 0 && cols_ == 0) {
    cols_ = values.size();
  } else if (values.size() != cols_) {
    throw ContractViolation("Matrix::append_row: row has " + std::to_string(values.size()) +
                            " columns, expected " + std::to_string(cols_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ContractViolation(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) +
                            "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                            "x" + std::to_string(b.cols()) + ")");
  }
}

void require_same_size(std::span<const double> a, std::span<const double> b, std::string_view what) {
  if (a.size() != b.size()) {
    throw ContractViolation(std::string(what) + ": size mismatch (" + std::to_string(a.size()) +
                            " vs " + std::to_string(b.size()) + ")");
  }
}

bool all_finite(std::span<const double> values) noexcept {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

void require_finite(std::span<const double> values, std::string_view what) {
  if (!all_finite(values)) throw NumericalError(std::string(what) + ": non-finite value");
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  require_same_size(a, b, "squared_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

namespace {

std::vector<std::size_t> resolve_active(std::span<const std::size_t> active, std::size_t cols) {
  if (active.empty()) {
    std::vector<std::size_t> all(cols);
    for (std::size_t i = 0; i < cols; ++i) all[i] = i;
    return all;
  }
  for (std::size_t c : active) {
    if (c >= cols) {
      throw ContractViolation("softmax: active class " + std::to_string(c) + " outside " +
                              std::to_string(cols) + " logits");
    }
  }
  return {active.begin(), active.end()};
}

// Writes probabilities for one row into `out` (zeros outside `active`).
void softmax_row(std::span<const double> logits, const std::vector<std::size_t>& active,
                 std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t c : active) max_logit = std::max(max_logit, logits[c]);
  double z = 0.0;
  for (std::size_t c : active) {
    out[c] = std::exp(logits[c] - max_logit);
    z += out[c];
  }
  for (std::size_t c : active) out[c] /= z;
}

}  // namespace

Matrix softmax(const Matrix& logits, std::span<const std::size_t> active) {
  const auto support = resolve_active(active, logits.cols());
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) softmax_row(logits.row(r), support, probs.row(r));
  return probs;
}

SoftmaxCe softmax_ce(const Matrix& logits, std::span<const std::size_t> labels,
                     std::span<const std::size_t> active) {
  if (logits.rows() == 0) throw ContractViolation("softmax_ce: empty batch");
  if (labels.size() != logits.rows()) {
    throw ContractViolation("softmax_ce: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(logits.rows()) + " rows");
  }
  const auto support = resolve_active(active, logits.cols());
  std::vector<char> in_support(logits.cols(), 0);
  for (std::size_t c : support) in_support[c] = 1;

  SoftmaxCe out{0.0, Matrix(logits.rows(), logits.cols())};
  const double inv_batch = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const std::size_t y = labels[r];
    if (y >= logits.cols() || !in_support[y]) {
      throw InputError("softmax_ce: label " + std::to_string(y) + " out of range");
    }
    const auto row = logits.row(r);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t c : support) max_logit = std::max(max_logit, row[c]);
    double z = 0.0;
    for (std::size_t c : support) z += std::exp(row[c] - max_logit);
    const double log_z = std::log(z) + max_logit;
    out.loss += (log_z - row[y]) * inv_batch;

    auto g = out.grad.row(r);
    for (std::size_t c : support) g[c] = std::exp(row[c] - log_z) * inv_batch;
    g[y] -= inv_batch;
  }
  return out;
}

double LrSchedule::at(double base, std::size_t step) const {
  if (kind == Kind::Constant || total_steps == 0) return base;
  const double s = static_cast<double>(std::min(step, total_steps));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * s / static_cast<double>(total_steps)));
}

void sgd_step(std::span<double> params, std::span<const double> grad, SgdState& state,
              std::size_t step) {
  require_same_size(params, grad, "sgd_step");
  if (state.velocity.empty()) state.velocity.assign(params.size(), 0.0);
  require_same_size(params, state.velocity, "sgd_step velocity");

  const double lr = state.schedule.at(state.learning_rate, step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.velocity[i] = state.momentum * state.velocity[i] - lr * grad[i];
    params[i] += state.velocity[i];
  }
  require_finite(params, "sgd_step");
}

void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
               std::size_t step) {
  require_same_size(params, grad, "adam_step");
  if (state.first_moment.empty()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  require_same_size(params, state.first_moment, "adam_step moments");

  const double lr = state.schedule.at(state.learning_rate, step);
  const double t = static_cast<double>(step + 1);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grad[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grad[i] * grad[i];
    const double m_hat = m / correction1;
    const double v_hat = v / correction2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
  }
  require_finite(params, "adam_step");
}

Optimizer::Optimizer(const OptimizerSpec& spec, std::size_t num_slots) : spec_(spec) {
  if (spec.kind == OptimizerSpec::Kind::Sgd) {
    sgd_.assign(num_slots, SgdState{spec.learning_rate, spec.momentum, spec.schedule, {}});
  } else {
    adam_.assign(num_slots, AdamState{spec.learning_rate, spec.beta1, spec.beta2, spec.epsilon,
                                      spec.schedule, {}, {}});
  }
}

void Optimizer::step(std::size_t slot, std::span<double> params, std::span<const double> grad,
                     std::size_t step) {
  if (spec_.kind == OptimizerSpec::Kind::Sgd) {
    sgd_step(params, grad, sgd_.at(slot), step);
  } else {
    adam_step(params, grad, adam_.at(slot), step);
  }
}

GradCheckReport grad_check(const LossWithGrad& f, const Matrix& params, double tol, double eps,
                           double abs_floor) {
  GradCheckReport report;
  if (params.empty()) return report;

  Matrix analytic(params.rows(), params.cols());
  const double base = f(params, analytic);
  if (!std::isfinite(base)) throw NumericalError("grad_check: non-finite loss");

  Matrix probe = params;
  Matrix scratch(params.rows(), params.cols());
  auto p = probe.flat();
  const auto a = analytic.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p[i];
    p[i] = saved + eps;
    const double up = f(probe, scratch);
    p[i] = saved - eps;
    const double down = f(probe, scratch);
    p[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("grad_check: non-finite loss at coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(a[i]), std::abs(numeric), abs_floor});
    const double rel = std::abs(a[i] - numeric) / denom;
    if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_index = i;
    }
    ++report.checked;
  }
  report.passed = report.max_relative_error < tol;
  return report;
}

}  // namespace fcil
