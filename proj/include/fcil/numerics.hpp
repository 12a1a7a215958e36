#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace fcil {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  void append_row(std::span<const double> values);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what);
void require_same_size(std::span<const double> a, std::span<const double> b, std::string_view what);

bool all_finite(std::span<const double> values) noexcept;
/// Throws NumericalError naming `what` if any value is NaN/Inf.
void require_finite(std::span<const double> values, std::string_view what);

/// Ascending-index dot product.
double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);

/// Row-wise softmax with max subtraction. `active` restricts the support;
/// inactive entries get probability 0. Empty `active` means all columns.
Matrix softmax(const Matrix& logits, std::span<const std::size_t> active = {});

struct SoftmaxCe {
  double loss = 0.0;  // mean over the batch
  Matrix grad;        // d loss / d logits
};

/// Mean softmax cross-entropy and its gradient. With a non-empty `active`
/// set the softmax is taken over those columns only and the gradient is
/// zero elsewhere.
SoftmaxCe softmax_ce(const Matrix& logits, std::span<const std::size_t> labels,
                     std::span<const std::size_t> active = {});

// ---------------------------------------------------------------------------
// Optimizers

struct LrSchedule {
  enum class Kind { Constant, Cosine };
  Kind kind = Kind::Constant;
  std::size_t total_steps = 0;  // cosine only

  static LrSchedule constant() { return {}; }
  static LrSchedule cosine(std::size_t total_steps) { return {Kind::Cosine, total_steps}; }

  /// base * 0.5 * (1 + cos(pi * step / total)) for cosine, clamped at step >= total.
  double at(double base, std::size_t step) const;
};

struct SgdState {
  double learning_rate = 0.01;
  double momentum = 0.9;
  LrSchedule schedule;
  Vector velocity;  // sized on first step
};

/// velocity <- momentum * velocity - lr(step) * grad; params += velocity.
void sgd_step(std::span<double> params, std::span<const double> grad, SgdState& state,
              std::size_t step);

struct AdamState {
  double learning_rate = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  LrSchedule schedule;
  Vector first_moment;
  Vector second_moment;
};

/// Bias-corrected Adam update; `step` is zero-based.
void adam_step(std::span<double> params, std::span<const double> grad, AdamState& state,
               std::size_t step);

struct OptimizerSpec {
  enum class Kind { Sgd, Adam };
  Kind kind = Kind::Adam;
  double learning_rate = 0.003;
  double momentum = 0.0;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double epsilon = 1e-8;
  LrSchedule schedule;
};

/// Holds one optimizer state per parameter tensor ("slot").
class Optimizer {
 public:
  Optimizer(const OptimizerSpec& spec, std::size_t num_slots);

  void step(std::size_t slot, std::span<double> params, std::span<const double> grad,
            std::size_t step);

  const OptimizerSpec& spec() const noexcept { return spec_; }

 private:
  OptimizerSpec spec_;
  std::vector<SgdState> sgd_;
  std::vector<AdamState> adam_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

/// Returns the loss at `params` and writes the analytic gradient into `grad`
/// (same shape as params).
using LossWithGrad = std::function<double(const Matrix& params, Matrix& grad)>;

struct GradCheckReport {
  bool passed = true;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Central differences per coordinate. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
GradCheckReport grad_check(const LossWithGrad& f, const Matrix& params, double tol,
                           double eps = 1e-5, double abs_floor = 1e-6);

}  // namespace fcil
