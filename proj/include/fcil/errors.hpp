#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fcil {

/// Base of every error raised by the simulator.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke a precondition on shapes or sizes.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Bad input values (labels out of range, negative weights, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed feature file. Carries the byte offset where decoding failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// No Dirichlet split satisfied the minimum-samples constraint.
class PartitionInfeasible : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf reached model state, or an oracle produced a non-finite value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// CLI exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPartition = 3;
inline constexpr int kExitNumerical = 4;

}  // namespace fcil
