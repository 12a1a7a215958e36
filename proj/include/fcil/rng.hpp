#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>

namespace fcil {

/// Mixes a path of integers (e.g. {tag, task, round, client}) into one
/// 64-bit stream id. Order-sensitive.
std::uint64_t stream_id(std::initializer_list<std::uint64_t> path) noexcept;

/// Counter-based generator (Philox4x32-10). The key is the 64-bit seed, the
/// upper half of the 128-bit counter is the stream id and the lower half is
/// the block index, so distinct ids never share a block.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t id) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t id() const noexcept { return id_; }

  /// A stream keyed by the same seed whose id is derived from (id, child).
  RngStream split(std::uint64_t child) const noexcept;

  std::uint32_t next_u32() noexcept;
  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform in (0, 1).
  double uniform_open() noexcept;
  /// Unbiased integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Standard normal via Box-Muller (the second variate is cached).
  double normal() noexcept;
  /// log of a Gamma(shape, 1) variate. Working in log space keeps tiny
  /// shapes (Dirichlet with beta << 1) from underflowing to zero.
  double log_gamma_variate(double shape) noexcept;

 private:
  void refill() noexcept;

  std::uint64_t seed_;
  std::uint64_t id_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  unsigned buffered_ = 0;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

/// Raw Philox4x32-10 block function, exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key) noexcept;

}  // namespace fcil
