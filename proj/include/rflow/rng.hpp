#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "rflow/tensor.hpp"

namespace rflow {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent seed for a named sub-purpose of a run.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return mix64(seed ^ mix64(tag + kGolden));
}

/// Counter-based generator: output k of stream (seed, stream_id) is a pure
/// function of (seed, stream_id, k), so any record's draws can be regenerated
/// from its key alone. Normals use our own Box-Muller so results do not depend
/// on the standard library's distribution implementations.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream_id = 0)
      : key_(mix64(seed ^ mix64(stream_id ^ 0xD1B54A32D192ED03ULL))) {}

  std::uint64_t next_u64() { return mix64(key_ + kGolden * ++counter_); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1].
  double uniform_open0() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform_open0()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire's multiply-shift; bias is below 2^-64 * n and irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Tensor standard_normal(Shape shape, CounterRng& rng) {
  Tensor out(std::move(shape));
  for (double& v : out.storage()) v = rng.normal();
  return out;
}

/// Row i is drawn from its own stream (seed, first_index + i).
inline Tensor standard_normal_rows(std::size_t rows, std::size_t dim, std::uint64_t seed,
                                   std::uint64_t first_index = 0) {
  Tensor out({rows, dim});
  for (std::size_t i = 0; i < rows; ++i) {
    CounterRng rng(seed, first_index + i);
    for (double& v : out.row(i)) v = rng.normal();
  }
  return out;
}

}  // namespace rflow
