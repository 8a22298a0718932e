#pragma once

// Seedable counter-style RNG used everywhere results must be reproducible.
// Each logical consumer (hopper, solver start, QMC shift) owns a Stream
// derived from (seed, stream id), so parallel evaluation order cannot
// change the numbers drawn.

#include <cstdint>

#include "mwm/normal.hpp"

namespace mwm {

// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_stream_seed(std::uint64_t seed, std::uint64_t stream_id) {
  return mix64(mix64(seed) ^ mix64(stream_id * 0xD6E8FEB86659FD93ULL + 0xA5A5A5A5A5A5A5A5ULL));
}

class Stream {
 public:
  explicit Stream(std::uint64_t seed, std::uint64_t stream_id = 0)
      : state_(derive_stream_seed(seed, stream_id)) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on the open interval (0, 1).
  double next_uniform() {
    const std::uint64_t bits = next_u64() >> 11;  // 53 bits
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  // Gaussian draw by inverse CDF; one uniform consumed per draw.
  double next_gaussian(double mean, double sd) { return mean + sd * norm_quantile(next_uniform()); }

 private:
  std::uint64_t state_;
};

}  // namespace mwm
