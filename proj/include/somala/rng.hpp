#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace somala {

// Counter-based substreams: every consumer derives an independent stream from
// (master seed, domain, key...) so results do not depend on evaluation order
// or on how work is split across threads.

namespace rng_detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_key(std::uint64_t state, std::uint64_t key) {
  std::uint64_t s = state ^ (key + 0x9E3779B97F4A7C15ULL + (state << 6) + (state >> 2));
  return splitmix64(s);
}

}  // namespace rng_detail

/// Stream domains keep unrelated consumers of the same master seed apart.
enum class StreamDomain : std::uint64_t {
  kernel = 1,
  minibatch = 2,
  simulate = 3,
  init = 4,
  importance = 5,
  generic = 6,
};

/// Deterministic pseudo-random stream keyed by up to three 64-bit values.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, StreamDomain domain = StreamDomain::generic,
                     std::uint64_t key1 = 0, std::uint64_t key2 = 0) {
    state_ = rng_detail::mix_key(seed, static_cast<std::uint64_t>(domain));
    state_ = rng_detail::mix_key(state_, key1);
    state_ = rng_detail::mix_key(state_, key2);
  }

  std::uint64_t next_u64() { return rng_detail::splitmix64(state_); }

  /// Uniform draw on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; consumes two uniforms.
  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  Eigen::VectorXd normal_vector(Eigen::Index k) {
    Eigen::VectorXd z(k);
    for (Eigen::Index i = 0; i < k; ++i) z(i) = normal();
    return z;
  }

  /// Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
  std::uint64_t uniform_index(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t state_;
};

}  // namespace somala
