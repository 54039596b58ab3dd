#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "avalanche/error.hpp"

namespace avalanche::montecarlo {

/// Deterministic per-replica random stream (xoshiro256++ state seeded via
/// splitmix64). The stream is a pure function of
/// (master_seed, replica_index, purpose_tag): the three words are folded
/// through a splitmix64 chain and the last four splitmix outputs become the
/// generator state. Identical triples give identical sequences; replicas and
/// purposes get streams that are independent for testing purposes.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::uint64_t replica_index, std::uint64_t purpose_tag) {
    std::uint64_t h = 0x243F6A8885A308D3ULL;  // fractional digits of pi
    h = splitmix(h ^ master_seed);
    h = splitmix(h ^ (replica_index * 0x9E3779B97F4A7C15ULL));
    h = splitmix(h ^ (purpose_tag * 0xBF58476D1CE4E5B9ULL));
    for (auto& word : state_) {
      h = splitmix(h);
      word = h;
    }
    if (state_[0] == 0 && state_[1] == 0 && state_[2] == 0 && state_[3] == 0) state_[0] = 1;
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in (0, 1].
  double uniform_pos() noexcept { return 1.0 - uniform(); }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  double exponential(double rate) {
    require(rate > 0.0, errc::invalid_argument, "exponential rate must be positive");
    return -std::log(uniform_pos()) / rate;
  }

  /// Exact Poisson sampler: Knuth's product method for small means, halved
  /// recursively above 60 to keep exp(-mean) away from underflow.
  std::uint64_t poisson(double mean) {
    require(mean >= 0.0, errc::invalid_argument, "poisson mean must be nonnegative");
    std::uint64_t n = 0;
    while (mean > 60.0) {
      n += poisson_small(30.0);
      mean -= 30.0;
    }
    return n + poisson_small(mean);
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  static std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t poisson_small(double mean) noexcept {
    if (mean <= 0.0) return 0;
    const double limit = std::exp(-mean);
    std::uint64_t k = 0;
    double product = uniform_pos();
    while (product > limit) {
      ++k;
      product *= uniform_pos();
    }
    return k;
  }

  std::array<std::uint64_t, 4> state_{};
};

/// Purpose tags used to derive disjoint streams from one master seed.
namespace stream_tag {
inline constexpr std::uint64_t chain = 1;
inline constexpr std::uint64_t sde = 2;
inline constexpr std::uint64_t branching = 3;
inline constexpr std::uint64_t sizes = 4;
inline constexpr std::uint64_t testing = 9;
}  // namespace stream_tag

}  // namespace avalanche::montecarlo
