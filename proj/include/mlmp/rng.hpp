#pragma once

#include <cmath>
#include <cstdint>

namespace mlmp {

// All randomness in the pipeline goes through this counter-keyed generator so
// that every run is a pure function of (seed, structural indices). std::
// distributions are avoided on purpose: their output is implementation
// defined and would break cross-run reproducibility of artifacts.

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Stateless hash of a (key, index) pair. Used for dropout masks, which must
// be regenerable in the backward pass without storing them.
inline uint64_t hash_mix(uint64_t key, uint64_t index) {
  uint64_t s = key ^ (index * 0xD6E8FEB86659FD93ULL + 0x2545F4914F6CDD1DULL);
  return detail::splitmix64(s);
}

inline double hash_uniform(uint64_t key, uint64_t index) {
  return static_cast<double>(hash_mix(key, index) >> 11) * 0x1.0p-53;
}

// xoshiro256** seeded through splitmix64.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    for (auto& word : state_) word = detail::splitmix64(seed);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Modulo bias is below 2^-32 for every n used
  // here, far under the statistical tolerances the tests assert.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  size_t index(size_t n) { return static_cast<size_t>(below(n)); }

  bool bernoulli(double p) { return next_double() < p; }

  // Box-Muller; one variate per call so the draw count stays predictable.
  double normal() {
    const double u1 = 1.0 - next_double();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t state_[4];
};

// Domain-separation salts for derived keys. Each consumer of randomness gets
// its own stream even when the user-visible seed is shared.
enum class RngStream : uint64_t {
  heldout_split = 1,
  packing = 2,
  mask_dynamic = 3,
  mask_static = 4,
  mask_eval = 5,
  param_init = 6,
  dropout = 7,
  batch_order = 8,
  finetune = 9,
};

inline uint64_t derive_key(uint64_t seed, RngStream stream, uint64_t a = 0, uint64_t b = 0) {
  uint64_t k = seed;
  k = hash_mix(k, static_cast<uint64_t>(stream));
  k = hash_mix(k, a);
  k = hash_mix(k, b);
  return k;
}

inline Rng keyed_rng(uint64_t seed, RngStream stream, uint64_t a = 0, uint64_t b = 0) {
  return Rng(derive_key(seed, stream, a, b));
}

}  // namespace mlmp
