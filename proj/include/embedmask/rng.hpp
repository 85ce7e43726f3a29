#pragma once

// Portable, fully specified PRNG so datasets and initializations reproduce
// bit-for-bit across platforms. The standard <random> distributions are
// implementation-defined and are deliberately not used.
//
//   seeding:  splitmix64 (Vigna), two draws -> PCG state and increment
//   stream:   PCG32 XSH-RR 64/32 (O'Neill), multiplier 6364136223846793005
//   uniform:  (next_u32() >> 8) * 2^-24 for float-grade doubles in [0, 1);
//             53-bit doubles use two draws

#include <cmath>
#include <cstdint>

namespace embedmask {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Derives an independent child seed, e.g. one per scene index.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t s = seed ^ (0xD1B54A32D192ED03ull * (stream + 1));
  return splitmix64(s);
}

class Pcg32 {
 public:
  explicit Pcg32(std::uint64_t seed) {
    std::uint64_t sm = seed;
    const std::uint64_t initstate = splitmix64(sm);
    inc_ = (splitmix64(sm) << 1u) | 1u;
    state_ = 0;
    next_u32();
    state_ += initstate;
    next_u32();
  }

  std::uint32_t next_u32() {
    const std::uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = next_u32() >> 5;  // 27 bits
    const std::uint64_t lo = next_u32() >> 6;  // 26 bits
    return static_cast<double>((hi << 26) | lo) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] by rejection (no modulo bias).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto range = static_cast<std::uint64_t>(hi - lo) + 1;
    if (range > 0xFFFFFFFFull) return lo + static_cast<std::int64_t>(uniform() * static_cast<double>(range));
    const auto r = static_cast<std::uint32_t>(range);
    const std::uint32_t limit = static_cast<std::uint32_t>(-r) % r;
    for (;;) {
      const std::uint32_t x = next_u32();
      if (x >= limit) return lo + static_cast<std::int64_t>(x % r);
    }
  }

  /// Standard normal via Box-Muller (one value per call; the pair's second
  /// half is discarded to keep the stream position simple).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t state_ = 0;
  std::uint64_t inc_ = 0;
};

}  // namespace embedmask
