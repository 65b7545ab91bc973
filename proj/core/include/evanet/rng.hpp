#pragma once

#include <cstdint>
#include <cstddef>

namespace evanet {

// All randomness in the project flows through xoshiro256** (Blackman & Vigna),
// seeded through SplitMix64. A 64-bit seed therefore reproduces every
// stochastic result bit-for-bit on a given platform. Independent substreams
// are derived by mixing a stream index into the seed, so subjects, folds and
// epochs can be generated in any order (or in parallel) without interacting.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent substream k of a master seed.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double next_double();

  double uniform(double lo, double hi);

  // Unbiased integer in [0, bound) via rejection.
  std::uint64_t next_below(std::uint64_t bound);

  // Standard normal draw, Marsaglia polar method (one spare cached).
  double normal();

 private:
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// SplitMix64 step, exposed for hashing-style seed mixing elsewhere.
std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace evanet
