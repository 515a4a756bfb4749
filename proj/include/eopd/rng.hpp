#pragma once

#include <cstdint>
#include <random>

namespace eopd {

// Seeded random source with platform-stable uniform and normal draws.
// std::uniform_real_distribution and std::normal_distribution are
// implementation-defined, so both transforms are spelled out here on top of
// the (standard-specified) mt19937_64 bit stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();

  // Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal();

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

// Stateless seed derivation for independent sub-streams, e.g.
// derive_seed(run_seed, iteration, prompt_index).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                          std::uint64_t b = 0);

}  // namespace eopd
