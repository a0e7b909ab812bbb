#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace cats {

// Bit-reproducible random source. The standard distributions are
// implementation-defined, so uniform and normal draws are derived directly
// from the 64-bit engine output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

  // Normal(0, std) truncated to [-2 std, 2 std] by rejection.
  double truncated_normal(double std);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Stable 64-bit FNV-1a hash used to derive per-name seeds.
std::uint64_t fnv1a64(std::string_view text);

// Seed for a named stream under a run seed; independent of creation order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64(seed ^ fnv1a64(name));
}

}  // namespace cats
