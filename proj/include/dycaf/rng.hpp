#pragma once

// Deterministic random streams. Uniform and normal draws are mapped from raw
// mt19937_64 output by hand so results do not depend on the standard
// library's distribution implementations.

#include <random>
#include <string_view>

#include "dycaf/common.hpp"

namespace dycaf {

u64 splitmix64(u64 x);

// Stable seed for a named stream, e.g. one per parameter tensor.
u64 derive_seed(u64 base, std::string_view name);

class Rng {
 public:
  explicit Rng(u64 seed) : gen_(seed) {}

  u64 next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second draw.
  double normal();

  // Uniform index in [0, n).
  i64 index(i64 n);

 private:
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace dycaf
