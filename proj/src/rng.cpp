#include "dycaf/rng.hpp"

#include <cmath>

namespace dycaf {

u64 splitmix64(u64 x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

u64 derive_seed(u64 base, std::string_view name) {
  // FNV-1a over the name, then mixed with the base seed.
  u64 h = 0xcbf29ce484222325ull;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return splitmix64(base ^ h);
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * M_PI * u2;
  cached_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

i64 Rng::index(i64 n) {
  if (n <= 0) throw ValueError("Rng::index: n must be positive");
  return static_cast<i64>(next_u64() % static_cast<u64>(n));
}

}  // namespace dycaf
