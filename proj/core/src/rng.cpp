#include "kgalign/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "kgalign/hash.hpp"

namespace kgalign {

std::uint64_t Rng::uniform_below(std::uint64_t bound) {
  // Reject the low (2^64 mod bound) values so r % bound is unbiased.
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = next();
    if (r >= threshold) return r % bound;
  }
}

double Rng::normal() {
  double u1 = uniform01();
  while (u1 <= std::numeric_limits<double>::min()) u1 = uniform01();
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view key) {
  return splitmix64(base ^ fnv1a64(key));
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t key) {
  return splitmix64(base ^ splitmix64(key));
}

}  // namespace kgalign
