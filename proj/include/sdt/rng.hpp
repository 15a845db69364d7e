#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace sdt {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; spreads low-entropy inputs across all 64 bits.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Seed-splitting rule used everywhere randomness is forked: the derived
/// stream for (master, p1, p2, ...) is obtained by folding each path element
/// through mix64. Grid points, Monte Carlo resamples and repeat trials each
/// get their own path so they can run in any order with identical results.
inline std::uint64_t derive_seed(std::uint64_t master,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(master);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p));
  return s;
}

inline Rng make_rng(std::uint64_t master,
                    std::initializer_list<std::uint64_t> path = {}) {
  return Rng(derive_seed(master, path));
}

inline std::int64_t poisson_sample(Rng& rng, double mean) {
  if (mean <= 0.0) return 0;
  std::poisson_distribution<std::int64_t> dist(mean);
  return dist(rng);
}

inline double normal_sample(Rng& rng, double mean, double std) {
  std::normal_distribution<double> dist(mean, std);
  return dist(rng);
}

inline double uniform_sample(Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  return dist(rng);
}

}  // namespace sdt
