#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace evimix {

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a named sub-stream of a run, e.g. derive_seed(seed, {kInit, view}).
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix_seed(base);
  for (std::uint64_t p : path) s = mix_seed(s ^ mix_seed(p + 0x632be59bd9b4e019ULL));
  return s;
}

/// Uniform double in the open interval (0, 1).
inline double uniform_open(Rng& rng) {
  // 53 random bits shifted by half an ulp keep both endpoints excluded.
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard Gumbel draw q = -log(-log(u)).
inline double gumbel(Rng& rng) { return -std::log(-std::log(uniform_open(rng))); }

}  // namespace evimix
