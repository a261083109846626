#pragma once

#include <cstdint>
#include <random>

namespace pathmix {

// splitmix64 mixing step. Every stochastic component derives its own stream
// from one top-level seed through this, so a single --seed pins a whole run.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ ~splitmix64(~stream));
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, Rest... rest) {
  return derive_seed(derive_seed(seed, stream), rest...);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
  return std::mt19937_64{seed};
}

}  // namespace pathmix
