#pragma once

#include <cstdint>
#include <random>

namespace fpcd {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent deterministic substream: hash-combine the parts, seed an engine.
inline uint64_t seed_combine(uint64_t a, uint64_t b, uint64_t c = 0, uint64_t d = 0) {
  uint64_t h = splitmix64(a);
  h = splitmix64(h ^ b);
  h = splitmix64(h ^ c);
  h = splitmix64(h ^ d);
  return h;
}

inline std::mt19937_64 make_engine(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0) {
  return std::mt19937_64(seed_combine(a, b, c, d));
}

}  // namespace fpcd
