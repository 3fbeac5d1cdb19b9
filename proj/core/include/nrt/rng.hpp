#pragma once

#include <cstdint>
#include <random>

namespace nrt {

// splitmix64; used to derive independent, reproducible RNG streams from
// (seed, frame, node, sample, ...) tuples so results do not depend on
// thread count or work order.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a) { return splitmix64(a); }

template <class... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL), rest...);
}

template <class... Parts>
std::mt19937_64 make_rng(Parts... parts) {
  return std::mt19937_64(mix_seed(static_cast<std::uint64_t>(parts)...));
}

}  // namespace nrt
