#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace emunet {

using Rng = std::mt19937_64;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Derives an independent generator from a run seed, a purpose tag and a
/// list of integer keys (round, member, restart, ...). The same arguments
/// always give the same stream, which is what makes runs resumable.
inline Rng stream(std::uint64_t seed, std::string_view tag,
                  std::initializer_list<std::uint64_t> keys = {}) {
  std::uint64_t s = detail::splitmix64(seed ^ detail::hash_tag(tag));
  for (auto k : keys) s = detail::splitmix64(s ^ detail::splitmix64(k + 0x51ed27ULL));
  std::seed_seq seq{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
  return Rng(seq);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace emunet
