#pragma once

#include <cstdint>
#include <random>

namespace ilss {

using Rng = std::mt19937_64;

/// Independent seed for a named stream (initialisation, shuffling, ...)
/// derived from one user seed. splitmix64 finaliser.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kShuffle = 2;
inline constexpr std::uint64_t kGrow = 3;
inline constexpr std::uint64_t kTrainImages = 4;
inline constexpr std::uint64_t kValImages = 5;
}  // namespace stream

}  // namespace ilss
