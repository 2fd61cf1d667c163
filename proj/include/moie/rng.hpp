#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace moie {

using Rng = std::mt19937_64;

// Independent, reproducible stream derived from a root seed and a name
// ("data", "init", "shuffle", ...). Changing how one component draws numbers
// never perturbs another component's stream.
inline Rng substream(std::uint64_t root_seed, std::string_view name) {
  // FNV-1a over the name keeps stream ids stable across standard libraries.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::seed_seq seq{static_cast<std::uint32_t>(root_seed), static_cast<std::uint32_t>(root_seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  return Rng(seq);
}

// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace moie
