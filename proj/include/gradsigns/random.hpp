#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace gradsigns {

// Sampling helpers written against any 64-bit uniform bit source, so the
// same code path serves both the seeded PRNG and the hash-derived stream
// used for identity-bound keys. The standard <random> distributions are
// implementation-defined, which would make keys and datasets differ
// between standard libraries.
template <typename G>
concept BitSource64 = requires(G g) {
  { g() } -> std::convertible_to<std::uint64_t>;
};

// Uniform double in [0, 1) with 53 random bits.
template <BitSource64 G>
double uniform01(G& gen) {
  return static_cast<double>(static_cast<std::uint64_t>(gen()) >> 11) * 0x1.0p-53;
}

template <BitSource64 G>
double uniform(G& gen, double lo, double hi) {
  return lo + (hi - lo) * uniform01(gen);
}

// Unbiased integer in [0, n) by rejection.
template <BitSource64 G>
std::uint64_t uniform_index(G& gen, std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  for (;;) {
    const std::uint64_t r = gen();
    if (r < limit) return r % n;
  }
}

// Box-Muller; one fresh pair per call keeps the stream position obvious.
template <BitSource64 G>
double standard_normal(G& gen) {
  double u1 = uniform01(gen);
  while (u1 <= 0.0) u1 = uniform01(gen);
  const double u2 = uniform01(gen);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <BitSource64 G, typename T>
void shuffle(G& gen, std::span<T> items) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = uniform_index(gen, i);
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

// k distinct indices from [0, n), in draw order (partial Fisher-Yates).
template <BitSource64 G>
std::vector<std::size_t> sample_without_replacement(G& gen, std::size_t n, std::size_t k) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_index(gen, n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent child seeds from a master seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace gradsigns
