#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace dermfuse {

// splitmix64 generator. The standard <random> distributions are
// implementation-defined, so every random draw in the library goes through
// this class to keep runs reproducible for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n), n > 0
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller, no cached spare so the stream stays easy to reason about
  double normal(double mean = 0.0, double sigma = 1.0) {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sigma * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from a parent seed and a stream index,
// e.g. (run seed, epoch) or (epoch stream, sample index).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a + 0x9e3779b97f4a7c15ull + (b << 1);
  x ^= b + 0x9e3779b97f4a7c15ull + (x << 6) + (x >> 2);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

}  // namespace dermfuse
