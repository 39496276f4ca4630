#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace stage {

// SplitMix64 step; the core generator and the stream-derivation hash.
inline std::uint64_t splitmix64(std::uint64_t& s) {
  s += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from (seed, tags). Streams keyed purely
// by value, never by shared state, so any (state, attempt, candidate) draw is
// reproducible regardless of evaluation order or worker count.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s);
  s ^= a + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h = splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h = splitmix64(s);
  s ^= c + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return splitmix64(s);
}

// Purpose tags for the per-run stream split. Toggling one feature must not
// perturb draws of another, so every consumer owns a tag.
namespace streams {
constexpr std::uint64_t kAssignment = 1;
constexpr std::uint64_t kXbar = 2;
constexpr std::uint64_t kTargets = 3;
constexpr std::uint64_t kActions = 4;
constexpr std::uint64_t kShuffles = 5;
constexpr std::uint64_t kRoot = 6;
constexpr std::uint64_t kNearChoice = 7;
constexpr std::uint64_t kMpc = 8;
constexpr std::uint64_t kEntropy = 9;
}  // namespace streams

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // decorrelate trivially related seeds
    next();
    next();
  }

  std::uint64_t next() { return splitmix64(state_); }

  // uniform in [0,1)
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0,n)
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  // standard normal, Box-Muller without a cached spare so the stream state
  // is exactly two uniforms per draw
  double normal() {
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace stage
