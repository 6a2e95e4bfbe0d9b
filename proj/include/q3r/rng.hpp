#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace q3r {

// Counter-based deterministic generator (splitmix64). Identical seeds give
// identical streams on every platform. split() derives independent child
// streams, used for per-parameter initialization and for keeping augmentation
// draws off the main training stream.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without caching: every sample consumes exactly two uniforms,
  // so the stream position is a pure function of the call count.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double gumbel() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;
    double inner = -std::log(u);
    if (inner < 1e-300) inner = 1e-300;
    return -std::log(inner);
  }

  // n must be > 0.
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Child stream derived from the original seed and a tag; independent of
  // how much of this stream has been consumed.
  SeededRng split(std::uint64_t tag) const {
    std::uint64_t z = seed_ ^ (0x9e3779b97f4a7c15ull * (tag + 0x632be59bd9b4e019ull));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return SeededRng(z ^ (z >> 31));
  }

  SeededRng split(std::string_view name) const { return split(fnv1a(name)); }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace q3r
