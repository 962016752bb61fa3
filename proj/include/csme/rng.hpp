#pragma once

#include <cmath>
#include <cstdint>

namespace csme {

// SplitMix64 step (Vigna). Used both as a stream generator and as a mixer so
// that draws keyed by (seed, i, b) are reproducible independent of evaluation
// order, which is what makes parallel replicate loops deterministic.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a;
  std::uint64_t h = splitmix64_next(s);
  s = h ^ (b + 0x9E3779B97F4A7C15ull);
  return splitmix64_next(s);
}

inline std::uint64_t mix_keys(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_keys(mix_keys(a, b), c);
}

// Counter-style deterministic RNG: a SplitMix64 stream started at a mixed key.
class Rng {
 public:
  explicit Rng(std::uint64_t key) : state_(key) {}
  Rng(std::uint64_t seed, std::uint64_t stream) : state_(mix_keys(seed, stream)) {}
  Rng(std::uint64_t seed, std::uint64_t s1, std::uint64_t s2) : state_(mix_keys(seed, s1, s2)) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform on (0, 1); never returns 0 or 1 so log/Box-Muller are safe.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53 + 0x1.0p-54; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; pairs are drawn lazily.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace csme
