#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace vitae {

// splitmix64 step: advances the state and returns a well-mixed 64-bit value.
inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic generator with the same sequence on every platform.
// std::mt19937 would also be portable, but the distributions on top of it
// are not; this keeps sampling bit-stable across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int64_t uniform_int(int64_t n) {  // [0, n)
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream from a base seed and a path of indices,
// e.g. derive_rng(seed, {step, image}) for per-image noise inside a step.
inline Rng derive_rng(uint64_t seed, std::initializer_list<uint64_t> path) {
  uint64_t s = seed;
  for (uint64_t p : path) {
    s ^= splitmix64(p) + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
    uint64_t tmp = s;
    s = splitmix64(tmp);
  }
  return Rng(s);
}

}  // namespace vitae
