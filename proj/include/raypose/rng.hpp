#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace raypose {

// Seed mixing for derived RNG streams. Generation, augmentation and eval all
// draw from streams keyed as mix(master, index...) so that parallel and serial
// execution consume identical randomness.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ull)); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) { return mix_seed(mix_seed(a, b, c), d); }

// mt19937_64 with hand-rolled output transforms. The std <random>
// distributions are implementation-defined; these are not, so identical seeds
// give identical streams on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive on both ends, unbiased via rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return lo + static_cast<int64_t>(x % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller (cosine branch only; one draw of two uniforms per sample).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace raypose
