#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace tste {

/// Seeded random stream. Distribution transforms are written out here instead
/// of using std:: distributions, whose exact sequences are
/// implementation-defined; this keeps outputs reproducible everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(static_cast<std::mt19937::result_type>(seed ^ (seed >> 32))) {}

  uint32_t next_u32() { return gen_(); }

  /// Uniform in [0, n), n >= 1.
  uint32_t bounded(uint32_t n) {
    if (n <= 1) return 0;
    const uint32_t limit = UINT32_MAX - UINT32_MAX % n;
    uint32_t r = next_u32();
    while (r >= limit) r = next_u32();
    return r % n;
  }

  /// Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(bounded(static_cast<uint32_t>(hi - lo + 1)));
  }

  /// Uniform in [0, 1) with 24 bits of resolution.
  float uniform01() { return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f); }

  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform01(); }

  bool coin(float p_true) { return uniform01() < p_true; }

  /// Box-Muller; caches the spare draw.
  float normal(float mean = 0.0f, float sigma = 1.0f) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + sigma * spare_;
    }
    const double u1 = (static_cast<double>(next_u32() >> 8) + 0.5) / 16777216.0;  // (0,1)
    const double u2 = (static_cast<double>(next_u32() >> 8) + 0.5) / 16777216.0;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    has_spare_ = true;
    return mean + sigma * static_cast<float>(r * std::cos(a));
  }

  /// Fisher-Yates.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = bounded(static_cast<uint32_t>(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Derives an independent stream for a sub-task.
  uint64_t fork() {
    const uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

 private:
  std::mt19937 gen_;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

/// Mixes a base seed with an index into a new seed (splitmix64 finalizer).
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace tste
