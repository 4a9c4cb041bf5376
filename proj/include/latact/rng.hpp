#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace latact {

/// Deterministic xoshiro256++ generator with explicit distribution code.
///
/// The standard <random> distributions are implementation-defined, which
/// would break byte-identical dataset reproduction across toolchains, so the
/// few distributions we need are implemented here from the raw bit stream.
/// Substreams derived via derive(seed, index) are independent enough for
/// per-record / per-trial parallelism.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // splitmix64 seeding, the reference recommendation.
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
  }

  static uint64_t derive(uint64_t seed, uint64_t stream) {
    uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    x = splitmix64(x);
    return x ^ splitmix64(x);
  }

  /// Independent child stream for (this seed, index) pairs.
  static Rng child(uint64_t seed, uint64_t stream) { return Rng(derive(seed, stream)); }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), n >= 1.
  uint64_t uniform_int(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  /// Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace latact
