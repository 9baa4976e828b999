#pragma once

// Reproducible random numbers.
//
// Engine: xoshiro256** (Blackman & Vigna), seeded through SplitMix64. Streams
// are split by hashing (parent seed, child index) with the SplitMix64
// finalizer, so a child stream depends only on its parent's seed and its
// index, never on how many draws the parent has made. All continuous
// variates use exact inverse-CDF transforms of a 53-bit uniform, so results
// do not depend on the standard library's distribution implementations.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>

#include <boost/math/special_functions/erf.hpp>

namespace queueseq {

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {
    std::uint64_t s = seed;
    for (auto& w : state_) {
      s += 0x9E3779B97F4A7C15ULL;
      w = splitmix64_mix(s);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }

  // Independent stream number `index` derived from this generator's seed.
  Rng child(std::uint64_t index) const noexcept {
    return Rng(child_seed(seed_, index));
  }

  static std::uint64_t child_seed(std::uint64_t parent, std::uint64_t index) noexcept {
    return splitmix64_mix(parent ^ splitmix64_mix(index + 0x632BE59BD9B4E019ULL));
  }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
  }

  double uniform(double a, double b) noexcept { return a + (b - a) * uniform(); }

  // Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n == 0) return 0;
    // Lemire's multiply-shift with rejection keeps the result unbiased.
    __uint128_t m = static_cast<__uint128_t>(next()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<__uint128_t>(next()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double exponential(double rate) noexcept { return -std::log1p(-uniform()) / rate; }

  // |Z| * scale with Z standard normal, by inverting the half-normal CDF
  // F(x) = erf(x / (scale * sqrt 2)).
  double half_normal(double scale) {
    double u = uniform();
    if (u <= 0.0) return 0.0;
    return scale * std::sqrt(2.0) * boost::math::erf_inv(u);
  }

  double normal() {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return std::sqrt(2.0) * boost::math::erf_inv(2.0 * u - 1.0);
  }

  // Index drawn proportionally to nonnegative weights.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    if (!(total > 0.0)) throw std::invalid_argument("categorical: weights must have positive mass");
    const double target = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (target < acc) return i;
    }
    // Round-off: return the last index carrying mass.
    for (std::size_t i = weights.size(); i-- > 0;)
      if (weights[i] > 0.0) return i;
    return weights.size() - 1;
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
};

}  // namespace queueseq
