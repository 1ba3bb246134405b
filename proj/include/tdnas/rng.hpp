#pragma once

#include <cmath>
#include <cstdint>

#include "tdnas/errors.hpp"

namespace tdnas {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 output mix. Bijective on 64-bit words.
inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ull;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBull;
  x ^= x >> 31;
  return x;
}

}  // namespace detail

// Counter-based generator. The n-th output is a pure function of
// (key, n), so any draw can be reproduced from the two 64-bit state
// words alone. The key folds together the user seed and a stream id;
// distinct stream ids give unrelated sequences for the same seed.
class Rng {
 public:
  Rng() : Rng(0, 0) {}

  Rng(std::uint64_t seed, std::uint64_t stream)
      : key_(detail::mix64(detail::mix64(seed + detail::kGolden) ^
                           detail::mix64(stream ^ 0x5851F42D4C957F2Dull))),
        counter_(0) {}

  static Rng from_state(std::uint64_t key, std::uint64_t counter) {
    Rng r;
    r.key_ = key;
    r.counter_ = counter;
    return r;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

  // Independent substream labeled by `tag`. Derived from the key only,
  // so splitting does not disturb or depend on this stream's counter.
  Rng split(std::uint64_t tag) const {
    Rng r;
    r.key_ = detail::mix64(key_ ^ detail::mix64(tag + detail::kGolden));
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  // Uniform integer in [0, n). The modulo bias is below n / 2^64.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw ValueError("next_below: n must be positive");
    return next_u64() % n;
  }

  // Uniform double clamped to [1e-12, 1 - 1e-12] so that log(u) and
  // log(1 - u) stay finite for downstream transforms.
  double draw_uniform() {
    double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    if (u < kUniformLo) return kUniformLo;
    if (u > kUniformHi) return kUniformHi;
    return u;
  }

  // Standard Gumbel via inverse CDF of the clamped uniform.
  double draw_gumbel() { return gumbel_from_uniform(draw_uniform()); }

  // Standard normal via Box-Muller; consumes two uniforms per value.
  double draw_normal() {
    double u1 = draw_uniform();
    double u2 = draw_uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  static double gumbel_from_uniform(double u) {
    if (!(u > 0.0 && u < 1.0))
      throw ValueError("gumbel_from_uniform: u must lie strictly in (0, 1)");
    return -std::log(-std::log(u));
  }

  static constexpr double kUniformLo = 1e-12;
  static constexpr double kUniformHi = 1.0 - 1e-12;

 private:
  static constexpr double kPi = 3.141592653589793238462643383279502884;

  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace tdnas
