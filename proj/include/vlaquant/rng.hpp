#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace vlaq {

// SplitMix64 stream keyed by (seed, purpose tag, index). Every random draw in
// the toolkit goes through this so runs are reproducible across platforms.
class SplitMix64 {
 public:
  SplitMix64(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
    state_ = mix(seed ^ fnv1a(tag));
    state_ = mix(state_ + 0x9e3779b97f4a7c15ULL * (index + 1));
  }

  std::uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  std::uint64_t below(std::uint64_t n) { return next() % n; }

  // Box-Muller, cosine branch only; one normal per pair of uniforms.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  std::uint64_t state_;
};

}  // namespace vlaq
