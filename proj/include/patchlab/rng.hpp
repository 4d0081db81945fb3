#pragma once

#include <cstdint>
#include <string_view>

namespace patchlab {

/// Name recorded in scenario files for the generator below.
inline constexpr std::string_view rng_algorithm = "splitmix64-counter";

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Counter-based stream: draw n is mix(key + n * golden). Streams split by
/// name, so each worker owns an independent sequence regardless of how
/// other streams are consumed.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  constexpr CounterRng split(std::string_view name) const noexcept {
    return CounterRng(splitmix64_mix(key_ ^ fnv1a64(name)));
  }
  constexpr CounterRng split(std::uint64_t n) const noexcept { return CounterRng(splitmix64_mix(key_ ^ splitmix64_mix(n))); }

  constexpr std::uint64_t next() noexcept { return splitmix64_mix(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL); }

  /// Uniform in [0,1) with 53 random bits.
  constexpr double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n) by plain modulo; bias is below 2^-40 for n < 2^24.
  constexpr std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next() % n; }

  constexpr std::uint64_t counter() const noexcept { return counter_; }
  constexpr std::uint64_t key() const noexcept { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace patchlab
