#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace ctseg {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed for a sub-stream identified by a sequence of keys, e.g.
/// derive_seed(run_seed, {epoch, batch}).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = mix64(seed);
  for (auto k : keys) h = mix64(h ^ mix64(k));
  return h;
}

/// Seeded random stream. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the distributions below are written
/// out explicitly because the std:: distributions are implementation-defined,
/// and every stochastic operation in the library must be a pure function of
/// its seed on every platform.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) by rejection of the incomplete top range.
  /// n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal draw (Box-Muller, one variate per call).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

private:
  std::mt19937_64 engine_;
};

/// Draws m distinct indices from [0, n) by a partial Fisher-Yates shuffle.
/// Indices are returned in draw order; requires m <= n.
std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t m);

/// Draws m indices from [0, n) independently (with replacement); n > 0.
std::vector<std::size_t> sample_with_replacement(Rng& rng, std::size_t n, std::size_t m);

}  // namespace ctseg
