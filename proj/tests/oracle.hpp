#pragma once

// Reference implementations used as test oracles. They are written from the
// textbook definitions and share no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace oracle {

/// MT19937-64 from the published recurrence.
class Mt64 {
public:
  explicit Mt64(std::uint64_t seed) {
    mt_[0] = seed;
    for (std::size_t i = 1; i < kN; ++i) mt_[i] = 6364136223846793005ULL * (mt_[i - 1] ^ (mt_[i - 1] >> 62)) + i;
    idx_ = kN;
  }

  std::uint64_t next() {
    if (idx_ >= kN) twist();
    std::uint64_t x = mt_[idx_++];
    x ^= (x >> 29) & 0x5555555555555555ULL;
    x ^= (x << 17) & 0x71D67FFFEDA60000ULL;
    x ^= (x << 37) & 0xFFF7EEE000000000ULL;
    x ^= x >> 43;
    return x;
  }

  double uniform() { return static_cast<double>(next() >> 11) / 9007199254740992.0; }

  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    for (;;) {
      const std::uint64_t x = next();
      if (x < limit) return x % n;
    }
  }

private:
  static constexpr std::size_t kN = 312;
  static constexpr std::size_t kM = 156;

  void twist() {
    constexpr std::uint64_t upper = 0xFFFFFFFF80000000ULL;
    constexpr std::uint64_t lower = 0x7FFFFFFFULL;
    for (std::size_t i = 0; i < kN; ++i) {
      const std::uint64_t x = (mt_[i] & upper) | (mt_[(i + 1) % kN] & lower);
      std::uint64_t xa = x >> 1;
      if (x & 1ULL) xa ^= 0xB5026F5AA96619E9ULL;
      mt_[i] = mt_[(i + kM) % kN] ^ xa;
    }
    idx_ = 0;
  }

  std::array<std::uint64_t, kN> mt_{};
  std::size_t idx_ = 0;
};

/// Partial Fisher-Yates over 0..n-1, first m positions, draw order.
inline std::vector<std::size_t> fisher_yates(Mt64& g, std::size_t n, std::size_t m) {
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < m; ++i) std::swap(pool[i], pool[i + g.below(n - i)]);
  pool.resize(m);
  return pool;
}

/// Sort everything, then interpolate between order statistics.
inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double p = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(p));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (p - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

/// Straight two-pass mean and population std.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  long double s = 0;
  for (double x : v) s += x;
  const long double m = s / v.size();
  long double q = 0;
  for (double x : v) q += (x - m) * (x - m);
  return {static_cast<double>(m), static_cast<double>(std::sqrt(q / v.size()))};
}

/// Tanimoto loss of one class from explicit vectors.
inline double tanimoto(const std::vector<double>& p, const std::vector<double>& y, double smooth) {
  double py = 0, pp = 0, yy = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    py += p[i] * y[i];
    pp += p[i] * p[i];
    yy += y[i] * y[i];
  }
  return 1.0 - (py + smooth) / (pp + yy - py + smooth);
}

/// Dice from explicit index sets.
inline double dice_sets(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) return 1.0;
  int inter = 0;
  for (int x : a) inter += std::count(b.begin(), b.end(), x) > 0;
  return 2.0 * inter / static_cast<double>(a.size() + b.size());
}

/// Bilinear sample of a row-major n x n plane at (u, v), coordinates clamped.
inline double bilinear(const std::vector<double>& plane, std::size_t n, double u, double v) {
  u = std::clamp(u, 0.0, static_cast<double>(n - 1));
  v = std::clamp(v, 0.0, static_cast<double>(n - 1));
  const auto x0 = static_cast<std::size_t>(u);
  const auto y0 = static_cast<std::size_t>(v);
  const std::size_t x1 = std::min(x0 + 1, n - 1);
  const std::size_t y1 = std::min(y0 + 1, n - 1);
  const double tx = u - x0;
  const double ty = v - y0;
  return (1 - tx) * (1 - ty) * plane[y0 * n + x0] + tx * (1 - ty) * plane[y0 * n + x1] +
         (1 - tx) * ty * plane[y1 * n + x0] + tx * ty * plane[y1 * n + x1];
}

}  // namespace oracle
