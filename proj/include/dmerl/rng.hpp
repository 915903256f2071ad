#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>

namespace dmerl {

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Counter-based random stream. The n-th output is a pure function of
/// (key, n), so a stream can be copied, replayed, or split into independent
/// children without touching shared state.
class Rng {
 public:
  using result_type = std::uint64_t;

  constexpr Rng() noexcept = default;
  constexpr explicit Rng(std::uint64_t seed) noexcept : key_(detail::mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}
  constexpr Rng(std::uint64_t key, std::uint64_t counter) noexcept : key_(key), counter_(counter) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    const std::uint64_t c = counter_++;
    return detail::mix64(key_ ^ detail::mix64(c + 0x9e3779b97f4a7c15ULL));
  }

  /// Child stream whose outputs are independent of this stream and of
  /// children with a different id. Does not advance this stream.
  [[nodiscard]] constexpr Rng split(std::uint64_t id) const noexcept {
    return Rng{detail::mix64(key_ + detail::mix64(id ^ 0xd1b54a32d192ed03ULL)), 0};
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; the bias is below 2^-64 * n, irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
  }

  /// Standard normal via Box-Muller; the second variate is kept for the next call.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
  }

  [[nodiscard]] constexpr std::uint64_t key() const noexcept { return key_; }
  [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

  friend constexpr bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t key_ = 0x243f6a8885a308d3ULL;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dmerl
