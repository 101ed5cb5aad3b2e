#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>

namespace rep {

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Counter-based random stream. Every value is a pure function of
/// (seed, stream_id, draw index), so streams never interfere with one
/// another and any draw can be regenerated without replaying the others.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string stream_id)
      : seed_(seed), stream_id_(std::move(stream_id)),
        key_(detail::splitmix64(seed ^ detail::splitmix64(detail::fnv1a(stream_id_)))) {}

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& stream_id() const noexcept { return stream_id_; }

  /// Independent stream labelled "<parent>/<label>".
  RngStream child(std::string_view label) const {
    return RngStream(seed_, stream_id_ + "/" + std::string(label));
  }

  std::uint64_t bits_at(std::uint64_t index) const noexcept {
    return detail::splitmix64(key_ + detail::splitmix64(index));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform_at(std::uint64_t index) const noexcept {
    return static_cast<double>(bits_at(index) >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on draws (2i, 2i+1).
  double normal_at(std::uint64_t index) const noexcept {
    const double u1 = 1.0 - uniform_at(2 * index);  // (0, 1]
    const double u2 = uniform_at(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Sequential interface over the same counter space.
  double uniform() noexcept { return uniform_at(cursor_++); }
  double normal() noexcept { return normal_at(cursor_++); }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) noexcept {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % (n == 0 ? 1 : n);
  }

  std::uint64_t cursor() const noexcept { return cursor_; }

 private:
  std::uint64_t seed_;
  std::string stream_id_;
  std::uint64_t key_;
  std::uint64_t cursor_ = 0;
};

}  // namespace rep
