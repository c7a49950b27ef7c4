#include "gammadesk/rng.hpp"

#include <cmath>
#include <numbers>

namespace gammadesk {

std::uint64_t mix64(std::uint64_t x) noexcept {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) noexcept {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept {
  return mix64(seed * 0x9e3779b97f4a7c15ULL ^ fnv1a64(name));
}

Rng Rng::split(std::string_view name) const noexcept {
  Rng child(0);
  child.key_ = mix64(key_ ^ fnv1a64(name));
  return child;
}

std::uint64_t Rng::next_u64() noexcept {
  ++counter_;
  return mix64(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal(double mean, double stddev) noexcept {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) noexcept {
  if (n == 0) return 0;
  // Lemire's multiply-shift with rejection.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * bound;
    if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::size_t>(m >> 64);
  }
}

long Rng::between(long lo, long hi) noexcept {
  return lo + static_cast<long>(below(static_cast<std::size_t>(hi - lo + 1)));
}

}  // namespace gammadesk
