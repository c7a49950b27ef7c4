#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace gammadesk {

/// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Stable 64-bit FNV-1a over bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;

/// Named sub-seed: hash of (seed, component name).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) noexcept;

/// Counter-based generator: output i is mix64(key + i * golden). Streams are
/// split by name so every component draws from its own reproducible sequence
/// regardless of what other components consume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : key_(mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  Rng split(std::string_view name) const noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Box-Muller; no cached spare so the stream position is a pure function of draws.
  double normal(double mean = 0.0, double stddev = 1.0) noexcept;
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) noexcept;
  /// Uniform integer in [lo, hi].
  long between(long lo, long hi) noexcept;

  template <class T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace gammadesk
