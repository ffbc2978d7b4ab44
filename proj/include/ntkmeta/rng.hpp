#pragma once

#include <cstdint>
#include <initializer_list>

namespace ntkmeta {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Folds a run seed and a path of stream ids (iteration, task index, ...)
/// into one key. Different paths give independent streams.
constexpr std::uint64_t derive_key(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t k = mix64(seed ^ 0x6a09e667f3bcc908ULL);
  for (std::uint64_t id : path) k = mix64(k ^ mix64(id + 0x3c6ef372fe94f82bULL));
  return k;
}

/// Counter-based generator: draw i is mix64(key + i·γ). Streams keyed by
/// (seed, iteration, task) are independent of the order they are consumed in,
/// so serial and parallel runs produce the same numbers.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}
  CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> path)
      : key_(derive_key(seed, path)) {}

  std::uint64_t next_u64() { return mix64(key_ + 0x9e3779b97f4a7c15ULL * counter_++); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace ntkmeta
