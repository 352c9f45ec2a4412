#pragma once

#include <cstdint>
#include <random>

namespace merit {

/// Deterministic random source.
///
/// Built on std::mt19937_64, whose output sequence is fixed by the C++
/// standard, so a seed yields the same raw stream on every conforming
/// platform. All derived distributions (uniform doubles, normals, bounded
/// integers) are implemented here rather than with std:: distributions,
/// whose algorithms are implementation-defined.
///
/// Single owner; never share one instance between threads.
class SeededRng {
public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1) from the top 53 bits of one draw.
  double uniform();

  /// Standard normal via the Box-Muller transform. Each pair of uniforms
  /// (u1, u2) yields sqrt(-2 ln(1-u1)) * cos(2 pi u2) followed by the
  /// matching sin term on the next call.
  double normal();

  /// Uniform integer in [0, n), unbiased (rejection sampling). n > 0.
  std::uint64_t below(std::uint64_t n);

  /// +1 or -1 with equal probability.
  double rademacher();

  /// Independent child stream keyed by (seed, stream). Does not advance
  /// this generator.
  SeededRng derive(std::uint64_t stream) const;

private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; used for seed mixing.
std::uint64_t mix64(std::uint64_t x);

} // namespace merit
