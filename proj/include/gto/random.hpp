#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace gto {

/// Seeded random source shared by every stochastic routine in the lab.
///
/// Uniform doubles and categorical draws are derived from raw 64-bit engine
/// output rather than std:: distributions, so sampled token streams do not
/// depend on the standard-library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer on [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Index drawn proportionally to `weights` (need not be normalized).
  /// Zero-weight entries are never returned.
  int categorical(std::span<const double> weights);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Mixes a base seed with a stream tag so independent subsystems
/// (corpus, evaluation, group placement) draw from unrelated streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace gto
