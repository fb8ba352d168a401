// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

/// Seeded 64-bit generator. Draws are a pure function of the seed and the
/// call sequence; nothing depends on thread count or platform distribution
/// implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Independent child stream, e.g. one per config in a sweep.
  Rng fork(std::uint64_t stream) const {
    std::uint64_t z = seed_ + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

/// Entries uniform in [lo, hi).
template <typename T>
Tensor<T> uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi);

/// Uniform Xavier/Glorot init for a rank-2 (fan_in x fan_out) weight:
/// entries in +-sqrt(6 / (fan_in + fan_out)). Throws ShapeError for other
/// ranks.
template <typename T>
Tensor<T> xavier_init(Rng& rng, const Shape& shape);

}  // namespace mmfuse
