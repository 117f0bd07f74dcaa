// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string_view>

namespace pemma {

/// Deterministic PRNG (splitmix64 core) with self-contained distributions so
/// that streams are reproducible bit-for-bit across standard libraries.
/// Child streams are derived as splitmix(seed ^ fnv1a(tag)), which is the
/// documented seed-derivation rule for every stage of the pipeline.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi);
  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi);
  /// Standard normal via Box-Muller (pairs cached).
  double normal();
  double normal(double mean, double stddev);
  /// Bernoulli draw with probability p.
  bool chance(double p);

  /// Derived child stream for a named stage/component.
  Rng fork(std::string_view tag) const;

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t state_;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace pemma
