// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace lcsb {

/// Seeded generator whose whole state lives in the engine, so it can be
/// serialized into a checkpoint and resumed bit-exactly. Distributions are
/// implemented here rather than with <random> adaptors, which carry hidden
/// state and are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 42) : engine_(seed) {}

  /// Independent stream derived from (seed, stream) via splitmix64.
  static Rng derive(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  /// Uniform double in [0, 1).
  double uniform01();

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal();

  std::string serialize() const;
  void restore(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace lcsb
