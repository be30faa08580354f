#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace normlab {

std::uint64_t splitmix64(std::uint64_t x);

/// Derives an independent 64-bit seed for a named sub-stream.
///
/// All randomness in the project flows from one top-level seed through this
/// function: the stream name and up to two counters (epoch, cell index, ...)
/// are hashed together, so no stream depends on how many draws another stream
/// made or on which thread consumed it.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t a = 0,
                          std::uint64_t b = 0);

/// 64-bit FNV-1a, used for state hashes and config hashes.
std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  /// Uniform integer in [lo, hi].
  long integer(long lo, long hi) { return std::uniform_int_distribution<long>(lo, hi)(engine_); }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }

  std::vector<std::size_t> permutation(std::size_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace normlab
