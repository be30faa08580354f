#include "normlab/rng.hpp"

#include <numeric>

namespace normlab {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t a,
                          std::uint64_t b) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ fnv1a(stream.data(), stream.size()));
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b * 0x9e3779b97f4a7c15ULL));
  return h;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  // Explicit Fisher-Yates: std::shuffle's draw pattern is not specified.
  for (std::size_t i = n; i > 1; --i) {
    auto j = static_cast<std::size_t>(integer(0, static_cast<long>(i - 1)));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace normlab
