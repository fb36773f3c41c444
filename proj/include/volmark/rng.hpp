#pragma once

#include <cstdint>
#include <vector>

namespace volmark {

// SplitMix64: tiny, portable, and splittable. All randomness in the project
// flows through this so that identical seeds give bit-identical results on
// every platform (std::* distributions are implementation-defined).
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from a master seed; used to give each
// volume / parameter group its own generator.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  SplitMix64 g(master ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
  g.next_u64();
  return g.next_u64();
}

template <typename T>
std::vector<T> uniform_vector(SplitMix64& rng, std::size_t n, double lo, double hi) {
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(rng.next_range(lo, hi));
  return out;
}

}  // namespace volmark
